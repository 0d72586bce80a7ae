#include "riskwatch/models.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>

namespace riskwatch::models {

using nlohmann::json;

std::string_view to_string(ModelKind k) {
    switch (k) {
    case ModelKind::lstm: return "lstm";
    case ModelKind::random_forest: return "random_forest";
    case ModelKind::gradient_boosting: return "gradient_boosting";
    }
    return "?";
}

ModelKind parse_model_kind(std::string_view name) {
    if (name == "lstm") return ModelKind::lstm;
    if (name == "rf" || name == "random_forest") return ModelKind::random_forest;
    if (name == "gbt" || name == "gradient_boosting") return ModelKind::gradient_boosting;
    throw ValidationError("unknown model '" + std::string(name) + "' (expected lstm, rf or gbt)");
}

// ---------------------------------------------------------------------------

LstmModel::LstmModel(lstm::TrainConfig cfg, double validation_fraction)
    : cfg_(cfg), validation_fraction_(validation_fraction) {
    cfg_.validate();
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
        throw ValidationError("validation fraction must be in (0, 1)");
}

void LstmModel::fit(const SampleSet& train) {
    const std::size_t n = train.size();
    const auto n_val = std::max<std::size_t>(1, std::size_t(double(n) * validation_fraction_));
    const std::size_t purge = train.horizon;
    if (n < n_val + purge + 1) throw ValidationError("lstm: too few samples to hold out a validation block");
    const auto result = lstm::train(train.slice(0, n - n_val - purge), cfg_, train.slice(n - n_val, n));
    params_ = result.params;
    history_ = result.history;
}

std::vector<RiskVector> LstmModel::score(const SampleSet& samples) const {
    if (!params_) throw ValidationError("lstm: model is not trained");
    std::vector<RiskVector> out(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto p = lstm::predict(*params_, samples.inputs[i]);
        for (std::size_t k = 0; k < kRiskTypeCount; ++k) out[i][k] = p(Eigen::Index(k));
    }
    return out;
}

// ---------------------------------------------------------------------------

TreeModel::TreeModel(trees::EnsembleKind kind, trees::TreeParams params, RiskMask risks)
    : kind_(kind), params_(params), risks_(risks) {
    params_.validate(kind_);
}

std::string TreeModel::name() const {
    return kind_ == trees::EnsembleKind::random_forest ? "random_forest" : "gradient_boosting";
}

void TreeModel::fit(const SampleSet& train) {
    if (train.empty()) throw ValidationError(name() + ": empty training set");
    const auto data = trees::tabularize(train);
    ensembles_ = {};
    for (auto r : kAllRiskTypes) {
        if (!risks_.test(r)) continue;
        const auto y = trees::labels_of(train, r);
        ensembles_.per_risk[index(r)] = kind_ == trees::EnsembleKind::random_forest
                                            ? trees::rf_train(data, y, params_)
                                            : trees::gbt_train(data, y, params_);
    }
}

std::vector<RiskVector> TreeModel::score(const SampleSet& samples) const {
    std::vector<RiskVector> out(samples.size(), RiskVector{});
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto row = trees::tabular_row(samples.inputs[i]);
        for (auto r : kAllRiskTypes)
            if (const auto& e = ensembles_.per_risk[index(r)]) out[i][index(r)] = e->predict(row);
    }
    return out;
}

// ---------------------------------------------------------------------------

const std::optional<RiskVector>& ModelScores::get(ModelKind k) const {
    switch (k) {
    case ModelKind::lstm: return lstm;
    case ModelKind::random_forest: return random_forest;
    default: return gradient_boosting;
    }
}

RiskVector ModelScores::combined() const {
    RiskVector sum{};
    int n = 0;
    for (auto k : kAllModelKinds)
        if (const auto& s = get(k)) {
            for (std::size_t r = 0; r < kRiskTypeCount; ++r) sum[r] += (*s)[r];
            ++n;
        }
    if (n == 0) throw ValidationError("no model scores to combine");
    for (auto& v : sum) v /= n;
    return sum;
}

void ModelBundle::check_widths() const {
    const std::size_t w = pipeline.feature_names.size();
    if (lstm && lstm->input_size() != w)
        throw ValidationError("lstm expects " + std::to_string(lstm->input_size()) + " features, pipeline produces " +
                              std::to_string(w));
    for (const auto* ens : {&random_forest, &gradient_boosting}) {
        if (!*ens) continue;
        for (const auto& e : (*ens)->per_risk)
            if (e && e->width != 3 * w)
                throw ValidationError("tree ensemble expects " + std::to_string(e->width) +
                                      " tabular features, pipeline produces " + std::to_string(3 * w));
    }
}

ModelScores ModelBundle::score_window(const Eigen::MatrixXd& window) const {
    ModelScores s;
    if (lstm) {
        const auto p = riskwatch::lstm::predict(*lstm, window);
        RiskVector v{};
        for (std::size_t k = 0; k < kRiskTypeCount; ++k) v[k] = p(Eigen::Index(k));
        s.lstm = v;
    }
    if (random_forest || gradient_boosting) {
        const auto row = trees::tabular_row(window);
        auto eval_trees = [&](const trees::RiskEnsembles& e) {
            RiskVector v{};
            for (auto r : kAllRiskTypes)
                if (const auto& m = e.per_risk[index(r)]) v[index(r)] = m->predict(row);
            return v;
        };
        if (random_forest) s.random_forest = eval_trees(*random_forest);
        if (gradient_boosting) s.gradient_boosting = eval_trees(*gradient_boosting);
    }
    return s;
}

// ---------------------------------------------------------------------------

json to_json(const Universe& u) {
    return {{"stocks", u.stocks},
            {"forex", u.forex},
            {"commodities", u.commodities},
            {"sentiment", u.sentiment},
            {"macro", u.macro}};
}

Universe universe_from_json(const json& j) {
    Universe u;
    u.stocks = j.at("stocks").get<std::vector<std::string>>();
    u.forex = j.at("forex").get<std::vector<std::string>>();
    u.commodities = j.at("commodities").get<std::vector<std::string>>();
    u.sentiment = j.at("sentiment").get<bool>();
    u.macro = j.at("macro").get<bool>();
    return u;
}

json pipeline_to_json(const FeaturePipeline& p, std::size_t lookback, std::size_t horizon, const Universe& universe) {
    return {{"format", "riskwatch.pipeline"},
            {"universe", to_json(universe)},
            {"version", 1},
            {"lookback", lookback},
            {"horizon", horizon},
            {"feature_names", p.feature_names},
            {"z_threshold", p.outliers.z_threshold},
            {"median", p.outliers.median},
            {"scale", p.outliers.scale},
            {"mean", p.normalizer.mean},
            {"stddev", p.normalizer.stddev},
            {"constant", p.normalizer.constant}};
}

FeaturePipeline pipeline_from_json(const json& j, std::size_t* lookback, std::size_t* horizon, Universe* universe) {
    try {
        if (j.at("format") != "riskwatch.pipeline" || j.at("version") != 1)
            throw ParseError("not a version-1 riskwatch pipeline");
        FeaturePipeline p;
        p.feature_names = j.at("feature_names").get<std::vector<std::string>>();
        p.outliers.z_threshold = j.at("z_threshold").get<double>();
        p.outliers.median = j.at("median").get<std::vector<double>>();
        p.outliers.scale = j.at("scale").get<std::vector<double>>();
        p.normalizer.feature_names = p.feature_names;
        p.normalizer.mean = j.at("mean").get<std::vector<double>>();
        p.normalizer.stddev = j.at("stddev").get<std::vector<double>>();
        p.normalizer.constant = j.at("constant").get<std::vector<bool>>();
        const auto w = p.feature_names.size();
        if (p.outliers.median.size() != w || p.outliers.scale.size() != w || p.normalizer.mean.size() != w ||
            p.normalizer.stddev.size() != w || p.normalizer.constant.size() != w)
            throw ParseError("pipeline vectors disagree with the feature count");
        if (lookback) *lookback = j.at("lookback").get<std::size_t>();
        if (horizon) *horizon = j.at("horizon").get<std::size_t>();
        if (universe) *universe = j.contains("universe") ? universe_from_json(j["universe"]) : Universe{};
        return p;
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed pipeline: ") + e.what());
    }
}

namespace {

json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

} // namespace

void save_pipeline(const FeaturePipeline& p, std::size_t lookback, std::size_t horizon,
                   const std::filesystem::path& dir, const Universe& universe) {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "pipeline.json");
    if (!out) throw IoError("cannot write " + (dir / "pipeline.json").string());
    out << pipeline_to_json(p, lookback, horizon, universe).dump() << '\n';
    if (!out) throw IoError("write failed: " + (dir / "pipeline.json").string());
}

std::filesystem::path model_path(const std::filesystem::path& dir, ModelKind k) {
    return dir / (std::string(to_string(k)) + ".json");
}

std::string content_hash(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::istreambuf_iterator<char> it(in), end; it != end; ++it) {
        h ^= std::uint8_t(*it);
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

ModelBundle load_bundle(const std::filesystem::path& dir) {
    if (!std::filesystem::exists(dir / "pipeline.json"))
        throw IoError("no pipeline.json in " + dir.string() + "; run preprocess first");
    ModelBundle b;
    b.pipeline = pipeline_from_json(read_json(dir / "pipeline.json"), &b.lookback, &b.horizon, &b.universe);
    if (const auto p = model_path(dir, ModelKind::lstm); std::filesystem::exists(p)) {
        b.lstm = lstm::load_checkpoint(p);
        b.versions["lstm"] = content_hash(p);
    }
    if (const auto p = model_path(dir, ModelKind::random_forest); std::filesystem::exists(p)) {
        b.random_forest = trees::load_ensembles(p);
        b.versions["random_forest"] = content_hash(p);
    }
    if (const auto p = model_path(dir, ModelKind::gradient_boosting); std::filesystem::exists(p)) {
        b.gradient_boosting = trees::load_ensembles(p);
        b.versions["gradient_boosting"] = content_hash(p);
    }
    b.check_widths();
    return b;
}

} // namespace riskwatch::models
