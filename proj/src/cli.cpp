#include "riskwatch/cli.hpp"

#include <pthread.h>
#include <signal.h>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "riskwatch/bench.hpp"
#include "riskwatch/models.hpp"
#include "riskwatch/rng.hpp"
#include "riskwatch/stream.hpp"

namespace riskwatch::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::size_t to_count(const std::string& v) {
    if (v.empty() || !std::all_of(v.begin(), v.end(), [](unsigned char c) { return std::isdigit(c); }))
        throw ValidationError("expected a non-negative integer, got '" + v + "'");
    return std::stoull(v);
}

int to_int(const std::string& v) {
    const auto n = to_count(v);
    if (n > 1'000'000) throw ValidationError("value out of range: '" + v + "'");
    return int(n);
}

double to_real(const std::string& v) {
    const auto d = parse_double(v);
    if (!d || !std::isfinite(*d)) throw ValidationError("expected a number, got '" + v + "'");
    return *d;
}

bool to_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ValidationError("expected true or false, got '" + v + "'");
}

Date to_date(const std::string& v) {
    if (v.size() != 10) throw ValidationError("expected YYYY-MM-DD, got '" + v + "'");
    return Date::parse(v);
}

RiskVector to_risk_vector(const std::string& v) {
    RiskVector out{};
    std::stringstream ss(v);
    std::string item;
    std::size_t i = 0;
    while (std::getline(ss, item, ',')) {
        if (i == kRiskTypeCount) throw ValidationError("expected 4 comma-separated values");
        out[i++] = to_real(trim(item));
    }
    if (i != kRiskTypeCount) throw ValidationError("expected 4 comma-separated values");
    return out;
}

std::optional<double> to_fraction_or_auto(const std::string& v) {
    if (v == "auto") return std::nullopt;
    return to_real(v);
}

template <class Fn> void collect(std::vector<std::string>& out, Fn&& fn) {
    try {
        fn();
    } catch (const std::exception& e) {
        out.push_back(e.what());
    }
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
    ensure_dir(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    out.flush();
    if (!out) throw IoError("cannot write " + path.string());
}

void require(const fs::path& path, const std::string& producer) {
    if (!fs::exists(path)) throw MissingArtifact(producer, path);
}

models::ModelKind parse_kind_alias(const std::string& name) {
    if (name == "rf") return models::ModelKind::random_forest;
    if (name == "gbt") return models::ModelKind::gradient_boosting;
    return models::parse_model_kind(name);
}

std::vector<models::ModelKind> parse_kind_list(const std::string& text) {
    std::vector<models::ModelKind> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!trim(item).empty()) out.push_back(parse_kind_alias(trim(item)));
    if (out.empty()) throw ValidationError("no models named");
    return out;
}

/// Scores with one already-trained model of a bundle; fitting is a no-op.
class CheckpointModel : public eval::RiskModel {
  public:
    CheckpointModel(const models::ModelBundle& bundle, models::ModelKind kind) : bundle_(bundle), kind_(kind) {}
    std::string name() const override { return std::string(models::to_string(kind_)); }
    void fit(const SampleSet&) override {}
    std::vector<RiskVector> score(const SampleSet& samples) const override {
        std::vector<RiskVector> out;
        out.reserve(samples.size());
        for (const auto& w : samples.inputs) out.push_back(*bundle_.score_window(w).get(kind_));
        return out;
    }

  private:
    const models::ModelBundle& bundle_;
    models::ModelKind kind_;
};

std::unique_ptr<eval::RiskModel> make_model(const RunConfig& cfg, models::ModelKind kind) {
    switch (kind) {
    case models::ModelKind::lstm: return std::make_unique<models::LstmModel>(cfg.lstm);
    case models::ModelKind::random_forest:
        return std::make_unique<models::TreeModel>(trees::EnsembleKind::random_forest, cfg.rf, cfg.tree_risks);
    case models::ModelKind::gradient_boosting:
        return std::make_unique<models::TreeModel>(trees::EnsembleKind::gradient_boosting, cfg.gbt, cfg.tree_risks);
    }
    throw ValidationError("unknown model kind");
}

bool has_model(const models::ModelBundle& b, models::ModelKind k) {
    switch (k) {
    case models::ModelKind::lstm: return b.lstm.has_value();
    case models::ModelKind::random_forest: return b.random_forest.has_value();
    case models::ModelKind::gradient_boosting: return b.gradient_boosting.has_value();
    }
    return false;
}

models::ModelBundle load_trained_bundle(const Layout& layout) {
    require(layout.models() / "pipeline.json", "preprocess");
    auto bundle = models::load_bundle(layout.models());
    if (!bundle.has_any_model()) throw MissingArtifact("train", layout.models() / "<model>.json");
    return bundle;
}

SampleSet load_sample_set(const Layout& layout) {
    require(layout.samples(), "preprocess");
    require(layout.models() / "pipeline.json", "preprocess");
    return load_samples(layout.samples());
}

struct Context {
    RunConfig cfg;
    Layout layout;
    std::ostream& out;
    std::ostream& err;
    bool quiet = false;

    void log(const std::string& msg) const {
        if (!quiet) err << "riskwatch: " << msg << '\n';
    }
};

// --------------------------------------------------------------------------- subcommands

void cmd_gen(Context& ctx, bool events) {
    ctx.cfg.gen.validate();
    ctx.log("generating " + ctx.cfg.gen.start_date.iso() + " .. " + ctx.cfg.gen.end_date.iso());
    const auto records = generate(ctx.cfg.gen);
    ensure_dir(ctx.layout.data());
    for (const auto& entry : fs::directory_iterator(ctx.layout.data()))
        if (entry.path().extension() == ".csv") fs::remove(entry.path());
    if (ctx.cfg.split_files)
        write_records_split(records, ctx.layout.data());
    else
        write_records(records, ctx.layout.data() / "records.csv");
    if (events) {
        const auto ev = stream::to_events(records);
        stream::write_events(ev, ctx.layout.events());
    }
    ctx.out << format_summary(summarize(records));
    ctx.log("wrote " + std::to_string(records.size()) + " records to " + ctx.layout.data().string());
}

void cmd_preprocess(Context& ctx) {
    require(ctx.layout.data(), "gen");
    const auto records = read_records(ctx.layout.data());
    if (records.empty()) throw MissingArtifact("gen", ctx.layout.data() / "*.csv");
    const auto universe = Universe::of(records);
    const auto raw = extract_features(records, universe);
    const auto names = ctx.cfg.features == "all" ? raw.feature_names : market_feature_names(raw.feature_names);
    const auto holdout_rows = std::size_t(std::floor(double(raw.rows()) * ctx.cfg.holdout_fraction));
    const auto fit_end = std::min(ctx.cfg.backtest.initial_train + ctx.cfg.lookback, holdout_rows);
    if (fit_end < 2) throw ValidationError("too few feature rows (" + std::to_string(raw.rows()) + ") to fit the pipeline");
    const auto pipeline = FeaturePipeline::fit(raw, names, ctx.cfg.z_threshold, RowRange{0, fit_end});
    const auto transformed = pipeline.transform(raw.select(names));
    const auto samples =
        make_samples(transformed, label_timeline(records, raw.timestamps), ctx.cfg.lookback, ctx.cfg.horizon);
    if (samples.empty()) throw ValidationError("no samples: the data span is shorter than lookback + horizon");

    write_feature_matrix(raw, ctx.layout.features() / "raw.csv");
    write_feature_matrix(transformed, ctx.layout.features() / "transformed.csv");
    if (fs::exists(ctx.layout.samples())) fs::remove_all(ctx.layout.samples());
    save_samples(samples, ctx.layout.samples());
    ensure_dir(ctx.layout.models());
    models::save_pipeline(pipeline, ctx.cfg.lookback, ctx.cfg.horizon, ctx.layout.models(), universe);
    ctx.out << json{{"rows", raw.rows()},
                    {"features", names.size()},
                    {"samples", samples.size()},
                    {"pipeline_fit_rows", fit_end},
                    {"lookback", ctx.cfg.lookback},
                    {"horizon", ctx.cfg.horizon}}
                   .dump()
            << '\n';
}

void cmd_train(Context& ctx, const std::string& which) {
    const auto kind = parse_kind_alias(which);
    const auto samples = load_sample_set(ctx.layout);
    const auto split = eval::holdout_split(samples.size(), ctx.cfg.holdout_fraction, samples.horizon);
    const auto train = samples.slice(split.train.begin, split.train.end);
    ctx.log("training " + std::string(models::to_string(kind)) + " on " + std::to_string(train.size()) + " samples");
    const auto path = models::model_path(ctx.layout.models(), kind);
    json summary = {{"model", models::to_string(kind)}, {"train_samples", train.size()}};
    if (kind == models::ModelKind::lstm) {
        models::LstmModel m(ctx.cfg.lstm);
        m.fit(train);
        lstm::save_checkpoint(m.params(), ctx.cfg.lstm, path);
        summary["epochs"] = m.history().train_loss.size();
        summary["best_epoch"] = m.history().best_epoch;
        summary["early_stopped"] = m.history().early_stopped;
    } else {
        const auto ek = kind == models::ModelKind::random_forest ? trees::EnsembleKind::random_forest
                                                                 : trees::EnsembleKind::gradient_boosting;
        models::TreeModel m(ek, kind == models::ModelKind::random_forest ? ctx.cfg.rf : ctx.cfg.gbt, ctx.cfg.tree_risks);
        m.fit(train);
        trees::save_ensembles(m.ensembles(), path);
    }
    summary["version"] = models::content_hash(path);
    summary["path"] = path.string();
    ctx.out << summary.dump() << '\n';
}

void cmd_eval(Context& ctx) {
    const auto samples = load_sample_set(ctx.layout);
    const auto bundle = load_trained_bundle(ctx.layout);
    std::vector<eval::ModelReport> reports;
    for (auto kind : models::kAllModelKinds) {
        if (!has_model(bundle, kind)) continue;
        eval::ModelReport rep;
        rep.model = std::string(models::to_string(kind));
        rep.holdout = eval::holdout_evaluate([&] { return std::make_unique<CheckpointModel>(bundle, kind); }, samples,
                                             ctx.cfg.holdout_fraction, samples.horizon, ctx.cfg.threshold);
        reports.push_back(std::move(rep));
    }
    eval::write_metrics_report(reports, ctx.layout.reports() / "metrics.json");
    eval::write_roc_csv(reports, ctx.layout.reports() / "roc.csv");
    ctx.out << eval::comparison_table(reports);
    ctx.log("wrote " + (ctx.layout.reports() / "metrics.json").string());
}

void cmd_backtest(Context& ctx, const std::string& model_list) {
    const auto samples = load_sample_set(ctx.layout);
    auto spec = ctx.cfg.backtest;
    spec.validate();
    std::vector<eval::ModelReport> reports;
    for (auto kind : parse_kind_list(model_list)) {
        ctx.log("backtesting " + std::string(models::to_string(kind)));
        eval::ModelReport rep;
        rep.model = std::string(models::to_string(kind));
        rep.backtest = eval::rolling_backtest([&] { return make_model(ctx.cfg, kind); }, samples, spec, ctx.cfg.threshold);
        reports.push_back(std::move(rep));
    }
    eval::write_metrics_report(reports, ctx.layout.reports() / "backtest.json");
    eval::write_roc_csv(reports, ctx.layout.reports() / "backtest_roc.csv");
    ctx.out << eval::comparison_table(reports);
}

void cmd_calibrate(Context& ctx) {
    const auto samples = load_sample_set(ctx.layout);
    const auto bundle = load_trained_bundle(ctx.layout);
    const auto split = eval::holdout_split(samples.size(), ctx.cfg.holdout_fraction, samples.horizon);
    std::vector<RiskVector> scores;
    for (const auto& w : samples.inputs) scores.push_back(bundle.score_window(w).combined());

    alert::BayesModel model;
    model.buckets = ctx.cfg.buckets;
    json out = {{"threshold", alert::optimal_threshold(ctx.cfg.cost)}, {"path", ctx.layout.bayes().string()}};
    for (auto r : kAllRiskTypes) {
        const auto name = std::string(to_string(r));
        auto fit = [&](RowRange rows) {
            std::vector<double> s;
            std::vector<int> y;
            for (auto i = rows.begin; i < rows.end; ++i) {
                s.push_back(scores[i][index(r)]);
                y.push_back(samples.labels[i].test(r) ? 1 : 0);
            }
            const auto pos = std::count(y.begin(), y.end(), 1);
            if (pos == 0 || pos == std::ptrdiff_t(y.size())) return false;
            model.per_risk[index(r)] = alert::calibrate_risk(s, y, ctx.cfg.buckets);
            out["samples"][name] = y.size();
            return true;
        };
        if (fit(split.test)) {
            out["source"][name] = "holdout";
        } else if (fit(RowRange{0, samples.size()})) {
            out["source"][name] = "all";
            ctx.log("warning: " + name + " has one class on the held-out split; calibrated on every sample");
        } else {
            throw ValidationError(name + ": no sample carries both classes; cannot calibrate");
        }
        out["priors"][name] = model.at(r).prior;
    }
    alert::save_bayes(model, ctx.cfg.cost, ctx.layout.bayes());
    ctx.out << out.dump() << '\n';
}

void cmd_serve(Context& ctx) {
    const auto scfg = resolve_service_config(ctx.cfg, ctx.layout);
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);

    service::RiskService svc(scfg);
    for (const auto& w : svc.warnings()) ctx.log("warning: " + w);
    if (!svc.models_loaded()) ctx.log("no models loaded; /risk/latest answers 503");
    service::HttpServer server(svc);
    const int port = server.bind();
    ctx.out << json{{"listening", scfg.bind + ":" + std::to_string(port)}, {"port", port}}.dump() << std::endl;
    std::thread runner([&] { server.run(); });
    int sig = 0;
    sigwait(&set, &sig);
    ctx.log("signal " + std::to_string(sig) + ", shutting down");
    server.stop();
    runner.join();
}

void cmd_replay(Context& ctx, const std::optional<std::string>& events_path, const stream::PipelineConfig& pcfg) {
    const fs::path path = events_path ? fs::path(*events_path) : ctx.layout.events();
    if (!events_path) require(path, "gen --events");
    const auto bundle = load_trained_bundle(ctx.layout);
    std::optional<alert::BayesModel> bayes;
    alert::CostSpec cost = ctx.cfg.cost;
    if (fs::exists(ctx.layout.bayes())) bayes = alert::load_bayes(ctx.layout.bayes(), &cost);
    const auto events = stream::read_events(path);
    stream::DayScorer scorer(bundle, bayes, cost);
    const auto result = stream::run_pipeline(events, scorer, pcfg);

    std::string days, alerts;
    for (const auto& d : result.days) days += stream::to_json(d).dump() + '\n';
    for (const auto& a : result.alerts) alerts += alert::to_json(a).dump() + '\n';
    const auto metrics = stream::to_json(result.metrics);
    write_text(ctx.layout.replay() / "days.jsonl", days);
    write_text(ctx.layout.replay() / "alerts.jsonl", alerts);
    write_text(ctx.layout.replay() / "metrics.json", metrics.dump(2) + '\n');
    ctx.out << metrics.dump() << '\n';
}

/// Small gradient-boosting bundle over the configured universe, for benches run without models.
models::ModelBundle quick_bundle(const RunConfig& cfg) {
    auto spec = cfg.gen;
    spec.end_date = std::min(spec.end_date, spec.start_date + 2 * 365);
    const auto records = generate(spec);
    const auto universe = Universe::of(records);
    const auto raw = extract_features(records, universe);
    models::ModelBundle b;
    b.universe = universe;
    b.lookback = cfg.lookback;
    b.horizon = cfg.horizon;
    b.pipeline = FeaturePipeline::fit(raw, market_feature_names(raw.feature_names), cfg.z_threshold, {0, raw.rows() / 2});
    const auto samples = make_samples(b.pipeline.transform(raw.select(b.pipeline.feature_names)),
                                      label_timeline(records, raw.timestamps), b.lookback, b.horizon);
    auto params = cfg.gbt;
    params.n_trees = std::min<std::size_t>(params.n_trees, 20);
    params.max_depth = std::min<std::size_t>(params.max_depth, 3);
    RiskMask crash;
    crash.set(RiskType::market_crash);
    models::TreeModel gbt(trees::EnsembleKind::gradient_boosting, params, crash);
    gbt.fit(samples);
    b.gradient_boosting = gbt.ensembles();
    b.versions["gradient_boosting"] = "bench";
    return b;
}

void cmd_bench(Context& ctx, const bench::LoadProfile& profile, const std::optional<std::string>& models_dir,
               const std::optional<std::string>& samples_file) {
    bench::RawSamples raw;
    if (samples_file) {
        std::ifstream in(*samples_file);
        if (!in) throw IoError("cannot open " + *samples_file);
        raw = bench::raw_from_json(json::parse(in));
    } else {
        profile.validate();
        raw.environment = bench::Environment::current();
        const auto bundle = models_dir ? models::load_bundle(*models_dir) : quick_bundle(ctx.cfg);
        if (!profile.data_volumes.empty()) {
            ctx.log("batch bench over " + std::to_string(profile.data_volumes.size()) + " volumes");
            raw.volumes = bench::bench_batch(profile.data_volumes, bundle, profile.repetitions, profile.seed);
        }
        if (!profile.concurrency_levels.empty()) {
            std::string token(40, 'x');
            Rng rng(profile.seed, 99);
            for (auto& c : token) c = "abcdefghijklmnopqrstuvwxyz0123456789"[rng.below(36)];
            service::ServiceConfig scfg;
            scfg.bind = "127.0.0.1";
            scfg.port = 0;
            scfg.store = ctx.layout.root / "bench-store";
            scfg.threads = std::max<std::size_t>(4, profile.concurrency_levels.back());
            scfg.tokens = {{token, service::Role::reader}};
            fs::remove_all(scfg.store);
            service::RiskService svc(scfg, bundle, std::nullopt, ctx.cfg.cost);
            auto spec = ctx.cfg.gen;
            spec.end_date = std::min(spec.end_date, spec.start_date + 365);
            svc.ingest(generate(spec));
            service::HttpServer server(svc);
            const int port = server.bind();
            std::thread runner([&] { server.run(); });
            ctx.log("concurrency bench on port " + std::to_string(port));
            try {
                raw.levels = bench::bench_concurrency(profile, {"127.0.0.1", port, token});
            } catch (...) {
                server.stop();
                runner.join();
                throw;
            }
            server.stop();
            runner.join();
            fs::remove_all(scfg.store);
        }
    }
    bench::emit_report(raw, ctx.layout.root);
    const auto report = bench::aggregate(raw);
    ctx.out << bench::report_csv(report);
    if (report.throughput_ratio) ctx.log("max/min throughput ratio " + format_double(*report.throughput_ratio));
    if (report.peak_clients) ctx.log("peak throughput at " + std::to_string(*report.peak_clients) + " clients");
}

} // namespace

MissingArtifact::MissingArtifact(const std::string& producer, const fs::path& path)
    : std::runtime_error("run " + producer + " first: " + path.string() + " not found"), producer_(producer) {}

// --------------------------------------------------------------------------- RunConfig

const std::vector<std::string>& RunConfig::keys() {
    static const std::vector<std::string> k = {
        "seed",
        "gen.seed", "gen.instruments", "gen.forex", "gen.commodities", "gen.start", "gen.end",
        "gen.base_volatility", "gen.stress_multiplier", "gen.precursor_lead", "gen.event_rates",
        "gen.event_magnitude", "gen.split",
        "preprocess.lookback", "preprocess.horizon", "preprocess.z_threshold", "preprocess.features",
        "lstm.hidden", "lstm.batch", "lstm.learning_rate", "lstm.epochs", "lstm.patience", "lstm.clip_norm", "lstm.seed",
        "rf.trees", "rf.depth", "rf.min_leaf", "rf.feature_subsample", "rf.threads", "rf.seed",
        "gbt.trees", "gbt.depth", "gbt.min_leaf", "gbt.learning_rate", "gbt.feature_subsample", "gbt.seed",
        "train.risks",
        "backtest.initial_train", "backtest.horizon", "backtest.step", "backtest.mode", "backtest.purge",
        "backtest.threads",
        "eval.threshold", "eval.holdout_fraction",
        "cost.fp", "cost.fn", "calibrate.buckets",
        "service.bind", "service.port", "service.store", "service.models", "service.bayes", "service.tokens",
        "service.max_body_bytes", "service.snapshot_every", "service.threads"};
    return k;
}

std::string RunConfig::env_name(const std::string& key) {
    std::string out = "RISKWATCH_";
    for (char c : key) out += c == '.' ? '_' : char(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

void RunConfig::set(const std::string& key, const std::string& raw_value) {
    const auto v = trim(raw_value);
    auto fail = [&](const std::exception& e) { return ValidationError(key + ": " + e.what()); };
    try {
        if (key.rfind("service.", 0) == 0) service.set(key.substr(8), v);
        else if (key == "seed") seed = to_count(v);
        else if (key == "gen.seed") gen.seed = to_count(v);
        else if (key == "gen.instruments") gen.n_instruments = to_int(v);
        else if (key == "gen.forex") gen.n_forex = to_int(v);
        else if (key == "gen.commodities") gen.n_commodities = to_int(v);
        else if (key == "gen.start") gen.start_date = to_date(v);
        else if (key == "gen.end") gen.end_date = to_date(v);
        else if (key == "gen.base_volatility") gen.base_volatility = to_real(v);
        else if (key == "gen.stress_multiplier") gen.stress_multiplier = to_real(v);
        else if (key == "gen.precursor_lead") gen.precursor_lead = to_int(v);
        else if (key == "gen.event_rates") gen.event_rates = to_risk_vector(v);
        else if (key == "gen.event_magnitude") gen.event_magnitude = to_risk_vector(v);
        else if (key == "gen.split") split_files = to_bool(v);
        else if (key == "preprocess.lookback") lookback = to_count(v);
        else if (key == "preprocess.horizon") horizon = to_count(v);
        else if (key == "preprocess.z_threshold") z_threshold = to_real(v);
        else if (key == "preprocess.features") {
            if (v != "market" && v != "all") throw ValidationError("expected market or all, got '" + v + "'");
            features = v;
        } else if (key == "lstm.hidden") lstm.hidden_size = to_count(v);
        else if (key == "lstm.batch") lstm.batch_size = to_count(v);
        else if (key == "lstm.learning_rate") lstm.learning_rate = to_real(v);
        else if (key == "lstm.epochs") lstm.max_epochs = to_count(v);
        else if (key == "lstm.patience") lstm.patience = to_count(v);
        else if (key == "lstm.clip_norm") lstm.clip_norm = to_real(v);
        else if (key == "lstm.seed") lstm.seed = to_count(v);
        else if (key == "rf.trees") rf.n_trees = to_count(v);
        else if (key == "rf.depth") rf.max_depth = to_count(v);
        else if (key == "rf.min_leaf") rf.min_leaf_samples = to_count(v);
        else if (key == "rf.feature_subsample") rf.feature_subsample = to_fraction_or_auto(v);
        else if (key == "rf.threads") rf.threads = to_count(v);
        else if (key == "rf.seed") rf.seed = to_count(v);
        else if (key == "gbt.trees") gbt.n_trees = to_count(v);
        else if (key == "gbt.depth") gbt.max_depth = to_count(v);
        else if (key == "gbt.min_leaf") gbt.min_leaf_samples = to_count(v);
        else if (key == "gbt.learning_rate") gbt.learning_rate = to_real(v);
        else if (key == "gbt.feature_subsample") gbt.feature_subsample = to_fraction_or_auto(v);
        else if (key == "gbt.seed") gbt.seed = to_count(v);
        else if (key == "train.risks") tree_risks = v == "all" ? RiskMask{0b1111} : RiskMask::parse(v);
        else if (key == "backtest.initial_train") backtest.initial_train = to_count(v);
        else if (key == "backtest.horizon") backtest.horizon = to_count(v);
        else if (key == "backtest.step") backtest.step = to_count(v);
        else if (key == "backtest.mode") {
            if (v == "sliding") backtest.mode = eval::BacktestMode::sliding;
            else if (v == "expanding") backtest.mode = eval::BacktestMode::expanding;
            else throw ValidationError("expected sliding or expanding, got '" + v + "'");
        } else if (key == "backtest.purge") backtest.purge = to_count(v);
        else if (key == "backtest.threads") backtest.threads = to_count(v);
        else if (key == "eval.threshold") threshold = to_real(v);
        else if (key == "eval.holdout_fraction") holdout_fraction = to_real(v);
        else if (key == "cost.fp") cost.cost_fp = to_real(v);
        else if (key == "cost.fn") cost.cost_fn = to_real(v);
        else if (key == "calibrate.buckets") buckets = to_count(v);
        else throw ValidationError("unknown key");
    } catch (const ValidationError& e) {
        throw fail(e);
    } catch (const std::invalid_argument& e) {
        throw fail(e);
    } catch (const ParseError& e) {
        throw fail(e);
    }
    explicit_.insert(key);
}

void RunConfig::derive_seeds() {
    if (!explicit_.count("gen.seed")) gen.seed = seed;
    if (!explicit_.count("lstm.seed")) lstm.seed = mix_seed(seed, 1);
    if (!explicit_.count("rf.seed")) rf.seed = mix_seed(seed, 2);
    if (!explicit_.count("gbt.seed")) gbt.seed = mix_seed(seed, 3);
}

std::vector<std::string> RunConfig::problems() const {
    std::vector<std::string> out;
    auto check = [&](bool ok, const char* msg) {
        if (!ok) out.push_back(msg);
        return ok;
    };
    auto fraction = [](const std::optional<double>& f) { return !f || (*f > 0.0 && *f <= 1.0); };
    collect(out, [&] { gen.validate(); });

    bool lstm_ok = check(lstm.hidden_size > 0, "lstm.hidden must be positive");
    lstm_ok &= check(lstm.batch_size > 0, "lstm.batch must be positive");
    lstm_ok &= check(lstm.max_epochs > 0, "lstm.epochs must be positive");
    lstm_ok &= check(lstm.learning_rate > 0, "lstm.learning_rate must be positive");
    lstm_ok &= check(lstm.patience < lstm.max_epochs, "lstm.patience must be below lstm.epochs");
    lstm_ok &= check(lstm.clip_norm > 0, "lstm.clip_norm must be positive");
    if (lstm_ok) collect(out, [&] { lstm.validate(); });

    bool rf_ok = check(rf.n_trees > 0, "rf.trees must be positive");
    rf_ok &= check(rf.min_leaf_samples > 0, "rf.min_leaf must be positive");
    rf_ok &= check(fraction(rf.feature_subsample), "rf.feature_subsample must lie in (0, 1] or be auto");
    if (rf_ok) collect(out, [&] { rf.validate(trees::EnsembleKind::random_forest); });

    bool gbt_ok = check(gbt.min_leaf_samples > 0, "gbt.min_leaf must be positive");
    gbt_ok &= check(fraction(gbt.feature_subsample), "gbt.feature_subsample must lie in (0, 1] or be auto");
    gbt_ok &= check(gbt.learning_rate && *gbt.learning_rate > 0, "gbt.learning_rate must be positive");
    if (gbt_ok) collect(out, [&] { gbt.validate(trees::EnsembleKind::gradient_boosting); });

    bool bt_ok = check(backtest.initial_train > 0, "backtest.initial_train must be positive");
    bt_ok &= check(backtest.horizon > 0, "backtest.horizon must be positive");
    bt_ok &= check(backtest.step > 0, "backtest.step must be positive");
    bt_ok &= check(backtest.purge < backtest.initial_train, "backtest.purge must be below backtest.initial_train");
    if (bt_ok) collect(out, [&] { backtest.validate(); });

    if (check(cost.cost_fp >= 0 && cost.cost_fn >= 0, "cost.fp and cost.fn must be non-negative"))
        collect(out, [&] { cost.validate(); });
    collect(out, [&] { service.validate(); });
    check(lookback > 0, "preprocess.lookback must be positive");
    check(horizon > 0, "preprocess.horizon must be positive");
    check(z_threshold > 0, "preprocess.z_threshold must be positive");
    check(!tree_risks.empty(), "train.risks must name at least one risk type");
    check(threshold >= 0 && threshold <= 1, "eval.threshold must lie in [0, 1]");
    check(holdout_fraction > 0 && holdout_fraction < 1, "eval.holdout_fraction must lie in (0, 1)");
    check(buckets >= 2, "calibrate.buckets must be at least 2");
    return out;
}

RunConfig RunConfig::load(const std::optional<fs::path>& file,
                          const std::vector<std::pair<std::string, std::string>>& overrides,
                          const std::map<std::string, std::string>& env) {
    RunConfig c;
    std::vector<std::string> errors;
    if (file) {
        std::ifstream in(*file);
        if (!in) throw IoError("cannot open config " + file->string());
        std::string line;
        std::size_t n = 0;
        while (std::getline(in, line)) {
            ++n;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                errors.push_back(file->string() + ":" + std::to_string(n) + ": expected key = value");
                continue;
            }
            const auto key = trim(line.substr(0, eq));
            collect(errors, [&] {
                try {
                    c.set(key, line.substr(eq + 1));
                } catch (const std::exception& e) {
                    throw ValidationError(file->string() + ":" + std::to_string(n) + ": " + e.what());
                }
            });
        }
    }
    for (const auto& key : keys()) {
        if (key.rfind("service.", 0) == 0) continue;
        if (const auto it = env.find(env_name(key)); it != env.end())
            collect(errors, [&] {
                try {
                    c.set(key, it->second);
                } catch (const std::exception& e) {
                    throw ValidationError(it->first + ": " + e.what());
                }
            });
    }
    collect(errors, [&] { c.service.apply_env(env); });
    for (const auto& [key, value] : overrides)
        collect(errors, [&] { c.set(key, value); });
    c.derive_seeds();
    if (!c.explicit_.count("backtest.purge")) c.backtest.purge = c.horizon;
    for (auto& p : c.problems()) errors.push_back(std::move(p));
    if (!errors.empty()) {
        std::string msg = "invalid configuration:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw ValidationError(msg);
    }
    return c;
}

service::ServiceConfig resolve_service_config(const RunConfig& cfg, const Layout& layout) {
    auto s = cfg.service;
    const service::ServiceConfig defaults;
    if (s.store == defaults.store) s.store = layout.store();
    if (!s.models && fs::exists(layout.models() / "pipeline.json")) s.models = layout.models();
    if (!s.bayes && fs::exists(layout.bayes())) s.bayes = layout.bayes();
    return s;
}

// --------------------------------------------------------------------------- entry point

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
        const std::map<std::string, std::string>& env) {
    CLI::App app{"riskwatch: synthetic market risk monitoring", "riskwatch"};
    app.require_subcommand(1);
    app.fallthrough();

    std::optional<std::string> config_file;
    std::optional<std::uint64_t> seed;
    std::string out_dir = "riskwatch-run";
    std::vector<std::string> sets;
    bool quiet = false;
    app.add_option("--config", config_file, "Key-value config file");
    app.add_option("--seed", seed, "Master seed (overrides config)");
    app.add_option("--out", out_dir, "Artifact root directory")->capture_default_str();
    app.add_option("--set", sets, "Override a config key: --set key=value (repeatable)");
    app.add_flag("--quiet", quiet, "Suppress progress logs");

    auto* gen = app.add_subcommand("gen", "Generate synthetic market records into <out>/data");
    bool gen_events = false;
    gen->add_flag("--events", gen_events, "Also write <out>/data/events.jsonl for replay");
    bool gen_split = false;
    gen->add_flag("--split", gen_split, "One CSV per record kind");

    app.add_subcommand("preprocess", "Extract features, fit the pipeline and build samples");

    auto* train = app.add_subcommand("train", "Train one model on the training split");
    std::string train_kind;
    train->add_option("model", train_kind, "lstm | rf | gbt")
        ->required()
        ->check(CLI::IsMember({"lstm", "rf", "gbt", "random_forest", "gradient_boosting"}));

    app.add_subcommand("eval", "Evaluate trained models on the held-out split");

    auto* backtest = app.add_subcommand("backtest", "Rolling walk-forward backtest, retraining per window");
    std::string backtest_models = "lstm,rf,gbt";
    backtest->add_option("--models", backtest_models, "Comma-separated models")->capture_default_str();

    app.add_subcommand("calibrate", "Fit the Bayesian alert layer on held-out scores");

    app.add_subcommand("serve", "Run the HTTP API until SIGINT or SIGTERM");

    auto* replay = app.add_subcommand("replay", "Replay a JSON-lines event file through the stream pipeline");
    std::optional<std::string> replay_events;
    stream::PipelineConfig pcfg;
    replay->add_option("--events", replay_events, "Event file (default <out>/data/events.jsonl)");
    replay->add_option("--workers", pcfg.workers, "Window workers")->capture_default_str();
    replay->add_option("--sources", pcfg.sources, "Number of event sources")->capture_default_str();
    replay->add_option("--out-of-orderness", pcfg.out_of_orderness, "Watermark bound in ms")->capture_default_str();
    replay->add_option("--lateness", pcfg.allowed_lateness, "Allowed lateness in ms")->capture_default_str();

    auto* benchc = app.add_subcommand("bench", "Throughput and latency benchmarks; writes report files to --out");
    std::string volumes = "100M,500M,1G", levels = "1,8,32,64", mix;
    bench::LoadProfile profile;
    std::optional<std::string> bench_models, bench_samples;
    benchc->add_option("--volumes", volumes, "Data volume ladder")->capture_default_str();
    benchc->add_option("--concurrency", levels, "Client count ladder")->capture_default_str();
    benchc->add_option("--duration", profile.duration_seconds, "Seconds per concurrency level")->capture_default_str();
    benchc->add_option("--repetitions", profile.repetitions, "Runs per volume (median reported)")->capture_default_str();
    benchc->add_option("--mix", mix, "Request mix, e.g. health=1,risk_latest=4,alerts=3,history=2");
    benchc->add_option("--models", bench_models, "Model directory (default: a small built-in model)");
    benchc->add_option("--from-samples", bench_samples, "Re-aggregate a stored samples.json instead of measuring");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    auto fail = [&](const std::string& code, const std::string& message, int status,
                    const json& extra = json::object()) {
        json j = {{"error", {{"code", code}, {"message", message}}}};
        for (auto it = extra.begin(); it != extra.end(); ++it) j["error"][it.key()] = it.value();
        err << j.dump() << '\n';
        return status;
    };

    std::string command = app.get_subcommands().front()->get_name();
    try {
        std::vector<std::pair<std::string, std::string>> overrides;
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + s + "'");
            overrides.push_back({trim(s.substr(0, eq)), s.substr(eq + 1)});
        }
        if (seed) overrides.push_back({"seed", std::to_string(*seed)});
        if (gen_split) overrides.push_back({"gen.split", "true"});
        std::optional<fs::path> cfg_path;
        if (config_file) cfg_path = *config_file;
        Context ctx{RunConfig::load(cfg_path, overrides, env), Layout{out_dir}, out, err, quiet};

        if (command == "gen") cmd_gen(ctx, gen_events);
        else if (command == "preprocess") cmd_preprocess(ctx);
        else if (command == "train") cmd_train(ctx, train_kind);
        else if (command == "eval") cmd_eval(ctx);
        else if (command == "backtest") cmd_backtest(ctx, backtest_models);
        else if (command == "calibrate") cmd_calibrate(ctx);
        else if (command == "serve") cmd_serve(ctx);
        else if (command == "replay") cmd_replay(ctx, replay_events, pcfg);
        else if (command == "bench") {
            if (!bench_samples) {
                profile.data_volumes = volumes.empty() ? std::vector<std::uint64_t>{} : bench::parse_size_list(volumes);
                profile.concurrency_levels = levels.empty() ? std::vector<std::size_t>{} : bench::parse_count_list(levels);
                if (!mix.empty()) profile.request_mix = bench::parse_request_mix(mix);
                profile.seed = ctx.cfg.seed;
            }
            cmd_bench(ctx, profile, bench_models, bench_samples);
        }
    } catch (const MissingArtifact& e) {
        return fail("missing_artifact", e.what(), kExitMissingArtifact, {{"command", command}, {"producer", e.producer()}});
    } catch (const ValidationError& e) {
        return fail("invalid_input", e.what(), kExitUsage, {{"command", command}});
    } catch (const ParseError& e) {
        return fail("parse_error", e.what(), kExitFailure, {{"command", command}, {"line", e.line()}});
    } catch (const bench::BenchError& e) {
        return fail("bench_failed", e.what(), kExitFailure, {{"command", command}});
    } catch (const std::exception& e) {
        return fail("failed", e.what(), kExitFailure, {{"command", command}});
    }
    return kExitOk;
}

} // namespace riskwatch::cli
