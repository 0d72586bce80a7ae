#include "riskwatch/eval.hpp"

#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

namespace riskwatch::eval {

using nlohmann::json;

ClassMetrics classify_metrics(std::span<const double> scores, std::span<const int> labels, double threshold) {
    if (scores.size() != labels.size()) throw ValidationError("classify_metrics: length mismatch");
    if (scores.empty()) throw ValidationError("classify_metrics: no samples");
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw ValidationError("classify_metrics: threshold outside [0, 1]");
    ClassMetrics m;
    auto& c = m.counts;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool predicted = scores[i] >= threshold;
        const bool actual = labels[i] == 1;
        if (predicted && actual) ++c.tp;
        else if (predicted) ++c.fp;
        else if (actual) ++c.fn;
        else ++c.tn;
    }
    m.accuracy = double(c.tp + c.tn) / double(c.total());
    m.precision_undefined = c.tp + c.fp == 0;
    m.recall_undefined = c.tp + c.fn == 0;
    m.precision = m.precision_undefined ? 0.0 : double(c.tp) / double(c.tp + c.fp);
    m.recall = m.recall_undefined ? 0.0 : double(c.tp) / double(c.tp + c.fn);
    m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    return m;
}

RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw ValidationError("roc_auc: length mismatch");
    std::size_t pos = 0;
    for (int l : labels) pos += l == 1;
    const std::size_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0) throw ValidationError("roc_auc: both classes must be present");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    RocCurve roc;
    roc.points.emplace_back(0.0, 0.0);
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double s = scores[order[i]];
        while (i < order.size() && scores[order[i]] == s) {
            (labels[order[i]] == 1 ? tp : fp) += 1;
            ++i;
        }
        const auto [x0, y0] = roc.points.back();
        const double x1 = double(fp) / double(neg), y1 = double(tp) / double(pos);
        roc.auc += (x1 - x0) * (y0 + y1) / 2.0;
        roc.points.emplace_back(x1, y1);
        roc.thresholds.push_back(s);
    }
    return roc;
}

std::vector<int> binary_labels(const SampleSet& s, RiskType r) {
    std::vector<int> out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = s.labels[i].test(r) ? 1 : 0;
    return out;
}

void BacktestSpec::validate() const {
    if (initial_train == 0 || horizon == 0 || step == 0)
        throw ValidationError("backtest: initial_train, horizon and step must be positive");
    if (purge >= initial_train) throw ValidationError("backtest: purge must be shorter than the training window");
}

std::vector<BacktestWindow> backtest_windows(std::size_t n, const BacktestSpec& spec) {
    spec.validate();
    if (n < spec.initial_train + spec.horizon)
        throw ValidationError("backtest: " + std::to_string(n) + " samples cannot hold a " +
                              std::to_string(spec.initial_train) + "-sample training window plus a " +
                              std::to_string(spec.horizon) + "-sample test window");
    const std::size_t count = (n - spec.initial_train - spec.horizon) / spec.step + 1;
    std::vector<BacktestWindow> out;
    for (std::size_t k = 0; k < count; ++k) {
        BacktestWindow w;
        w.index = k;
        const std::size_t test_begin = spec.initial_train + k * spec.step;
        w.test = {test_begin, test_begin + spec.horizon};
        w.train = {spec.mode == BacktestMode::sliding ? test_begin - spec.initial_train : 0, test_begin};
        w.fit = {w.train.begin, w.train.end - spec.purge};
        out.push_back(w);
    }
    return out;
}

RiskEvaluation evaluate_risk(std::span<const RiskVector> scores, std::span<const RiskMask> labels, RiskType r,
                             double threshold) {
    RiskEvaluation e;
    if (scores.empty()) return e;
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        s.push_back(scores[i][index(r)]);
        y.push_back(labels[i].test(r) ? 1 : 0);
    }
    e.metrics = classify_metrics(s, y, threshold);
    const auto pos = std::count(y.begin(), y.end(), 1);
    if (pos > 0 && pos < std::ptrdiff_t(y.size())) e.roc = roc_auc(s, y);
    return e;
}

BacktestResult rolling_backtest(const ModelFactory& factory, const SampleSet& samples, const BacktestSpec& spec,
                                double threshold) {
    const auto windows = backtest_windows(samples.size(), spec);
    BacktestResult out;
    out.model = factory()->name();
    out.windows.resize(windows.size());

    auto run = [&](std::size_t k) {
        const auto& w = windows[k];
        auto model = factory();
        model->fit(samples.slice(w.fit.begin, w.fit.end));
        const auto test = samples.slice(w.test.begin, w.test.end);
        WindowResult r;
        r.window = w;
        r.scores = model->score(test);
        r.labels = test.labels;
        for (auto risk : kAllRiskTypes) r.per_risk[index(risk)] = evaluate_risk(r.scores, r.labels, risk, threshold);
        out.windows[k] = std::move(r);
    };
    const std::size_t workers = std::clamp<std::size_t>(spec.threads, 1, windows.size());
    if (workers == 1) {
        for (std::size_t k = 0; k < windows.size(); ++k) run(k);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < workers; ++t)
            pool.emplace_back([&, t] {
                for (std::size_t k = t; k < windows.size(); k += workers) run(k);
            });
    }
    for (const auto& w : out.windows) {
        out.pooled_scores.insert(out.pooled_scores.end(), w.scores.begin(), w.scores.end());
        out.pooled_labels.insert(out.pooled_labels.end(), w.labels.begin(), w.labels.end());
    }
    for (auto risk : kAllRiskTypes)
        out.pooled[index(risk)] = evaluate_risk(out.pooled_scores, out.pooled_labels, risk, threshold);
    return out;
}

HoldoutSplit holdout_split(std::size_t n, double train_fraction, std::size_t purge) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ValidationError("holdout: train fraction must be in (0, 1)");
    const auto cut = std::size_t(std::floor(double(n) * train_fraction));
    if (cut <= purge || cut >= n) throw ValidationError("holdout: too few samples for the split");
    return {{0, cut - purge}, {cut, n}};
}

HoldoutResult holdout_evaluate(const ModelFactory& factory, const SampleSet& samples, double train_fraction,
                               std::size_t purge, double threshold) {
    HoldoutResult out;
    out.split = holdout_split(samples.size(), train_fraction, purge);
    auto model = factory();
    out.model = model->name();
    model->fit(samples.slice(out.split.train.begin, out.split.train.end));
    const auto test = samples.slice(out.split.test.begin, out.split.test.end);
    out.scores = model->score(test);
    out.labels = test.labels;
    for (auto risk : kAllRiskTypes) out.per_risk[index(risk)] = evaluate_risk(out.scores, out.labels, risk, threshold);
    return out;
}

std::vector<RowRange> time_folds(std::size_t n, std::size_t k) {
    if (k == 0 || n < k) throw ValidationError("time_folds: need at least one sample per fold");
    std::vector<RowRange> out;
    for (std::size_t f = 0; f < k; ++f) out.push_back({f * n / k, (f + 1) * n / k});
    return out;
}

std::vector<std::size_t> fold_training_indices(std::size_t n, RowRange fold, std::size_t purge) {
    std::vector<std::size_t> out;
    const std::size_t left_end = fold.begin >= purge ? fold.begin - purge : 0;
    for (std::size_t i = 0; i < left_end; ++i) out.push_back(i);
    for (std::size_t i = fold.end + purge; i < n; ++i) out.push_back(i);
    return out;
}

// ---------------------------------------------------------------------------
// Reports

json to_json(const ClassMetrics& m) {
    return {{"confusion", {{"tp", m.counts.tp}, {"fp", m.counts.fp}, {"fn", m.counts.fn}, {"tn", m.counts.tn}}},
            {"accuracy", m.accuracy},
            {"precision", m.precision},
            {"recall", m.recall},
            {"f1", m.f1},
            {"precision_undefined", m.precision_undefined},
            {"recall_undefined", m.recall_undefined}};
}

json to_json(const RocCurve& roc) {
    json pts = json::array();
    for (const auto& [x, y] : roc.points) pts.push_back({x, y});
    return {{"auc", roc.auc}, {"points", pts}, {"thresholds", roc.thresholds}};
}

json to_json(const RiskEvaluation& e) {
    json j = json::object();
    j["metrics"] = e.metrics ? to_json(*e.metrics) : json(nullptr);
    j["auc"] = e.roc ? json(e.roc->auc) : json(nullptr);
    j["roc"] = e.roc ? to_json(*e.roc) : json(nullptr);
    return j;
}

namespace {

json per_risk_json(const std::array<RiskEvaluation, kRiskTypeCount>& blocks) {
    json j = json::object();
    for (auto r : kAllRiskTypes) j[std::string(to_string(r))] = to_json(blocks[index(r)]);
    return j;
}

} // namespace

json to_json(const BacktestResult& r) {
    json windows = json::array();
    for (const auto& w : r.windows) {
        json auc = json::object();
        for (auto risk : kAllRiskTypes) {
            const auto& e = w.per_risk[index(risk)];
            auc[std::string(to_string(risk))] = e.roc ? json(e.roc->auc) : json(nullptr);
        }
        windows.push_back({{"index", w.window.index},
                           {"train", {w.window.train.begin, w.window.train.end}},
                           {"fit", {w.window.fit.begin, w.window.fit.end}},
                           {"test", {w.window.test.begin, w.window.test.end}},
                           {"auc", auc}});
    }
    return {{"windows", windows}, {"pooled", per_risk_json(r.pooled)}};
}

json to_json(const HoldoutResult& r) {
    return {{"train", {r.split.train.begin, r.split.train.end}},
            {"test", {r.split.test.begin, r.split.test.end}},
            {"per_risk", per_risk_json(r.per_risk)}};
}

json metrics_report(std::span<const ModelReport> models) {
    json out = json::object();
    for (const auto& m : models) {
        json block = json::object();
        if (m.backtest) block["backtest"] = to_json(*m.backtest);
        if (m.holdout) block["holdout"] = to_json(*m.holdout);
        out[m.model] = block;
    }
    return {{"format", "riskwatch.metrics"}, {"version", 1}, {"models", out}};
}

void write_metrics_report(std::span<const ModelReport> models, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << metrics_report(models).dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

void write_roc_csv(std::span<const ModelReport> models, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "model,protocol,risk_type,fpr,tpr,threshold\n";
    auto emit = [&](const std::string& model, const char* protocol,
                    const std::array<RiskEvaluation, kRiskTypeCount>& blocks) {
        for (auto r : kAllRiskTypes) {
            const auto& roc = blocks[index(r)].roc;
            if (!roc) continue;
            for (std::size_t i = 0; i < roc->points.size(); ++i) {
                out << model << ',' << protocol << ',' << to_string(r) << ',' << format_double(roc->points[i].first)
                    << ',' << format_double(roc->points[i].second) << ',';
                if (i > 0) out << format_double(roc->thresholds[i - 1]);
                out << '\n';
            }
        }
    };
    for (const auto& m : models) {
        if (m.backtest) emit(m.model, "backtest", m.backtest->pooled);
        if (m.holdout) emit(m.model, "holdout", m.holdout->per_risk);
    }
    if (!out) throw IoError("write failed: " + path.string());
}

std::string comparison_table(std::span<const ModelReport> models) {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof line, "%-20s %-10s %-14s %9s %9s %9s %9s %9s\n", "model", "protocol", "risk_type",
                  "accuracy", "precision", "recall", "f1", "auc");
    os << line;
    auto rows = [&](const std::string& model, const char* protocol,
                    const std::array<RiskEvaluation, kRiskTypeCount>& blocks) {
        for (auto r : kAllRiskTypes) {
            const auto& e = blocks[index(r)];
            if (!e.metrics) continue;
            char auc[16] = "n/a";
            if (e.roc) std::snprintf(auc, sizeof auc, "%.4f", e.roc->auc);
            std::snprintf(line, sizeof line, "%-20s %-10s %-14s %9.4f %9.4f %9.4f %9.4f %9s\n", model.c_str(),
                          protocol, std::string(to_string(r)).c_str(), e.metrics->accuracy, e.metrics->precision,
                          e.metrics->recall, e.metrics->f1, auc);
            os << line;
        }
    };
    for (const auto& m : models) {
        if (m.backtest) rows(m.model, "backtest", m.backtest->pooled);
        if (m.holdout) rows(m.model, "holdout", m.holdout->per_risk);
    }
    return os.str();
}

} // namespace riskwatch::eval
