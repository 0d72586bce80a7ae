#include "riskwatch/alert.hpp"

#include <algorithm>
#include <cmath>

namespace riskwatch::alert {

using nlohmann::json;

namespace {

bool is_probability(double p) { return p >= 0.0 && p <= 1.0; }

} // namespace

double posterior(double prior, double likelihood, double evidence) {
    if (!is_probability(prior) || !is_probability(likelihood) || !is_probability(evidence))
        throw ValidationError("posterior: probabilities must lie in [0, 1]");
    if (evidence == 0.0) throw ValidationError("posterior: evidence is zero");
    const double p = likelihood * prior / evidence;
    if (p > 1.0)
        throw ValidationError("posterior: inconsistent inputs give " + format_double(p) + " (P(B) < P(B|A) P(A))");
    return p;
}

void CostSpec::validate() const {
    if (!(cost_fp >= 0.0) || !(cost_fn >= 0.0) || !std::isfinite(cost_fp) || !std::isfinite(cost_fn))
        throw ValidationError("costs must be finite and non-negative");
    if (cost_fp == 0.0 && cost_fn == 0.0) throw ValidationError("cost_fp and cost_fn cannot both be zero");
}

double optimal_threshold(const CostSpec& cost) {
    cost.validate();
    return cost.cost_fp / (cost.cost_fp + cost.cost_fn);
}

std::size_t RiskCalibration::bucket_of(double score) const {
    const auto n = counts.size();
    if (n == 0) throw ValidationError("calibration has no buckets");
    if (!(score > 0.0)) return 0;
    return std::min(n - 1, std::size_t(score * double(n)));
}

double RiskCalibration::posterior_of_bucket(std::size_t b) const {
    return posterior(prior, likelihood.at(b), evidence.at(b));
}

RiskVector BayesModel::posteriors(const RiskVector& scores) const {
    RiskVector out{};
    for (auto r : kAllRiskTypes) out[index(r)] = at(r).posterior_of(scores[index(r)]);
    return out;
}

RiskCalibration calibrate_risk(std::span<const double> scores, std::span<const int> labels, std::size_t buckets) {
    if (scores.size() != labels.size()) throw ValidationError("calibrate: length mismatch");
    if (buckets == 0) throw ValidationError("calibrate: need at least one bucket");
    RiskCalibration c;
    c.counts.assign(buckets, 0);
    c.positives.assign(buckets, 0);
    c.likelihood.resize(buckets);
    c.evidence.resize(buckets);
    std::size_t pos = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!std::isfinite(scores[i])) throw ValidationError("calibrate: non-finite score");
        const auto b = c.bucket_of(scores[i]);
        ++c.counts[b];
        if (labels[i] == 1) {
            ++c.positives[b];
            ++pos;
        }
    }
    const std::size_t n = scores.size();
    if (pos == 0 || pos == n) throw ValidationError("calibrate: history must contain both classes");
    c.prior = double(pos) / double(n);
    const double k = double(buckets);
    for (std::size_t b = 0; b < buckets; ++b) {
        c.likelihood[b] = (double(c.positives[b]) + 1.0) / (double(pos) + k);
        c.evidence[b] = (double(c.counts[b]) + 1.0) / (double(n) + k);
    }
    return c;
}

BayesModel calibrate(std::span<const RiskVector> scores, std::span<const RiskMask> labels, std::size_t buckets) {
    if (scores.size() != labels.size()) throw ValidationError("calibrate: length mismatch");
    BayesModel m;
    m.buckets = buckets;
    for (auto r : kAllRiskTypes) {
        std::vector<double> s(scores.size());
        std::vector<int> y(scores.size());
        for (std::size_t i = 0; i < scores.size(); ++i) {
            s[i] = scores[i][index(r)];
            y[i] = labels[i].test(r) ? 1 : 0;
        }
        try {
            m.per_risk[index(r)] = calibrate_risk(s, y, buckets);
        } catch (const ValidationError& e) {
            throw ValidationError(std::string(to_string(r)) + ": " + e.what());
        }
    }
    return m;
}

json to_json(const BayesModel& m) {
    json risks = json::object();
    for (auto r : kAllRiskTypes) {
        const auto& c = m.at(r);
        risks[std::string(to_string(r))] = {{"prior", c.prior},         {"likelihood", c.likelihood},
                                            {"evidence", c.evidence},   {"positives", c.positives},
                                            {"counts", c.counts}};
    }
    return {{"format", "riskwatch.bayes"}, {"version", 1}, {"buckets", m.buckets}, {"risks", risks}};
}

BayesModel bayes_from_json(const json& j) {
    try {
        if (j.at("format") != "riskwatch.bayes" || j.at("version") != 1)
            throw ParseError("not a version-1 riskwatch calibration");
        BayesModel m;
        m.buckets = j.at("buckets").get<std::size_t>();
        for (auto r : kAllRiskTypes) {
            const auto& b = j.at("risks").at(std::string(to_string(r)));
            auto& c = m.per_risk[index(r)];
            c.prior = b.at("prior").get<double>();
            c.likelihood = b.at("likelihood").get<std::vector<double>>();
            c.evidence = b.at("evidence").get<std::vector<double>>();
            c.positives = b.at("positives").get<std::vector<std::size_t>>();
            c.counts = b.at("counts").get<std::vector<std::size_t>>();
            if (c.likelihood.size() != m.buckets || c.evidence.size() != m.buckets || c.counts.size() != m.buckets ||
                c.positives.size() != m.buckets)
                throw ParseError(std::string(to_string(r)) + ": bucket arrays disagree with bucket count");
        }
        return m;
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed calibration: ") + e.what());
    }
}

void save_bayes(const BayesModel& m, const CostSpec& cost, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto j = to_json(m);
    j["cost"] = {{"cost_fp", cost.cost_fp}, {"cost_fn", cost.cost_fn}};
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

BayesModel load_bayes(const std::filesystem::path& path, CostSpec* cost) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    auto m = bayes_from_json(j);
    if (cost && j.contains("cost")) {
        cost->cost_fp = j["cost"].value("cost_fp", 1.0);
        cost->cost_fn = j["cost"].value("cost_fn", 1.0);
        cost->validate();
    }
    return m;
}

std::string_view to_string(Severity s) {
    switch (s) {
    case Severity::watch: return "watch";
    case Severity::warning: return "warning";
    case Severity::critical: return "critical";
    }
    return "?";
}

Severity parse_severity(std::string_view s) {
    if (s == "watch") return Severity::watch;
    if (s == "warning") return Severity::warning;
    if (s == "critical") return Severity::critical;
    throw ValidationError("unknown severity '" + std::string(s) + "'");
}

Severity severity_for(double posterior, double threshold) {
    if (posterior >= threshold + 0.35) return Severity::critical;
    if (posterior >= threshold + 0.15) return Severity::warning;
    return Severity::watch;
}

json to_json(const AlertEvent& e) {
    return {{"timestamp_ms", e.timestamp_ms},
            {"date", Date::from_epoch_ms(e.timestamp_ms).iso()},
            {"risk_type", to_string(e.risk_type)},
            {"posterior", e.posterior},
            {"severity", to_string(e.severity)},
            {"source_window", e.source_window}};
}

AlertEvent alert_from_json(const json& j) {
    try {
        AlertEvent e;
        e.timestamp_ms = j.at("timestamp_ms").get<std::int64_t>();
        e.risk_type = parse_risk_type(j.at("risk_type").get<std::string>());
        e.posterior = j.at("posterior").get<double>();
        e.severity = parse_severity(j.at("severity").get<std::string>());
        e.source_window = j.at("source_window").get<std::string>();
        return e;
    } catch (const json::exception& ex) {
        throw ParseError(std::string("malformed alert: ") + ex.what());
    }
}

AlertEngine::AlertEngine(BayesModel model, CostSpec cost, double hysteresis)
    : model_(std::move(model)), threshold_(optimal_threshold(cost)), hysteresis_(hysteresis) {
    if (!(hysteresis >= 0.0)) throw ValidationError("hysteresis must be non-negative");
    armed_.fill(true);
}

std::vector<AlertEvent> AlertEngine::push(const ScoredPoint& p) {
    return push_posteriors(p.timestamp_ms, model_.posteriors(p.scores), p.source_window);
}

std::vector<AlertEvent> AlertEngine::push_posteriors(std::int64_t timestamp_ms, const RiskVector& posteriors,
                                                     const std::string& source) {
    if (last_time_ && timestamp_ms < *last_time_)
        throw ValidationError("alert stream timestamps must be non-decreasing");
    last_time_ = timestamp_ms;
    std::vector<AlertEvent> out;
    for (auto r : kAllRiskTypes) {
        const double p = posteriors[index(r)];
        auto& armed = armed_[index(r)];
        if (armed && p >= threshold_) {
            out.push_back({timestamp_ms, r, p, severity_for(p, threshold_), source});
            armed = false;
        } else if (!armed && p < threshold_ - hysteresis_) {
            armed = true;
        }
    }
    return out;
}

std::vector<AlertEvent> emit_alerts(std::span<const ScoredPoint> stream, const BayesModel& model,
                                    const CostSpec& cost) {
    AlertEngine engine(model, cost);
    std::vector<AlertEvent> out;
    for (const auto& p : stream) {
        auto events = engine.push(p);
        out.insert(out.end(), events.begin(), events.end());
    }
    return out;
}

std::vector<std::size_t> crossing_indices(std::span<const double> posteriors, double threshold, double hysteresis) {
    std::vector<std::size_t> out;
    bool armed = true;
    for (std::size_t i = 0; i < posteriors.size(); ++i) {
        if (armed && posteriors[i] >= threshold) {
            out.push_back(i);
            armed = false;
        } else if (!armed && posteriors[i] < threshold - hysteresis) {
            armed = true;
        }
    }
    return out;
}

AlertLog::AlertLog(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    out_.open(path_, std::ios::app);
    if (!out_) throw IoError("cannot open alert log " + path_.string());
}

void AlertLog::append(const AlertEvent& e) {
    std::lock_guard lock(mu_);
    out_ << to_json(e).dump() << '\n';
    out_.flush();
    if (!out_) throw IoError("alert log write failed: " + path_.string());
}

std::vector<AlertEvent> read_alert_log(const std::filesystem::path& path) {
    std::vector<AlertEvent> out;
    std::ifstream in(path);
    if (!in) return out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            out.push_back(alert_from_json(json::parse(line)));
        } catch (const json::parse_error& e) {
            throw ParseError(e.what(), n);
        } catch (const ParseError& e) {
            throw ParseError(e.what(), n);
        }
    }
    return out;
}

} // namespace riskwatch::alert
