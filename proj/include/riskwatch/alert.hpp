#pragma once

#include <filesystem>
#include <fstream>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "riskwatch/common.hpp"

namespace riskwatch::alert {

/// P(A|B) = P(B|A) P(A) / P(B). Throws when evidence is 0 or the inputs imply a value above 1.
double posterior(double prior, double likelihood, double evidence);

struct CostSpec {
    double cost_fp = 1.0;
    double cost_fn = 1.0;
    void validate() const;
};

/// Alert iff posterior >= cost_fp / (cost_fp + cost_fn).
double optimal_threshold(const CostSpec& cost);

/// Calibration for one risk type: the observable is the model score in equal-width buckets on [0, 1].
struct RiskCalibration {
    double prior = 0.0;
    std::vector<double> likelihood; // P(bucket | risk)
    std::vector<double> evidence;   // P(bucket)
    std::vector<std::size_t> positives;
    std::vector<std::size_t> counts;

    std::size_t bucket_of(double score) const;
    double posterior_of_bucket(std::size_t b) const;
    double posterior_of(double score) const { return posterior_of_bucket(bucket_of(score)); }
};

struct BayesModel {
    std::size_t buckets = 10;
    std::array<RiskCalibration, kRiskTypeCount> per_risk;

    const RiskCalibration& at(RiskType r) const { return per_risk[index(r)]; }
    RiskVector posteriors(const RiskVector& scores) const;
};

/// Laplace-smoothed counts: P(A) = n_pos / n, P(b|A) = (pos_b + 1) / (n_pos + B),
/// P(b) = (n_b + 1) / (n + B).
RiskCalibration calibrate_risk(std::span<const double> scores, std::span<const int> labels, std::size_t buckets = 10);
/// Throws when any risk type has a single class.
BayesModel calibrate(std::span<const RiskVector> scores, std::span<const RiskMask> labels, std::size_t buckets = 10);

nlohmann::json to_json(const BayesModel& m);
BayesModel bayes_from_json(const nlohmann::json& j);
void save_bayes(const BayesModel& m, const CostSpec& cost, const std::filesystem::path& path);
BayesModel load_bayes(const std::filesystem::path& path, CostSpec* cost = nullptr);

enum class Severity { watch, warning, critical };
std::string_view to_string(Severity s);
Severity parse_severity(std::string_view s);

/// watch [t, t+0.15), warning [t+0.15, t+0.35), critical from t+0.35.
Severity severity_for(double posterior, double threshold);

struct AlertEvent {
    std::int64_t timestamp_ms = 0;
    RiskType risk_type = RiskType::market_crash;
    double posterior = 0.0;
    Severity severity = Severity::watch;
    std::string source_window;
    bool operator==(const AlertEvent&) const = default;
};

nlohmann::json to_json(const AlertEvent& e);
AlertEvent alert_from_json(const nlohmann::json& j);

struct ScoredPoint {
    std::int64_t timestamp_ms = 0;
    RiskVector scores{};
    std::string source_window;
};

/// Upward threshold crossings with hysteresis, tracked per risk type.
class AlertEngine {
  public:
    AlertEngine(BayesModel model, CostSpec cost, double hysteresis = 0.05);

    /// Throws on a timestamp earlier than the previous one.
    std::vector<AlertEvent> push(const ScoredPoint& p);
    /// Same rule applied to precomputed posteriors.
    std::vector<AlertEvent> push_posteriors(std::int64_t timestamp_ms, const RiskVector& posteriors,
                                            const std::string& source);

    double threshold() const { return threshold_; }
    const BayesModel& model() const { return model_; }

  private:
    BayesModel model_;
    double threshold_;
    double hysteresis_;
    std::array<bool, kRiskTypeCount> armed_;
    std::optional<std::int64_t> last_time_;
};

std::vector<AlertEvent> emit_alerts(std::span<const ScoredPoint> stream, const BayesModel& model,
                                    const CostSpec& cost);

/// Posterior-level form for a single risk type; returns the indices that alert.
std::vector<std::size_t> crossing_indices(std::span<const double> posteriors, double threshold,
                                          double hysteresis = 0.05);

/// Append-only JSONL alert log.
class AlertLog {
  public:
    explicit AlertLog(std::filesystem::path path);
    void append(const AlertEvent& e);
    const std::filesystem::path& path() const { return path_; }

  private:
    std::filesystem::path path_;
    std::ofstream out_;
    std::mutex mu_;
};

std::vector<AlertEvent> read_alert_log(const std::filesystem::path& path);

} // namespace riskwatch::alert
