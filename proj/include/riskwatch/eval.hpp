#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "riskwatch/preprocess.hpp"

namespace riskwatch::eval {

struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::size_t total() const { return tp + fp + fn + tn; }
    bool operator==(const ConfusionCounts&) const = default;
};

struct ClassMetrics {
    ConfusionCounts counts;
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    /// Set when the denominator was zero and the value was defined as 0.
    bool precision_undefined = false;
    bool recall_undefined = false;
};

/// Predicted positive iff score >= threshold.
ClassMetrics classify_metrics(std::span<const double> scores, std::span<const int> labels, double threshold);

struct RocCurve {
    /// (fpr, tpr), from (0, 0) to (1, 1); one point per distinct score.
    std::vector<std::pair<double, double>> points;
    /// Score at which each point after the first is reached.
    std::vector<double> thresholds;
    double auc = 0.0;
};

RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels);

/// Labels of one risk type as 0/1.
std::vector<int> binary_labels(const SampleSet& s, RiskType r);

/// A multi-label risk model as seen by the evaluation harness.
class RiskModel {
  public:
    virtual ~RiskModel() = default;
    virtual std::string name() const = 0;
    virtual void fit(const SampleSet& train) = 0;
    /// One probability per risk type per sample.
    virtual std::vector<RiskVector> score(const SampleSet& samples) const = 0;
};

using ModelFactory = std::function<std::unique_ptr<RiskModel>()>;

enum class BacktestMode { sliding, expanding };

/// Durations are counted in samples (one per trading day).
struct BacktestSpec {
    std::size_t initial_train = 5 * 261;
    std::size_t horizon = 30;
    std::size_t step = 30;
    BacktestMode mode = BacktestMode::sliding;
    /// Training samples dropped from the end of each training range so that their label
    /// windows end before the first test anchor; normally the sample label horizon.
    std::size_t purge = 0;
    std::size_t threads = 1;

    void validate() const;
};

struct BacktestWindow {
    std::size_t index = 0;
    RowRange train; // nominal training range
    RowRange fit;   // training range after the purge
    RowRange test;
};

/// Window k tests [initial_train + k*step, +horizon) for k = 0 .. floor((n - initial_train -
/// horizon) / step).
std::vector<BacktestWindow> backtest_windows(std::size_t n_samples, const BacktestSpec& spec);

struct RiskEvaluation {
    std::optional<ClassMetrics> metrics; // absent when the block has no samples
    std::optional<RocCurve> roc;         // absent when only one class is present
};

struct WindowResult {
    BacktestWindow window;
    std::vector<RiskVector> scores;
    std::vector<RiskMask> labels;
    std::array<RiskEvaluation, kRiskTypeCount> per_risk;
};

struct BacktestResult {
    std::string model;
    std::vector<WindowResult> windows;
    /// Scores concatenated across windows, evaluated once.
    std::array<RiskEvaluation, kRiskTypeCount> pooled;
    std::vector<RiskVector> pooled_scores;
    std::vector<RiskMask> pooled_labels;
};

RiskEvaluation evaluate_risk(std::span<const RiskVector> scores, std::span<const RiskMask> labels, RiskType r,
                             double threshold);

BacktestResult rolling_backtest(const ModelFactory& factory, const SampleSet& samples, const BacktestSpec& spec,
                                double threshold = 0.5);

/// Chronological split: train on the first `train_fraction` of samples (minus `purge` at the
/// boundary), test on the rest.
struct HoldoutSplit {
    RowRange train;
    RowRange test;
};
HoldoutSplit holdout_split(std::size_t n_samples, double train_fraction, std::size_t purge);

struct HoldoutResult {
    std::string model;
    HoldoutSplit split;
    std::vector<RiskVector> scores;
    std::vector<RiskMask> labels;
    std::array<RiskEvaluation, kRiskTypeCount> per_risk;
};
HoldoutResult holdout_evaluate(const ModelFactory& factory, const SampleSet& samples, double train_fraction,
                               std::size_t purge, double threshold = 0.5);

/// Contiguous, time-ordered folds: fold f holds samples [f*n/k, (f+1)*n/k).
std::vector<RowRange> time_folds(std::size_t n, std::size_t k);

template <class Params> struct TuneResult {
    std::size_t best_index = 0;
    Params best;
    /// Mean validation AUC per grid cell; NaN when no fold had both classes.
    std::vector<double> cell_scores;
};

/// Training indices for validation fold `fold`: every other sample, minus `purge` samples on
/// each side of the validation block.
std::vector<std::size_t> fold_training_indices(std::size_t n, RowRange fold, std::size_t purge);

template <class Params>
TuneResult<Params> kfold_tune(const std::function<std::unique_ptr<RiskModel>(const Params&)>& factory,
                              const SampleSet& samples, const std::vector<Params>& grid, RiskType risk,
                              std::size_t k = 5, std::size_t purge = 0) {
    if (grid.empty()) throw ValidationError("kfold_tune: empty grid");
    if (k < 2) throw ValidationError("kfold_tune: k must be >= 2");
    if (samples.size() < k) throw ValidationError("kfold_tune: fewer samples than folds");
    const auto folds = time_folds(samples.size(), k);
    TuneResult<Params> out;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t cell = 0; cell < grid.size(); ++cell) {
        double sum = 0.0;
        std::size_t used = 0;
        for (const auto& fold : folds) {
            const auto train_idx = fold_training_indices(samples.size(), fold, purge);
            const auto val = samples.slice(fold.begin, fold.end);
            const auto val_labels = binary_labels(val, risk);
            const auto positives = std::count(val_labels.begin(), val_labels.end(), 1);
            if (train_idx.empty() || positives == 0 || positives == std::ptrdiff_t(val_labels.size())) continue;
            auto model = factory(grid[cell]);
            model->fit(samples.subset(train_idx));
            const auto scores = model->score(val);
            std::vector<double> s;
            for (const auto& v : scores) s.push_back(v[index(risk)]);
            sum += roc_auc(s, val_labels).auc;
            ++used;
        }
        const double mean = used ? sum / double(used) : std::numeric_limits<double>::quiet_NaN();
        out.cell_scores.push_back(mean);
        if (used && mean > best) {
            best = mean;
            out.best_index = cell;
        }
    }
    out.best = grid[out.best_index];
    return out;
}

// ---------------------------------------------------------------------------
// Reports

nlohmann::json to_json(const ClassMetrics& m);
nlohmann::json to_json(const RocCurve& roc);
nlohmann::json to_json(const RiskEvaluation& e);
nlohmann::json to_json(const BacktestResult& r);
nlohmann::json to_json(const HoldoutResult& r);

/// Metrics report: {"models": {<model>: {"backtest": {...}, "holdout": {...}}}}.
struct ModelReport {
    std::string model;
    std::optional<BacktestResult> backtest;
    std::optional<HoldoutResult> holdout;
};
nlohmann::json metrics_report(std::span<const ModelReport> models);
void write_metrics_report(std::span<const ModelReport> models, const std::filesystem::path& path);
/// CSV `model,protocol,risk_type,fpr,tpr,threshold` with every ROC point.
void write_roc_csv(std::span<const ModelReport> models, const std::filesystem::path& path);
/// Fixed-width comparison table: model, risk type, accuracy, precision, recall, F1, AUC.
std::string comparison_table(std::span<const ModelReport> models);

} // namespace riskwatch::eval
