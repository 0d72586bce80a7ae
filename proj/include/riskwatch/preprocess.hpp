#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <span>
#include <cstddef>
#include <deque>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "riskwatch/common.hpp"
#include "riskwatch/datagen.hpp"

namespace riskwatch {

/// Dense daily feature grid; `missing(r, c)` marks cells with no usable value.
struct FeatureMatrix {
    std::vector<Date> timestamps;
    std::vector<std::string> feature_names;
    Eigen::MatrixXd values;
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> missing;

    std::size_t rows() const { return timestamps.size(); }
    std::size_t cols() const { return feature_names.size(); }
    /// Column index of `name`, or -1.
    int column(std::string_view name) const;
    bool is_missing(std::size_t r, std::size_t c) const { return missing(Eigen::Index(r), Eigen::Index(c)); }

    /// Allocates a rows x cols matrix with every cell missing.
    static FeatureMatrix empty(std::vector<Date> timestamps, std::vector<std::string> names);
    /// Copy restricted to the named columns, in the given order.
    FeatureMatrix select(const std::vector<std::string>& names) const;
    /// Checks shape, ordering and the "observed implies finite" invariant.
    void validate() const;
};

/// Half-open row interval.
struct RowRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - begin; }
};

/// Robust location/scale per feature. A scale of 0 disables flagging for that feature.
struct OutlierBounds {
    double z_threshold = 0.0;
    std::vector<double> median;
    std::vector<double> scale;

    bool is_outlier(std::size_t col, double v) const {
        return scale[col] > 0.0 && std::abs(v - median[col]) / scale[col] > z_threshold;
    }
};

/// Median and robust scale (1.4826 * MAD; 1.2533 * mean absolute deviation when MAD is 0) of
/// the observed cells of each column within `rows`.
OutlierBounds fit_outlier_bounds(const FeatureMatrix& m, double z_threshold, RowRange rows);
FeatureMatrix apply_outlier_bounds(const FeatureMatrix& m, const OutlierBounds& bounds);
/// Marks cells whose robust z-score exceeds `z_threshold` as missing, using whole-column statistics.
FeatureMatrix clean_outliers(const FeatureMatrix& m, double z_threshold);

/// Forward-fill then backward-fill each feature; clears the missing mask.
FeatureMatrix fill_missing(const FeatureMatrix& m);

struct NormalizationParams {
    std::vector<std::string> feature_names;
    std::vector<double> mean;
    std::vector<double> stddev;
    std::vector<bool> constant;
};

NormalizationParams fit_normalizer(const FeatureMatrix& m, RowRange train_rows);
FeatureMatrix apply_normalizer(const FeatureMatrix& m, const NormalizationParams& p);

/// Lookback of the longest rolling feature.
inline constexpr std::size_t kLongestWindow = 20;

/// The instruments a feature extractor tracks, by kind.
struct Universe {
    std::vector<std::string> stocks;
    std::vector<std::string> forex;
    std::vector<std::string> commodities;
    bool sentiment = true;
    bool macro = true;

    static Universe of(const RecordSet& records);
    bool operator==(const Universe&) const = default;
};

/// Incremental feature computation over a daily stream of records.
///
/// Feature catalog, per stock instrument `<id>`:
///   `<id>.ret` log return vs the last observed close, `<id>.vol20` sample stdev of the last 20
///   returns, `<id>.mom5` / `<id>.mom20` log price change over 5 / 20 observations,
///   `<id>.volz` volume z-score over the trailing 20 observations, `<id>.spread` bid/ask spread.
/// Market aggregates: `agg_ret`, `agg_vol20`, `agg_mom5`, `agg_mom20`, `agg_volz`, `agg_spread`
///   (cross-instrument means), `agg_dispersion` (cross-sectional return stdev), `agg_missing`
///   (fraction of missing stock cells).
/// Other kinds: `fx_ret`, `fx_vol20`, `cmd_ret`, `cmd_vol20`, `sent_score`, `sent_count`,
///   `sent_dispersion`, and `macro.<field>` forward-filled from the latest monthly release.
class FeatureExtractor {
  public:
    explicit FeatureExtractor(Universe universe);

    const std::vector<std::string>& feature_names() const { return names_; }
    const Universe& universe() const { return universe_; }

    /// Consumes one trading day's daily records plus any macro releases up to that day and
    /// returns the feature row (NaN = missing).
    std::vector<double> push_day(Date day, std::span<const Record* const> records);

  private:
    struct Series {
        std::deque<double> closes;  // last 21 observed closes
        std::deque<double> returns; // last 20 observed returns
        std::deque<double> volumes; // last 20 observed volumes
    };

    Universe universe_;
    std::vector<std::string> names_;
    std::map<std::string, Series, std::less<>> series_;
    std::vector<double> macro_;
};

/// Batch feature extraction: one row per date carrying stock records. Uses FeatureExtractor,
/// so streaming and batch paths compute identical rows.
FeatureMatrix extract_features(const RecordSet& records);
FeatureMatrix extract_features(const RecordSet& records, const Universe& universe);

/// Log returns of a price series; element 0 is NaN.
std::vector<double> log_returns(std::span<const double> closes);

/// Ground-truth risk set per feature-matrix row.
std::vector<RiskMask> label_timeline(const RecordSet& records, const std::vector<Date>& timestamps);

/// Supervised windows: inputs are lookback x features slices, labels mark which risk types occur
/// within the following `horizon` rows.
struct SampleSet {
    std::vector<std::string> feature_names;
    std::size_t lookback = 0;
    std::size_t horizon = 0;
    std::vector<Eigen::MatrixXd> inputs;
    std::vector<RiskMask> labels;
    std::vector<Date> anchors;
    std::vector<std::size_t> anchor_rows;

    std::size_t size() const { return inputs.size(); }
    bool empty() const { return inputs.empty(); }
    std::size_t width() const { return feature_names.size(); }
    double label(std::size_t i, RiskType r) const { return labels[i].test(r) ? 1.0 : 0.0; }
    SampleSet slice(std::size_t begin, std::size_t end) const;
    SampleSet subset(std::span<const std::size_t> indices) const;
    void append(const SampleSet& other, std::size_t i);
};

/// One sample per anchor row t in [lookback, rows - horizon): inputs are rows (t - lookback, t],
/// labels cover rows (t, t + horizon]. Count is rows - lookback - horizon.
SampleSet make_samples(const FeatureMatrix& m, const std::vector<RiskMask>& labels, std::size_t lookback,
                       std::size_t horizon);

/// Model-input windows for every row t >= lookback (no labels required).
SampleSet make_inputs(const FeatureMatrix& m, std::size_t lookback);

/// Causal transform applied before modelling: outlier removal with training statistics, forward
/// fill, leading gaps filled with the training median, then z-scoring.
struct FeaturePipeline {
    std::vector<std::string> feature_names;
    OutlierBounds outliers;
    NormalizationParams normalizer;

    static FeaturePipeline fit(const FeatureMatrix& raw, const std::vector<std::string>& features,
                               double z_threshold, RowRange train_rows);

    /// Row-at-a-time form; `last` carries forward-fill state between calls.
    std::vector<double> transform_row(std::span<const double> raw_row, std::vector<double>& last) const;
    FeatureMatrix transform(const FeatureMatrix& raw) const;
};

/// Columns that describe the whole market (aggregates, FX, commodities, sentiment, macro).
std::vector<std::string> market_feature_names(const std::vector<std::string>& names);

void write_feature_matrix(const FeatureMatrix& m, const std::filesystem::path& path);
FeatureMatrix read_feature_matrix(const std::filesystem::path& path);

/// Directory with `meta.json` and `samples.jsonl` (one sample per line).
void save_samples(const SampleSet& s, const std::filesystem::path& dir);
SampleSet load_samples(const std::filesystem::path& dir);

} // namespace riskwatch
