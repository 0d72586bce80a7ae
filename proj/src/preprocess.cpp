#include "riskwatch/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

namespace riskwatch {

using nlohmann::json;

namespace {

constexpr double kMadConsistency = 1.4826;
constexpr double kMeanAdConsistency = 1.2533;

double median_of(std::vector<double> v) {
    const auto mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double hi = v[mid];
    if (v.size() % 2 == 1) return hi;
    const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lo + hi);
}

double mean_of(const std::deque<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample standard deviation; NaN below two observations.
template <class C> double sample_std(const C& v) {
    if (v.size() < 2) return kMissing;
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

/// Mean of the finite entries; NaN when there are none.
double finite_mean(std::span<const double> v) {
    double s = 0.0;
    std::size_t n = 0;
    for (double x : v)
        if (std::isfinite(x)) {
            s += x;
            ++n;
        }
    return n ? s / static_cast<double>(n) : kMissing;
}

template <class C> void push_bounded(C& q, double v, std::size_t cap) {
    q.push_back(v);
    while (q.size() > cap) q.pop_front();
}

} // namespace

// ---------------------------------------------------------------------------
// FeatureMatrix

int FeatureMatrix::column(std::string_view name) const {
    auto it = std::find(feature_names.begin(), feature_names.end(), name);
    return it == feature_names.end() ? -1 : static_cast<int>(it - feature_names.begin());
}

FeatureMatrix FeatureMatrix::empty(std::vector<Date> timestamps, std::vector<std::string> names) {
    FeatureMatrix m;
    m.timestamps = std::move(timestamps);
    m.feature_names = std::move(names);
    const auto r = Eigen::Index(m.rows()), c = Eigen::Index(m.cols());
    m.values = Eigen::MatrixXd::Constant(r, c, kMissing);
    m.missing = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(r, c, true);
    return m;
}

FeatureMatrix FeatureMatrix::select(const std::vector<std::string>& names) const {
    FeatureMatrix out = empty(timestamps, names);
    for (std::size_t j = 0; j < names.size(); ++j) {
        const int src = column(names[j]);
        if (src < 0) throw ValidationError("unknown feature '" + names[j] + "'");
        out.values.col(Eigen::Index(j)) = values.col(src);
        out.missing.col(Eigen::Index(j)) = missing.col(src);
    }
    return out;
}

void FeatureMatrix::validate() const {
    if (std::size_t(values.rows()) != rows() || std::size_t(values.cols()) != cols() ||
        missing.rows() != values.rows() || missing.cols() != values.cols())
        throw ValidationError("feature matrix shape does not match timestamps/feature names");
    for (std::size_t r = 1; r < rows(); ++r)
        if (!(timestamps[r - 1] < timestamps[r])) throw ValidationError("timestamps must be strictly increasing");
    for (Eigen::Index r = 0; r < values.rows(); ++r)
        for (Eigen::Index c = 0; c < values.cols(); ++c)
            if (!missing(r, c) && !std::isfinite(values(r, c)))
                throw ValidationError("non-finite observed value in feature '" + feature_names[std::size_t(c)] + "'");
}

// ---------------------------------------------------------------------------
// Cleaning and normalization

OutlierBounds fit_outlier_bounds(const FeatureMatrix& m, double z_threshold, RowRange rows) {
    if (!(z_threshold > 0.0)) throw ValidationError("z_threshold must be positive");
    if (rows.end > m.rows() || rows.begin > rows.end) throw ValidationError("row range outside matrix");
    OutlierBounds b;
    b.z_threshold = z_threshold;
    b.median.assign(m.cols(), 0.0);
    b.scale.assign(m.cols(), 0.0);
    std::vector<double> obs, dev;
    for (std::size_t c = 0; c < m.cols(); ++c) {
        obs.clear();
        for (std::size_t r = rows.begin; r < rows.end; ++r)
            if (!m.is_missing(r, c)) obs.push_back(m.values(Eigen::Index(r), Eigen::Index(c)));
        if (obs.empty()) continue;
        const double med = median_of(obs);
        dev.resize(obs.size());
        std::transform(obs.begin(), obs.end(), dev.begin(), [&](double x) { return std::abs(x - med); });
        double scale = kMadConsistency * median_of(dev);
        if (scale == 0.0)
            scale = kMeanAdConsistency * std::accumulate(dev.begin(), dev.end(), 0.0) / double(dev.size());
        b.median[c] = med;
        b.scale[c] = scale;
    }
    return b;
}

FeatureMatrix apply_outlier_bounds(const FeatureMatrix& m, const OutlierBounds& bounds) {
    if (bounds.median.size() != m.cols()) throw ValidationError("outlier bounds width mismatch");
    FeatureMatrix out = m;
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c)
            if (!m.is_missing(r, c) && bounds.is_outlier(c, m.values(Eigen::Index(r), Eigen::Index(c)))) {
                out.missing(Eigen::Index(r), Eigen::Index(c)) = true;
                out.values(Eigen::Index(r), Eigen::Index(c)) = kMissing;
            }
    return out;
}

FeatureMatrix clean_outliers(const FeatureMatrix& m, double z_threshold) {
    return apply_outlier_bounds(m, fit_outlier_bounds(m, z_threshold, {0, m.rows()}));
}

FeatureMatrix fill_missing(const FeatureMatrix& m) {
    FeatureMatrix out = m;
    for (std::size_t c = 0; c < m.cols(); ++c) {
        const auto col = Eigen::Index(c);
        std::optional<std::size_t> first;
        for (std::size_t r = 0; r < m.rows(); ++r)
            if (!m.is_missing(r, c)) {
                first = r;
                break;
            }
        if (!first) throw ValidationError("feature '" + m.feature_names[c] + "' has no observed values");
        const double lead = m.values(Eigen::Index(*first), col);
        for (std::size_t r = 0; r < *first; ++r) out.values(Eigen::Index(r), col) = lead;
        double last = lead;
        for (std::size_t r = *first; r < m.rows(); ++r) {
            if (m.is_missing(r, c))
                out.values(Eigen::Index(r), col) = last;
            else
                last = m.values(Eigen::Index(r), col);
        }
    }
    out.missing.setConstant(false);
    return out;
}

NormalizationParams fit_normalizer(const FeatureMatrix& m, RowRange train_rows) {
    if (train_rows.size() == 0 || train_rows.end > m.rows())
        throw ValidationError("fit_normalizer: empty or out-of-range training rows");
    NormalizationParams p;
    p.feature_names = m.feature_names;
    const auto block = m.values.middleRows(Eigen::Index(train_rows.begin), Eigen::Index(train_rows.size()));
    for (std::size_t c = 0; c < m.cols(); ++c) {
        const auto col = block.col(Eigen::Index(c));
        if (!col.allFinite())
            throw ValidationError("fit_normalizer: feature '" + m.feature_names[c] + "' has missing training values");
        const double mean = col.mean();
        const double var = (col.array() - mean).square().mean();
        const double sd = std::sqrt(var);
        p.mean.push_back(mean);
        p.stddev.push_back(sd);
        p.constant.push_back(sd == 0.0);
    }
    return p;
}

FeatureMatrix apply_normalizer(const FeatureMatrix& m, const NormalizationParams& p) {
    if (p.mean.size() != m.cols()) throw ValidationError("normalizer width mismatch");
    FeatureMatrix out = m;
    for (std::size_t c = 0; c < m.cols(); ++c) {
        auto col = out.values.col(Eigen::Index(c));
        if (p.constant[c])
            col.setZero();
        else
            col = (col.array() - p.mean[c]) / p.stddev[c];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Feature extraction

Universe Universe::of(const RecordSet& records) {
    std::set<std::string> s, f, c;
    Universe u;
    u.sentiment = u.macro = false;
    for (const auto& r : records) {
        switch (r.kind) {
        case RecordKind::stock: s.insert(r.instrument); break;
        case RecordKind::forex: f.insert(r.instrument); break;
        case RecordKind::commodity: c.insert(r.instrument); break;
        case RecordKind::macro: u.macro = true; break;
        case RecordKind::sentiment: u.sentiment = true; break;
        }
    }
    u.stocks.assign(s.begin(), s.end());
    u.forex.assign(f.begin(), f.end());
    u.commodities.assign(c.begin(), c.end());
    return u;
}

namespace {
constexpr const char* kStockFeatures[] = {"ret", "vol20", "mom5", "mom20", "volz", "spread"};
}

FeatureExtractor::FeatureExtractor(Universe universe) : universe_(std::move(universe)) {
    if (universe_.stocks.empty()) throw ValidationError("feature extraction needs at least one stock instrument");
    for (const auto& s : universe_.stocks)
        for (auto f : kStockFeatures) names_.push_back(s + "." + f);
    for (auto f : {"agg_ret", "agg_vol20", "agg_mom5", "agg_mom20", "agg_volz", "agg_spread", "agg_dispersion",
                   "agg_missing"})
        names_.emplace_back(f);
    if (!universe_.forex.empty()) {
        names_.emplace_back("fx_ret");
        names_.emplace_back("fx_vol20");
    }
    if (!universe_.commodities.empty()) {
        names_.emplace_back("cmd_ret");
        names_.emplace_back("cmd_vol20");
    }
    if (universe_.sentiment)
        for (auto f : {"sent_score", "sent_count", "sent_dispersion"}) names_.emplace_back(f);
    if (universe_.macro) {
        for (auto f : kind_fields(RecordKind::macro)) names_.push_back("macro." + std::string(f));
        macro_.assign(kind_fields(RecordKind::macro).size(), kMissing);
    }
}

std::vector<double> FeatureExtractor::push_day(Date day, std::span<const Record* const> records) {
    std::vector<double> row;
    row.reserve(names_.size());
    const int close_i = field_index(RecordKind::stock, "close");
    const int volume_i = field_index(RecordKind::stock, "volume");
    const int spread_i = field_index(RecordKind::stock, "bid_ask_spread");

    std::map<std::string_view, const Record*> by_instrument;
    std::vector<const Record*> sentiment;
    for (const Record* r : records) {
        if (r->kind == RecordKind::macro) {
            if (r->timestamp > day) throw ValidationError("macro release after the day being processed");
            for (std::size_t f = 0; f < r->values.size() && f < macro_.size(); ++f)
                if (!r->missing(f)) macro_[f] = r->values[f];
        } else if (r->kind == RecordKind::sentiment) {
            sentiment.push_back(r);
        } else {
            by_instrument[r->instrument] = r;
        }
    }

    // Updates a series with today's close/volume and returns (ret, vol20, mom5, mom20, volz).
    auto step = [&](const std::string& id, double close, double volume) {
        Series& s = series_[id];
        double ret = kMissing;
        if (std::isfinite(close) && close > 0.0) {
            if (!s.closes.empty()) {
                ret = std::log(close / s.closes.back());
                push_bounded(s.returns, ret, kLongestWindow);
            }
            push_bounded(s.closes, close, kLongestWindow + 1);
        }
        auto momentum = [&](std::size_t k) {
            if (!std::isfinite(close) || s.closes.size() < 2) return kMissing;
            const std::size_t back = std::min(k, s.closes.size() - 1);
            return std::log(s.closes.back() / s.closes[s.closes.size() - 1 - back]);
        };
        const double vol20 = std::isfinite(close) ? sample_std(s.returns) : kMissing;
        double volz = kMissing;
        if (std::isfinite(volume)) {
            push_bounded(s.volumes, volume, kLongestWindow);
            if (s.volumes.size() >= 2) {
                const double sd = sample_std(s.volumes);
                volz = sd > 0.0 ? (volume - mean_of(s.volumes)) / sd : 0.0;
            }
        }
        return std::array<double, 5>{ret, vol20, momentum(5), momentum(20), volz};
    };

    std::array<std::vector<double>, 6> per_feature;
    std::size_t missing_cells = 0;
    const std::size_t stock_fields = kind_fields(RecordKind::stock).size();
    for (const auto& id : universe_.stocks) {
        auto it = by_instrument.find(id);
        const Record* r = it == by_instrument.end() ? nullptr : it->second;
        double close = kMissing, volume = kMissing, spread = kMissing;
        if (r) {
            close = r->values[std::size_t(close_i)];
            volume = r->values[std::size_t(volume_i)];
            spread = r->values[std::size_t(spread_i)];
            for (double v : r->values) missing_cells += std::isnan(v) ? 1 : 0;
        } else {
            missing_cells += stock_fields;
        }
        const auto f = step(id, close, volume);
        for (std::size_t k = 0; k < 5; ++k) {
            row.push_back(f[k]);
            per_feature[k].push_back(f[k]);
        }
        row.push_back(spread);
        per_feature[5].push_back(spread);
    }
    for (const auto& col : per_feature) row.push_back(finite_mean(col));
    {
        std::vector<double> rets;
        for (double x : per_feature[0])
            if (std::isfinite(x)) rets.push_back(x);
        row.push_back(sample_std(rets));
    }
    row.push_back(static_cast<double>(missing_cells) /
                  static_cast<double>(stock_fields * universe_.stocks.size()));

    auto group = [&](const std::vector<std::string>& ids) {
        if (ids.empty()) return;
        std::vector<double> rets, vols;
        for (const auto& id : ids) {
            auto it = by_instrument.find(id);
            const Record* r = it == by_instrument.end() ? nullptr : it->second;
            const double close = r ? r->get("close") : kMissing;
            const double volume = r ? r->get("volume") : kMissing;
            const auto f = step(id, close, volume);
            rets.push_back(f[0]);
            vols.push_back(f[1]);
        }
        row.push_back(finite_mean(rets));
        row.push_back(finite_mean(vols));
    };
    group(universe_.forex);
    group(universe_.commodities);

    if (universe_.sentiment) {
        for (std::size_t f = 0; f < 3; ++f) {
            std::vector<double> v;
            for (const Record* r : sentiment) v.push_back(r->values[f]);
            row.push_back(finite_mean(v));
        }
    }
    if (universe_.macro) row.insert(row.end(), macro_.begin(), macro_.end());
    return row;
}

FeatureMatrix extract_features(const RecordSet& records) { return extract_features(records, Universe::of(records)); }

FeatureMatrix extract_features(const RecordSet& records, const Universe& universe) {
    std::vector<const Record*> sorted;
    sorted.reserve(records.size());
    for (const auto& r : records) sorted.push_back(&r);
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const Record* a, const Record* b) { return a->timestamp < b->timestamp; });

    std::set<Date> grid_set;
    for (const Record* r : sorted)
        if (r->kind == RecordKind::stock) grid_set.insert(r->timestamp);
    std::vector<Date> grid(grid_set.begin(), grid_set.end());
    if (grid.size() < kLongestWindow)
        throw ValidationError("extract_features: " + std::to_string(grid.size()) +
                              " rows is fewer than the longest rolling window (" + std::to_string(kLongestWindow) +
                              ")");

    FeatureExtractor fx(universe);
    FeatureMatrix m = FeatureMatrix::empty(grid, fx.feature_names());
    std::size_t cursor = 0;
    std::vector<const Record*> day_records;
    for (std::size_t d = 0; d < grid.size(); ++d) {
        day_records.clear();
        // Macro releases dated on non-trading days are consumed by the next trading day.
        while (cursor < sorted.size() && sorted[cursor]->timestamp <= grid[d]) {
            const Record* r = sorted[cursor++];
            if (r->kind == RecordKind::macro || r->timestamp == grid[d]) day_records.push_back(r);
        }
        const auto row = fx.push_day(grid[d], day_records);
        for (std::size_t c = 0; c < row.size(); ++c) {
            const bool miss = !std::isfinite(row[c]);
            m.values(Eigen::Index(d), Eigen::Index(c)) = miss ? kMissing : row[c];
            m.missing(Eigen::Index(d), Eigen::Index(c)) = miss;
        }
    }
    return m;
}

std::vector<double> log_returns(std::span<const double> closes) {
    std::vector<double> out(closes.size(), kMissing);
    for (std::size_t i = 1; i < closes.size(); ++i) out[i] = std::log(closes[i] / closes[i - 1]);
    return out;
}

std::vector<RiskMask> label_timeline(const RecordSet& records, const std::vector<Date>& timestamps) {
    std::vector<RiskMask> out(timestamps.size());
    for (const auto& r : records) {
        if (r.labels.empty()) continue;
        auto it = std::lower_bound(timestamps.begin(), timestamps.end(), r.timestamp);
        if (it != timestamps.end() && *it == r.timestamp) {
            auto& slot = out[std::size_t(it - timestamps.begin())];
            slot = slot | r.labels;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Samples

SampleSet SampleSet::slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > size()) throw ValidationError("sample slice out of range");
    SampleSet out;
    out.feature_names = feature_names;
    out.lookback = lookback;
    out.horizon = horizon;
    for (std::size_t i = begin; i < end; ++i) out.append(*this, i);
    return out;
}

SampleSet SampleSet::subset(std::span<const std::size_t> indices) const {
    SampleSet out;
    out.feature_names = feature_names;
    out.lookback = lookback;
    out.horizon = horizon;
    for (auto i : indices) out.append(*this, i);
    return out;
}

void SampleSet::append(const SampleSet& other, std::size_t i) {
    inputs.push_back(other.inputs[i]);
    labels.push_back(other.labels.empty() ? RiskMask{} : other.labels[i]);
    anchors.push_back(other.anchors[i]);
    anchor_rows.push_back(other.anchor_rows[i]);
}

namespace {
SampleSet windows(const FeatureMatrix& m, std::size_t lookback, std::size_t first, std::size_t last) {
    SampleSet s;
    s.feature_names = m.feature_names;
    s.lookback = lookback;
    for (std::size_t t = first; t < last; ++t) {
        const auto start = Eigen::Index(t + 1 - lookback);
        s.inputs.push_back(m.values.middleRows(start, Eigen::Index(lookback)));
        s.anchors.push_back(m.timestamps[t]);
        s.anchor_rows.push_back(t);
    }
    return s;
}
} // namespace

SampleSet make_samples(const FeatureMatrix& m, const std::vector<RiskMask>& labels, std::size_t lookback,
                       std::size_t horizon) {
    if (lookback < 1 || horizon < 1) throw ValidationError("make_samples: lookback and horizon must be >= 1");
    if (labels.size() != m.rows()) throw ValidationError("make_samples: label timeline length mismatch");
    if (m.rows() < lookback + horizon + 1)
        throw ValidationError("make_samples: " + std::to_string(m.rows()) + " rows cannot hold one sample");
    SampleSet s = windows(m, lookback, lookback, m.rows() - horizon);
    s.horizon = horizon;
    for (auto t : s.anchor_rows) {
        RiskMask y;
        for (std::size_t k = t + 1; k <= t + horizon; ++k) y = y | labels[k];
        s.labels.push_back(y);
    }
    return s;
}

SampleSet make_inputs(const FeatureMatrix& m, std::size_t lookback) {
    if (lookback < 1) throw ValidationError("make_inputs: lookback must be >= 1");
    if (m.rows() <= lookback) return windows(m, lookback, 0, 0);
    SampleSet s = windows(m, lookback, lookback, m.rows());
    s.labels.assign(s.size(), RiskMask{});
    return s;
}

// ---------------------------------------------------------------------------
// Modelling pipeline

FeaturePipeline FeaturePipeline::fit(const FeatureMatrix& raw, const std::vector<std::string>& features,
                                     double z_threshold, RowRange train_rows) {
    FeaturePipeline p;
    p.feature_names = features;
    const FeatureMatrix sel = raw.select(features);
    p.outliers = fit_outlier_bounds(sel, z_threshold, train_rows);
    // Fit moments on the causally filled training rows, with the normalizer disabled.
    p.normalizer.feature_names = features;
    p.normalizer.mean.assign(features.size(), 0.0);
    p.normalizer.stddev.assign(features.size(), 1.0);
    p.normalizer.constant.assign(features.size(), false);
    const FeatureMatrix filled = p.transform(raw);
    p.normalizer = fit_normalizer(filled, train_rows);
    return p;
}

std::vector<double> FeaturePipeline::transform_row(std::span<const double> raw_row, std::vector<double>& last) const {
    const std::size_t w = feature_names.size();
    if (raw_row.size() != w) throw ValidationError("feature row width mismatch");
    if (last.size() != w) last.assign(w, kMissing);
    std::vector<double> out(w);
    for (std::size_t c = 0; c < w; ++c) {
        double v = raw_row[c];
        if (std::isfinite(v) && outliers.is_outlier(c, v)) v = kMissing;
        if (std::isfinite(v))
            last[c] = v;
        else
            v = std::isfinite(last[c]) ? last[c] : outliers.median[c];
        out[c] = normalizer.constant[c] ? 0.0 : (v - normalizer.mean[c]) / normalizer.stddev[c];
    }
    return out;
}

FeatureMatrix FeaturePipeline::transform(const FeatureMatrix& raw) const {
    const FeatureMatrix sel = raw.select(feature_names);
    FeatureMatrix out = FeatureMatrix::empty(sel.timestamps, feature_names);
    std::vector<double> last;
    std::vector<double> row(sel.cols());
    for (std::size_t r = 0; r < sel.rows(); ++r) {
        for (std::size_t c = 0; c < sel.cols(); ++c)
            row[c] = sel.is_missing(r, c) ? kMissing : sel.values(Eigen::Index(r), Eigen::Index(c));
        const auto t = transform_row(row, last);
        for (std::size_t c = 0; c < t.size(); ++c) out.values(Eigen::Index(r), Eigen::Index(c)) = t[c];
    }
    out.missing.setConstant(false);
    return out;
}

std::vector<std::string> market_feature_names(const std::vector<std::string>& names) {
    std::vector<std::string> out;
    for (const auto& n : names)
        if (n.find('.') == std::string::npos || n.starts_with("macro.")) out.push_back(n);
    return out;
}

// ---------------------------------------------------------------------------
// Persistence

void write_feature_matrix(const FeatureMatrix& m, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "timestamp";
    for (const auto& n : m.feature_names) out << ',' << n;
    out << '\n';
    for (std::size_t r = 0; r < m.rows(); ++r) {
        out << m.timestamps[r].iso();
        for (std::size_t c = 0; c < m.cols(); ++c) {
            out << ',';
            if (!m.is_missing(r, c)) out << format_double(m.values(Eigen::Index(r), Eigen::Index(c)));
        }
        out << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

FeatureMatrix read_feature_matrix(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ParseError("missing header", 1);
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) header.push_back(cell);
    }
    if (header.empty() || header[0] != "timestamp") throw ParseError("header must start with timestamp", 1);
    std::vector<std::string> names(header.begin() + 1, header.end());
    std::vector<Date> ts;
    std::vector<std::vector<double>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string_view> cells;
        std::string_view rest = line;
        while (true) {
            auto comma = rest.find(',');
            cells.push_back(rest.substr(0, comma));
            if (comma == std::string_view::npos) break;
            rest.remove_prefix(comma + 1);
        }
        if (cells.size() != header.size()) throw ParseError("cell count mismatch", line_no);
        try {
            ts.push_back(Date::parse(cells[0]));
        } catch (const ParseError& e) {
            throw ParseError(e.what(), line_no);
        }
        std::vector<double> row;
        for (std::size_t c = 1; c < cells.size(); ++c) {
            if (cells[c].empty()) {
                row.push_back(kMissing);
                continue;
            }
            auto v = parse_double(cells[c]);
            if (!v) throw ParseError("non-numeric cell in column '" + names[c - 1] + "'", line_no);
            row.push_back(*v);
        }
        rows.push_back(std::move(row));
    }
    FeatureMatrix m = FeatureMatrix::empty(ts, names);
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < names.size(); ++c) {
            const double v = rows[r][c];
            m.values(Eigen::Index(r), Eigen::Index(c)) = v;
            m.missing(Eigen::Index(r), Eigen::Index(c)) = std::isnan(v);
        }
    m.validate();
    return m;
}

void save_samples(const SampleSet& s, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        json meta{{"format", "riskwatch.samples"}, {"version", 1},         {"feature_names", s.feature_names},
                  {"lookback", s.lookback},        {"horizon", s.horizon}, {"count", s.size()}};
        std::ofstream out(dir / "meta.json");
        out << meta.dump(2) << '\n';
        if (!out) throw IoError("cannot write " + (dir / "meta.json").string());
    }
    std::ofstream out(dir / "samples.jsonl");
    if (!out) throw IoError("cannot write " + (dir / "samples.jsonl").string());
    for (std::size_t i = 0; i < s.size(); ++i) {
        json rows = json::array();
        for (Eigen::Index r = 0; r < s.inputs[i].rows(); ++r) {
            json row = json::array();
            for (Eigen::Index c = 0; c < s.inputs[i].cols(); ++c) row.push_back(s.inputs[i](r, c));
            rows.push_back(std::move(row));
        }
        json labels = json::array();
        for (auto r : kAllRiskTypes) labels.push_back(s.labels[i].test(r) ? 1 : 0);
        json line{{"anchor", s.anchors[i].iso()}, {"anchor_row", s.anchor_rows[i]}, {"labels", labels},
                  {"input", rows}};
        out << line.dump() << '\n';
    }
    if (!out) throw IoError("write failed in " + dir.string());
}

SampleSet load_samples(const std::filesystem::path& dir) {
    std::ifstream meta_in(dir / "meta.json");
    if (!meta_in) throw IoError("cannot open " + (dir / "meta.json").string());
    json meta;
    try {
        meta = json::parse(meta_in);
    } catch (const json::exception& e) {
        throw ParseError(std::string("meta.json: ") + e.what());
    }
    SampleSet s;
    s.feature_names = meta.at("feature_names").get<std::vector<std::string>>();
    s.lookback = meta.at("lookback").get<std::size_t>();
    s.horizon = meta.at("horizon").get<std::size_t>();
    std::ifstream in(dir / "samples.jsonl");
    if (!in) throw IoError("cannot open " + (dir / "samples.jsonl").string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            const auto& rows = j.at("input");
            Eigen::MatrixXd x(Eigen::Index(rows.size()), Eigen::Index(s.width()));
            for (std::size_t r = 0; r < rows.size(); ++r) {
                if (rows[r].size() != s.width()) throw ParseError("input width mismatch", line_no);
                for (std::size_t c = 0; c < s.width(); ++c) x(Eigen::Index(r), Eigen::Index(c)) = rows[r][c].get<double>();
            }
            RiskMask y;
            const auto& labels = j.at("labels");
            for (auto r : kAllRiskTypes)
                if (labels.at(index(r)).get<int>() != 0) y.set(r);
            s.inputs.push_back(std::move(x));
            s.labels.push_back(y);
            s.anchors.push_back(Date::parse(j.at("anchor").get<std::string>()));
            s.anchor_rows.push_back(j.at("anchor_row").get<std::size_t>());
        } catch (const json::exception& e) {
            throw ParseError(e.what(), line_no);
        }
    }
    return s;
}

} // namespace riskwatch
