#pragma once
// Independent reference computations used by unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "riskwatch/lstm.hpp"
#include "riskwatch/rng.hpp"
#include "riskwatch/trees.hpp"

namespace oracle {

/// Scalar LSTM step with hidden = input = 1.
struct ScalarStep {
    double forget, input, output, cell, hidden;
};

inline ScalarStep scalar_lstm_step(double w, double b, double x, double h_prev, double c_prev) {
    auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
    const double z = w * h_prev + w * x + b;
    ScalarStep s;
    s.forget = sig(z);
    s.input = sig(z);
    s.output = sig(z);
    const double g = std::tanh(z);
    s.cell = s.forget * c_prev + s.input * g;
    s.hidden = s.output * std::tanh(s.cell);
    return s;
}

/// Max relative error of the analytic gradient against central differences. Entries whose
/// analytic and numeric values are both below `floor` are compared absolutely against it.
inline double lstm_gradient_error(const riskwatch::lstm::LstmParams& params, const Eigen::MatrixXd& seq,
                                  const Eigen::VectorXd& labels, double step = 1e-5, double floor = 1e-9) {
    using namespace riskwatch::lstm;
    const auto fwd = forward(params, seq);
    const LstmParams grad = backward(params, seq, labels, fwd);
    LstmParams probe = params;
    auto probe_buf = probe.buffers();
    const auto grad_buf = grad.buffers();
    double worst = 0.0;
    for (std::size_t t = 0; t < probe_buf.size(); ++t) {
        for (std::size_t i = 0; i < probe_buf[t].size(); ++i) {
            const double saved = probe_buf[t][i];
            probe_buf[t][i] = saved + step;
            const double up = loss(predict(probe, seq), labels);
            probe_buf[t][i] = saved - step;
            const double down = loss(predict(probe, seq), labels);
            probe_buf[t][i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double analytic = grad_buf[t][i];
            const double scale = std::max(std::abs(numeric), std::abs(analytic));
            const double err = scale < floor ? std::abs(numeric - analytic) / floor : std::abs(numeric - analytic) / scale;
            worst = std::max(worst, err);
        }
    }
    return worst;
}

/// Random small LSTM instance with parameters large enough to keep gradients well away from zero.
struct LstmInstance {
    riskwatch::lstm::LstmParams params;
    Eigen::MatrixXd sequence;
    Eigen::VectorXd labels;
};

inline LstmInstance random_lstm_instance(std::size_t hidden, std::size_t input, std::size_t length,
                                         std::uint64_t seed) {
    riskwatch::Rng rng(seed);
    LstmInstance inst{riskwatch::lstm::LstmParams::zeros(hidden, input), {}, {}};
    for (auto buf : inst.params.buffers())
        for (auto& v : buf) v = rng.uniform(-0.8, 0.8);
    inst.sequence.resize(Eigen::Index(length), Eigen::Index(input));
    for (Eigen::Index r = 0; r < inst.sequence.rows(); ++r)
        for (Eigen::Index c = 0; c < inst.sequence.cols(); ++c) inst.sequence(r, c) = rng.normal();
    inst.labels.resize(Eigen::Index(riskwatch::kRiskTypeCount));
    for (Eigen::Index k = 0; k < inst.labels.size(); ++k) inst.labels(k) = rng.bernoulli(0.5) ? 1.0 : 0.0;
    return inst;
}

/// Mann-Whitney concordance: fraction of positive/negative pairs ordered correctly, ties 1/2.
inline double concordance_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    double concordant = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            pairs += 1.0;
            if (scores[i] > scores[j]) concordant += 1.0;
            else if (scores[i] == scores[j]) concordant += 0.5;
        }
    }
    return concordant / pairs;
}

/// Exhaustive root split search: every feature, every midpoint between distinct values, gain
/// recomputed from scratch. Ties keep the first candidate in (feature, threshold) order.
struct EnumeratedSplit {
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
};

inline double impurity_sum(const std::vector<double>& y, riskwatch::trees::Criterion c) {
    if (y.empty()) return 0.0;
    double mean = 0.0;
    for (double v : y) mean += v / double(y.size());
    if (c == riskwatch::trees::Criterion::gini) {
        double pos = 0.0;
        for (double v : y) pos += v;
        const double p = pos / double(y.size());
        return double(y.size()) * (1.0 - p * p - (1.0 - p) * (1.0 - p));
    }
    double ss = 0.0;
    for (double v : y) ss += (v - mean) * (v - mean);
    return ss;
}

inline EnumeratedSplit enumerate_root_split(const riskwatch::trees::Dataset& data, const std::vector<double>& y,
                                            riskwatch::trees::Criterion c, std::size_t min_leaf) {
    EnumeratedSplit best;
    const double parent = impurity_sum(y, c);
    for (std::size_t f = 0; f < data.cols(); ++f) {
        std::vector<double> values;
        for (std::size_t r = 0; r < data.rows(); ++r) values.push_back(data.x(Eigen::Index(r), Eigen::Index(f)));
        std::sort(values.begin(), values.end());
        values.erase(std::unique(values.begin(), values.end()), values.end());
        for (std::size_t k = 0; k + 1 < values.size(); ++k) {
            const double thr = 0.5 * (values[k] + values[k + 1]);
            std::vector<double> left, right;
            for (std::size_t r = 0; r < data.rows(); ++r)
                (data.x(Eigen::Index(r), Eigen::Index(f)) <= thr ? left : right).push_back(y[r]);
            if (left.size() < min_leaf || right.size() < min_leaf) continue;
            const double gain = parent - impurity_sum(left, c) - impurity_sum(right, c);
            if (gain > best.gain + 1e-12) best = {int(f), thr, gain};
        }
    }
    return best;
}

/// Walks a tree checking depth and leaf-size limits; returns false on the first violation.
inline bool tree_respects_limits(const riskwatch::trees::Tree& t, std::size_t max_depth, std::size_t min_leaf) {
    for (const auto& n : t.nodes) {
        if (n.depth > max_depth) return false;
        if (n.is_leaf()) {
            if (n.samples < min_leaf || !std::isfinite(n.value)) return false;
        } else if (!std::isfinite(n.threshold) || n.left < 0 || n.right < 0) {
            return false;
        }
    }
    return true;
}

/// Realized cost of alerting on every sample whose posterior is at least `threshold`.
inline double alert_cost(const std::vector<double>& posteriors, const std::vector<int>& labels, double threshold,
                         double cost_fp, double cost_fn) {
    double cost = 0.0;
    for (std::size_t i = 0; i < posteriors.size(); ++i) {
        const bool alert = posteriors[i] >= threshold;
        if (alert && labels[i] == 0) cost += cost_fp;
        if (!alert && labels[i] == 1) cost += cost_fn;
    }
    return cost;
}

/// Positive rate per equal-width score bucket; NaN for empty buckets.
inline std::vector<double> bucket_positive_rate(const std::vector<double>& scores, const std::vector<int>& labels,
                                                std::size_t buckets) {
    std::vector<double> pos(buckets, 0.0), all(buckets, 0.0);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        std::size_t b = 0;
        while (b + 1 < buckets && scores[i] >= double(b + 1) / double(buckets)) ++b;
        all[b] += 1.0;
        pos[b] += labels[i];
    }
    std::vector<double> rate(buckets);
    for (std::size_t b = 0; b < buckets; ++b)
        rate[b] = all[b] > 0 ? pos[b] / all[b] : std::numeric_limits<double>::quiet_NaN();
    return rate;
}

/// Noisy scores in [0, 1] whose positive rate rises with the score.
struct CalibrationSet {
    std::vector<double> scores;
    std::vector<int> labels;
};

inline CalibrationSet random_calibration_set(std::size_t n, std::uint64_t seed) {
    riskwatch::Rng rng(seed);
    CalibrationSet c;
    const double base = rng.uniform(0.05, 0.4);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = rng.bernoulli(base);
        const double s = std::clamp((y ? 0.65 : 0.35) + 0.2 * rng.normal(), 0.0, 1.0);
        c.scores.push_back(s);
        c.labels.push_back(y);
    }
    return c;
}

} // namespace oracle
