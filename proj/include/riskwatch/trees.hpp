#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "riskwatch/preprocess.hpp"
#include "riskwatch/rng.hpp"

namespace riskwatch::trees {

enum class EnsembleKind { random_forest, gradient_boosting };

struct TreeParams {
    std::size_t n_trees = 500;
    std::size_t max_depth = 10;
    std::size_t min_leaf_samples = 5;
    std::optional<double> learning_rate;
    /// Fraction of features considered per split; nullopt means ceil(sqrt(p)) for random forests
    /// and all features for boosting.
    std::optional<double> feature_subsample;
    std::uint64_t seed = 11;
    /// Worker threads for random-forest training; results do not depend on it.
    std::size_t threads = 1;

    static TreeParams random_forest() { return {}; }
    static TreeParams gradient_boosting() { return {200, 6, 10, 0.1, std::nullopt, 13, 1}; }
    void validate(EnsembleKind kind) const;
};

/// Flat tree; node 0 is the root. A node with feature < 0 is a leaf.
struct Tree {
    struct Node {
        int feature = -1;
        double threshold = 0.0;
        std::int32_t left = -1;
        std::int32_t right = -1;
        double value = 0.0;
        std::uint32_t samples = 0;
        std::uint32_t depth = 0;

        bool is_leaf() const { return feature < 0; }
    };
    std::vector<Node> nodes;

    double predict(std::span<const double> x) const;
    /// Index of the leaf reached by `x`.
    std::size_t leaf_of(std::span<const double> x) const;
    std::size_t depth() const;
};

enum class Criterion { gini, variance };

/// Row-major feature table.
struct Dataset {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> x;
    std::size_t rows() const { return std::size_t(x.rows()); }
    std::size_t cols() const { return std::size_t(x.cols()); }
    std::span<const double> row(std::size_t i) const { return {x.data() + i * cols(), cols()}; }
};

struct BuildOptions {
    Criterion criterion = Criterion::gini;
    std::size_t max_depth = 10;
    std::size_t min_leaf_samples = 1;
    /// Features drawn (without replacement) per split; 0 or >= p means all.
    std::size_t features_per_split = 0;
};

struct SplitChoice {
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
};

/// Impurity decrease (weighted by row counts) of the best admissible split over `rows`,
/// scanning features in ascending order and thresholds (midpoints between consecutive distinct
/// values) in ascending order; only strictly larger gains replace the incumbent.
SplitChoice best_split(const Dataset& data, std::span<const double> targets, std::span<const std::size_t> rows,
                       std::span<const std::size_t> features, Criterion criterion, std::size_t min_leaf);

/// Row indices sorted by each feature; repeated tree builds on one dataset share it.
struct ColumnOrder {
    std::vector<std::vector<std::uint32_t>> by_feature;
    static ColumnOrder of(const Dataset& data);
};

/// Greedy CART. Leaves hold the mean target (the positive fraction for 0/1 classification
/// targets), or sum(target) / sum(hessian) when `hessians` is given.
Tree build_tree(const Dataset& data, std::span<const double> targets, std::span<const std::size_t> rows,
                const BuildOptions& opts, Rng& rng, std::span<const double> hessians = {},
                const ColumnOrder* order = nullptr);
Tree build_tree(const Dataset& data, std::span<const double> targets, const BuildOptions& opts, Rng& rng);

struct TreeEnsemble {
    EnsembleKind kind = EnsembleKind::random_forest;
    std::vector<Tree> trees;
    double base_score = 0.0;
    TreeParams params;
    std::size_t width = 0;

    /// Random forest: mean leaf fraction. Boosting: sigmoid(base + lr * sum of tree outputs).
    double predict(std::span<const double> x) const;
};

TreeEnsemble rf_train(const Dataset& data, std::span<const double> labels, const TreeParams& params);

struct BoostingTrace {
    /// Mean logistic loss on the training rows; entry 0 is before the first tree.
    std::vector<double> loss;
};

inline constexpr double kProbabilityClamp = 1e-6;

TreeEnsemble gbt_train(const Dataset& data, std::span<const double> labels, const TreeParams& params,
                       BoostingTrace* trace = nullptr);

/// Fixed-width tabular view of a sample window: the last row, the window mean and the window
/// standard deviation of each feature.
Dataset tabularize(const SampleSet& samples);
std::vector<double> tabular_row(const Eigen::MatrixXd& window);
std::vector<double> labels_of(const SampleSet& samples, RiskType r);

/// Writes every tree as pre-order node records.
nlohmann::json to_json(const TreeEnsemble& e);
TreeEnsemble ensemble_from_json(const nlohmann::json& j);

/// One ensemble per risk type (absent when not trained).
struct RiskEnsembles {
    std::array<std::optional<TreeEnsemble>, kRiskTypeCount> per_risk;
};

void save_ensembles(const RiskEnsembles& e, const std::filesystem::path& path);
RiskEnsembles load_ensembles(const std::filesystem::path& path);

} // namespace riskwatch::trees
