#include "riskwatch/trees.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <thread>

namespace riskwatch::trees {

using nlohmann::json;

namespace {

constexpr double kGainEpsilon = 1e-12;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double logistic_loss(double p, double y) {
    p = std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
    return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

/// Weighted impurity n * I for a node with `n` rows, target sum `s` and sum of squares `ss`.
double weighted_impurity(Criterion c, double n, double s, double ss) {
    if (n <= 0) return 0.0;
    if (c == Criterion::gini) {
        const double p = s / n;
        return n * 2.0 * p * (1.0 - p);
    }
    return std::max(0.0, ss - s * s / n);
}

struct Entry {
    double value;
    std::uint32_t row;
};

/// Scans entries sorted by value for the best admissible threshold of one feature.
void scan_feature(std::span<const Entry> sorted, std::span<const double> targets, int feature, Criterion c,
                  std::size_t min_leaf, double parent, double total, double total_sq, SplitChoice& best) {
    const std::size_t n = sorted.size();
    double ls = 0.0, lss = 0.0;
    for (std::size_t k = 0; k + 1 < n; ++k) {
        const double t = targets[sorted[k].row];
        ls += t;
        lss += t * t;
        const std::size_t nl = k + 1, nr = n - nl;
        if (nl < min_leaf) continue;
        if (nr < min_leaf) break;
        if (sorted[k].value == sorted[k + 1].value) continue;
        const double gain = parent - weighted_impurity(c, double(nl), ls, lss) -
                            weighted_impurity(c, double(nr), total - ls, total_sq - lss);
        if (gain > best.gain + kGainEpsilon) {
            double mid = 0.5 * (sorted[k].value + sorted[k + 1].value);
            if (!(mid < sorted[k + 1].value)) mid = sorted[k].value;
            best = {feature, mid, gain};
        }
    }
}

/// Greedy builder over per-feature entry arrays kept sorted within each node's segment.
struct Builder {
    std::span<const double> targets;
    std::span<const double> hessians;
    const BuildOptions& opts;
    Rng& rng;
    Tree tree;
    std::vector<std::vector<Entry>> cols;
    std::vector<Entry> buffer;
    std::vector<char> goes_left;
    std::vector<std::size_t> all_features;
    std::vector<std::size_t> scratch;

    std::vector<std::size_t> candidate_features() {
        const std::size_t p = all_features.size();
        const std::size_t k = opts.features_per_split;
        if (k == 0 || k >= p) return all_features;
        scratch = all_features;
        for (std::size_t i = 0; i < k; ++i) {
            const auto j = i + std::size_t(rng.below(p - i));
            std::swap(scratch[i], scratch[j]);
        }
        std::vector<std::size_t> out(scratch.begin(), scratch.begin() + std::ptrdiff_t(k));
        std::sort(out.begin(), out.end());
        return out;
    }

    std::int32_t grow(std::size_t begin, std::size_t end, std::size_t depth) {
        const auto id = std::int32_t(tree.nodes.size());
        const std::span<const Entry> seg(cols[0].data() + begin, end - begin);
        double s = 0.0, ss = 0.0, h = 0.0;
        bool pure = true;
        for (const auto& e : seg) {
            const double t = targets[e.row];
            s += t;
            ss += t * t;
            h += hessians.empty() ? 1.0 : hessians[e.row];
            pure = pure && t == targets[seg.front().row];
        }
        Tree::Node node;
        node.samples = std::uint32_t(seg.size());
        node.depth = std::uint32_t(depth);
        node.value = h > 0.0 ? s / h : 0.0;
        tree.nodes.push_back(node);
        const std::size_t min_leaf = std::max<std::size_t>(opts.min_leaf_samples, 1);
        if (depth >= opts.max_depth || pure || seg.size() < 2 * min_leaf) return id;

        SplitChoice split;
        const double parent = weighted_impurity(opts.criterion, double(seg.size()), s, ss);
        for (auto f : candidate_features())
            scan_feature({cols[f].data() + begin, end - begin}, targets, int(f), opts.criterion, min_leaf, parent, s,
                         ss, split);
        if (split.feature < 0) return id;

        std::size_t n_left = 0;
        for (std::size_t k = begin; k < end; ++k) {
            const auto& e = cols[std::size_t(split.feature)][k];
            const bool left = e.value <= split.threshold;
            goes_left[e.row] = left;
            n_left += left;
        }
        for (auto& col : cols) {
            auto l = col.begin() + std::ptrdiff_t(begin);
            std::size_t r = 0;
            for (std::size_t k = begin; k < end; ++k) {
                if (goes_left[col[k].row])
                    *l++ = col[k];
                else
                    buffer[r++] = col[k];
            }
            std::copy(buffer.begin(), buffer.begin() + std::ptrdiff_t(r), l);
        }
        tree.nodes[std::size_t(id)].feature = split.feature;
        tree.nodes[std::size_t(id)].threshold = split.threshold;
        const auto left_id = grow(begin, begin + n_left, depth + 1);
        tree.nodes[std::size_t(id)].left = left_id;
        const auto right_id = grow(begin + n_left, end, depth + 1);
        tree.nodes[std::size_t(id)].right = right_id;
        return id;
    }
};

} // namespace

void TreeParams::validate(EnsembleKind kind) const {
    if (n_trees == 0 && kind == EnsembleKind::random_forest) throw ValidationError("n_trees must be >= 1");
    if (min_leaf_samples == 0) throw ValidationError("min_leaf_samples must be >= 1");
    if (feature_subsample && !(*feature_subsample > 0.0 && *feature_subsample <= 1.0))
        throw ValidationError("feature_subsample must be in (0, 1]");
    if (kind == EnsembleKind::gradient_boosting && (!learning_rate || !(*learning_rate >= 0.0)))
        throw ValidationError("gradient boosting needs a non-negative learning_rate");
    if (kind == EnsembleKind::random_forest && learning_rate)
        throw ValidationError("random forest takes no learning_rate");
}

std::size_t Tree::leaf_of(std::span<const double> x) const {
    std::size_t i = 0;
    while (!nodes[i].is_leaf())
        i = std::size_t(x[std::size_t(nodes[i].feature)] <= nodes[i].threshold ? nodes[i].left : nodes[i].right);
    return i;
}

double Tree::predict(std::span<const double> x) const { return nodes[leaf_of(x)].value; }

std::size_t Tree::depth() const {
    std::size_t d = 0;
    for (const auto& n : nodes) d = std::max<std::size_t>(d, n.depth);
    return d;
}

ColumnOrder ColumnOrder::of(const Dataset& data) {
    ColumnOrder o;
    o.by_feature.resize(data.cols());
    for (std::size_t f = 0; f < data.cols(); ++f) {
        auto& idx = o.by_feature[f];
        idx.resize(data.rows());
        std::iota(idx.begin(), idx.end(), std::uint32_t{0});
        std::stable_sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) {
            return data.x(Eigen::Index(a), Eigen::Index(f)) < data.x(Eigen::Index(b), Eigen::Index(f));
        });
    }
    return o;
}

SplitChoice best_split(const Dataset& data, std::span<const double> targets, std::span<const std::size_t> rows,
                       std::span<const std::size_t> features, Criterion criterion, std::size_t min_leaf) {
    SplitChoice best;
    const std::size_t n = rows.size();
    if (n < 2) return best;
    double total = 0.0, total_sq = 0.0;
    for (auto r : rows) {
        total += targets[r];
        total_sq += targets[r] * targets[r];
    }
    const double parent = weighted_impurity(criterion, double(n), total, total_sq);
    std::vector<Entry> sorted(n);
    for (auto f : features) {
        for (std::size_t k = 0; k < n; ++k)
            sorted[k] = {data.x(Eigen::Index(rows[k]), Eigen::Index(f)), std::uint32_t(rows[k])};
        std::stable_sort(sorted.begin(), sorted.end(), [](const Entry& a, const Entry& b) { return a.value < b.value; });
        scan_feature(sorted, targets, int(f), criterion, std::max<std::size_t>(min_leaf, 1), parent, total, total_sq,
                     best);
    }
    return best;
}

Tree build_tree(const Dataset& data, std::span<const double> targets, std::span<const std::size_t> rows,
                const BuildOptions& opts, Rng& rng, std::span<const double> hessians, const ColumnOrder* order) {
    if (rows.empty()) throw ValidationError("build_tree: no rows");
    if (data.cols() == 0) throw ValidationError("build_tree: no features");
    if (targets.size() != data.rows()) throw ValidationError("build_tree: target count mismatch");
    if (!hessians.empty() && hessians.size() != data.rows()) throw ValidationError("build_tree: hessian count mismatch");
    ColumnOrder local;
    if (!order) {
        local = ColumnOrder::of(data);
        order = &local;
    }
    std::vector<std::uint32_t> multiplicity(data.rows(), 0);
    for (auto r : rows) {
        if (r >= data.rows()) throw ValidationError("build_tree: row index out of range");
        ++multiplicity[r];
    }
    Builder b{targets, hessians, opts, rng, {}, {}, {}, {}, {}, {}};
    b.cols.resize(data.cols());
    for (std::size_t f = 0; f < data.cols(); ++f) {
        auto& col = b.cols[f];
        col.reserve(rows.size());
        for (auto r : order->by_feature[f])
            for (std::uint32_t m = 0; m < multiplicity[r]; ++m) col.push_back({data.x(Eigen::Index(r), Eigen::Index(f)), r});
    }
    b.buffer.resize(rows.size());
    b.goes_left.assign(data.rows(), 0);
    b.all_features.resize(data.cols());
    std::iota(b.all_features.begin(), b.all_features.end(), std::size_t{0});
    b.grow(0, rows.size(), 0);
    return std::move(b.tree);
}

Tree build_tree(const Dataset& data, std::span<const double> targets, const BuildOptions& opts, Rng& rng) {
    std::vector<std::size_t> rows(data.rows());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    return build_tree(data, targets, rows, opts, rng);
}

double TreeEnsemble::predict(std::span<const double> x) const {
    if (x.size() != width) throw ValidationError("predict: feature width mismatch");
    if (kind == EnsembleKind::random_forest) {
        if (trees.empty()) return 0.0;
        double s = 0.0;
        for (const auto& t : trees) s += t.predict(x);
        return std::clamp(s / double(trees.size()), 0.0, 1.0);
    }
    const double lr = params.learning_rate.value_or(0.0);
    double z = base_score;
    for (const auto& t : trees) z += lr * t.predict(x);
    return sigmoid(z);
}

TreeEnsemble rf_train(const Dataset& data, std::span<const double> labels, const TreeParams& params) {
    params.validate(EnsembleKind::random_forest);
    if (data.rows() == 0) throw ValidationError("rf_train: empty samples");
    if (labels.size() != data.rows()) throw ValidationError("rf_train: label count mismatch");
    TreeEnsemble e;
    e.kind = EnsembleKind::random_forest;
    e.params = params;
    e.width = data.cols();
    e.trees.resize(params.n_trees);

    BuildOptions opts;
    opts.criterion = Criterion::gini;
    opts.max_depth = params.max_depth;
    opts.min_leaf_samples = params.min_leaf_samples;
    const double p = double(data.cols());
    opts.features_per_split = params.feature_subsample
                                  ? std::size_t(std::ceil(*params.feature_subsample * p))
                                  : std::size_t(std::ceil(std::sqrt(p)));

    const std::size_t n = data.rows();
    const ColumnOrder order = ColumnOrder::of(data);
    auto train_range = [&](std::size_t begin, std::size_t end) {
        std::vector<std::size_t> rows(n);
        for (std::size_t t = begin; t < end; ++t) {
            Rng rng(params.seed, t);
            for (auto& r : rows) r = std::size_t(rng.below(n));
            e.trees[t] = build_tree(data, labels, rows, opts, rng, {}, &order);
        }
    };
    const std::size_t workers = std::clamp<std::size_t>(params.threads, 1, params.n_trees);
    if (workers == 1) {
        train_range(0, params.n_trees);
    } else {
        std::vector<std::jthread> pool;
        const std::size_t chunk = (params.n_trees + workers - 1) / workers;
        for (std::size_t w = 0; w < workers; ++w) {
            const std::size_t b = w * chunk, en = std::min(params.n_trees, b + chunk);
            if (b < en) pool.emplace_back(train_range, b, en);
        }
    }
    return e;
}

TreeEnsemble gbt_train(const Dataset& data, std::span<const double> labels, const TreeParams& params,
                       BoostingTrace* trace) {
    params.validate(EnsembleKind::gradient_boosting);
    const std::size_t n = data.rows();
    if (n == 0) throw ValidationError("gbt_train: empty samples");
    if (labels.size() != n) throw ValidationError("gbt_train: label count mismatch");
    TreeEnsemble e;
    e.kind = EnsembleKind::gradient_boosting;
    e.params = params;
    e.width = data.cols();
    const double rate = std::accumulate(labels.begin(), labels.end(), 0.0) / double(n);
    const double p0 = std::clamp(rate, kProbabilityClamp, 1.0 - kProbabilityClamp);
    e.base_score = std::log(p0 / (1.0 - p0));
    const double lr = *params.learning_rate;

    BuildOptions opts;
    opts.criterion = Criterion::variance;
    opts.max_depth = params.max_depth;
    opts.min_leaf_samples = params.min_leaf_samples;
    opts.features_per_split =
        params.feature_subsample ? std::size_t(std::ceil(*params.feature_subsample * double(data.cols()))) : 0;

    const ColumnOrder order = ColumnOrder::of(data);
    std::vector<double> score(n, e.base_score), residual(n), hessian(n);
    std::vector<std::size_t> rows(n);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    auto mean_loss = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += logistic_loss(sigmoid(score[i]), labels[i]);
        return s / double(n);
    };
    if (trace) trace->loss.assign(1, mean_loss());
    Rng rng(params.seed, 0);
    for (std::size_t t = 0; t < params.n_trees; ++t) {
        for (std::size_t i = 0; i < n; ++i) {
            const double p = std::clamp(sigmoid(score[i]), kProbabilityClamp, 1.0 - kProbabilityClamp);
            residual[i] = labels[i] - p;
            hessian[i] = p * (1.0 - p);
        }
        Tree tree = build_tree(data, residual, rows, opts, rng, hessian, &order);
        for (std::size_t i = 0; i < n; ++i) score[i] += lr * tree.predict(data.row(i));
        e.trees.push_back(std::move(tree));
        if (trace) trace->loss.push_back(mean_loss());
    }
    return e;
}

std::vector<double> tabular_row(const Eigen::MatrixXd& window) {
    const auto f = window.cols();
    std::vector<double> out(std::size_t(3 * f));
    const Eigen::RowVectorXd mean = window.colwise().mean();
    const Eigen::RowVectorXd sd =
        ((window.rowwise() - mean).array().square().colwise().sum() / double(window.rows())).sqrt();
    for (Eigen::Index c = 0; c < f; ++c) {
        out[std::size_t(c)] = window(window.rows() - 1, c);
        out[std::size_t(f + c)] = mean(c);
        out[std::size_t(2 * f + c)] = sd(c);
    }
    return out;
}

Dataset tabularize(const SampleSet& samples) {
    Dataset d;
    d.x.resize(Eigen::Index(samples.size()), Eigen::Index(3 * samples.width()));
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto row = tabular_row(samples.inputs[i]);
        for (std::size_t c = 0; c < row.size(); ++c) d.x(Eigen::Index(i), Eigen::Index(c)) = row[c];
    }
    return d;
}

std::vector<double> labels_of(const SampleSet& samples, RiskType r) {
    std::vector<double> y(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) y[i] = samples.label(i, r);
    return y;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

void write_preorder(const Tree& t, std::size_t i, json& out) {
    const auto& n = t.nodes[i];
    if (n.is_leaf()) {
        out.push_back({{"type", "leaf"}, {"value", n.value}, {"samples", n.samples}});
        return;
    }
    out.push_back({{"type", "split"},
                   {"feature", n.feature},
                   {"threshold", n.threshold},
                   {"value", n.value},
                   {"samples", n.samples}});
    write_preorder(t, std::size_t(n.left), out);
    write_preorder(t, std::size_t(n.right), out);
}

std::int32_t read_preorder(const json& records, std::size_t& pos, std::uint32_t depth, Tree& t) {
    if (pos >= records.size()) throw ParseError("truncated tree node list");
    const json& r = records[pos++];
    const auto id = std::int32_t(t.nodes.size());
    t.nodes.push_back({});
    auto& node = t.nodes.back();
    node.samples = r.at("samples").get<std::uint32_t>();
    node.depth = depth;
    node.value = r.at("value").get<double>();
    const auto type = r.at("type").get<std::string>();
    if (type == "leaf") return id;
    if (type != "split") throw ParseError("unknown node type '" + type + "'");
    node.feature = r.at("feature").get<int>();
    node.threshold = r.at("threshold").get<double>();
    if (node.feature < 0 || !std::isfinite(node.threshold)) throw ParseError("invalid split node");
    const auto l = read_preorder(records, pos, depth + 1, t);
    t.nodes[std::size_t(id)].left = l;
    const auto rr = read_preorder(records, pos, depth + 1, t);
    t.nodes[std::size_t(id)].right = rr;
    return id;
}

json params_json(const TreeParams& p) {
    json j{{"n_trees", p.n_trees}, {"max_depth", p.max_depth}, {"min_leaf_samples", p.min_leaf_samples},
           {"seed", p.seed}};
    j["learning_rate"] = p.learning_rate ? json(*p.learning_rate) : json(nullptr);
    j["feature_subsample"] = p.feature_subsample ? json(*p.feature_subsample) : json(nullptr);
    return j;
}

TreeParams params_from(const json& j) {
    TreeParams p;
    p.n_trees = j.at("n_trees").get<std::size_t>();
    p.max_depth = j.at("max_depth").get<std::size_t>();
    p.min_leaf_samples = j.at("min_leaf_samples").get<std::size_t>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.learning_rate = j.at("learning_rate").is_null() ? std::nullopt : std::optional(j.at("learning_rate").get<double>());
    p.feature_subsample =
        j.at("feature_subsample").is_null() ? std::nullopt : std::optional(j.at("feature_subsample").get<double>());
    return p;
}

} // namespace

json to_json(const TreeEnsemble& e) {
    json trees = json::array();
    for (const auto& t : e.trees) {
        json nodes = json::array();
        write_preorder(t, 0, nodes);
        trees.push_back(std::move(nodes));
    }
    return {{"format", "riskwatch.tree_ensemble"},
            {"version", 1},
            {"kind", e.kind == EnsembleKind::random_forest ? "random_forest" : "gradient_boosting"},
            {"base_score", e.base_score},
            {"width", e.width},
            {"params", params_json(e.params)},
            {"trees", trees}};
}

TreeEnsemble ensemble_from_json(const json& j) {
    try {
        if (j.at("format") != "riskwatch.tree_ensemble" || j.at("version") != 1)
            throw ParseError("not a version-1 riskwatch tree ensemble");
        TreeEnsemble e;
        const auto kind = j.at("kind").get<std::string>();
        if (kind == "random_forest")
            e.kind = EnsembleKind::random_forest;
        else if (kind == "gradient_boosting")
            e.kind = EnsembleKind::gradient_boosting;
        else
            throw ParseError("unknown ensemble kind '" + kind + "'");
        e.base_score = j.at("base_score").get<double>();
        e.width = j.at("width").get<std::size_t>();
        e.params = params_from(j.at("params"));
        for (const auto& records : j.at("trees")) {
            Tree t;
            std::size_t pos = 0;
            read_preorder(records, pos, 0, t);
            if (pos != records.size()) throw ParseError("trailing nodes after tree");
            for (const auto& n : t.nodes)
                if (!n.is_leaf() && std::size_t(n.feature) >= e.width) throw ParseError("split feature out of range");
            e.trees.push_back(std::move(t));
        }
        return e;
    } catch (const json::exception& ex) {
        throw ParseError(std::string("malformed tree ensemble: ") + ex.what());
    }
}

void save_ensembles(const RiskEnsembles& e, const std::filesystem::path& path) {
    json models = json::object();
    for (auto r : kAllRiskTypes)
        if (e.per_risk[index(r)]) models[std::string(to_string(r))] = to_json(*e.per_risk[index(r)]);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << json{{"format", "riskwatch.tree_ensembles"}, {"version", 1}, {"models", models}}.dump() << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

RiskEnsembles load_ensembles(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    RiskEnsembles out;
    for (auto& [name, model] : j.at("models").items()) out.per_risk[index(parse_risk_type(name))] = ensemble_from_json(model);
    return out;
}

} // namespace riskwatch::trees
