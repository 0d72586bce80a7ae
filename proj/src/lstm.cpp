#include "riskwatch/lstm.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "riskwatch/rng.hpp"

namespace riskwatch::lstm {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

namespace {

VectorXd sigmoid(const VectorXd& z) { return (1.0 + (-z.array()).exp()).inverse().matrix(); }

void fill_uniform(Eigen::Ref<MatrixXd> m, double k, Rng& rng) {
    for (Index c = 0; c < m.cols(); ++c)
        for (Index r = 0; r < m.rows(); ++r) m(r, c) = rng.uniform(-k, k);
}

} // namespace

LstmParams LstmParams::zeros(std::size_t hidden, std::size_t input, std::size_t outputs) {
    if (hidden == 0 || input == 0 || outputs == 0) throw ValidationError("LSTM sizes must be positive");
    const auto h = Index(hidden), w = Index(hidden + input), o = Index(outputs);
    LstmParams p;
    p.forget_w = p.input_w = p.output_w = p.cell_w = MatrixXd::Zero(h, w);
    p.forget_b = p.input_b = p.output_b = p.cell_b = VectorXd::Zero(h);
    p.head_w = MatrixXd::Zero(o, h);
    p.head_b = VectorXd::Zero(o);
    return p;
}

LstmParams LstmParams::initialize(std::size_t hidden, std::size_t input, std::size_t outputs, std::uint64_t seed) {
    LstmParams p = zeros(hidden, input, outputs);
    Rng rng(seed, 0x157);
    const double k = 1.0 / std::sqrt(double(hidden + input));
    for (auto* m : {&p.forget_w, &p.input_w, &p.output_w, &p.cell_w}) fill_uniform(*m, k, rng);
    for (auto* b : {&p.input_b, &p.output_b, &p.cell_b}) fill_uniform(*b, k, rng);
    p.forget_b.setOnes();
    const double kh = 1.0 / std::sqrt(double(hidden));
    fill_uniform(p.head_w, kh, rng);
    fill_uniform(p.head_b, kh, rng);
    return p;
}

std::array<std::span<double>, 10> LstmParams::buffers() {
    auto s = [](auto& t) { return std::span<double>(t.data(), std::size_t(t.size())); };
    return {s(forget_w), s(input_w), s(output_w), s(cell_w), s(forget_b),
            s(input_b),  s(output_b), s(cell_b), s(head_w),  s(head_b)};
}

std::array<std::span<const double>, 10> LstmParams::buffers() const {
    auto s = [](const auto& t) { return std::span<const double>(t.data(), std::size_t(t.size())); };
    return {s(forget_w), s(input_w), s(output_w), s(cell_w), s(forget_b),
            s(input_b),  s(output_b), s(cell_b), s(head_w),  s(head_b)};
}

std::size_t LstmParams::parameter_count() const {
    std::size_t n = 0;
    for (auto b : buffers()) n += b.size();
    return n;
}

bool LstmParams::all_finite() const {
    for (auto b : buffers())
        for (double v : b)
            if (!std::isfinite(v)) return false;
    return true;
}

void LstmParams::check_shapes() const {
    const auto h = forget_b.size();
    const auto w = forget_w.cols();
    bool ok = h > 0 && w > h;
    for (const MatrixXd* m : {&forget_w, &input_w, &output_w, &cell_w}) ok = ok && m->rows() == h && m->cols() == w;
    for (const VectorXd* b : {&input_b, &output_b, &cell_b}) ok = ok && b->size() == h;
    ok = ok && head_w.cols() == h && head_w.rows() == head_b.size() && head_b.size() > 0;
    if (!ok) throw ValidationError("inconsistent LSTM parameter shapes");
}

CellStep cell_forward(const LstmParams& p, const VectorXd& x, const LstmState& prev) {
    const auto h = Index(p.hidden_size());
    if (x.size() != Index(p.input_size()) || prev.h.size() != h || prev.c.size() != h)
        throw ValidationError("cell_forward: shape mismatch");
    if (!x.allFinite()) throw ValidationError("cell_forward: non-finite input");
    CellStep s;
    GateCache& g = s.cache;
    g.concat.resize(h + x.size());
    g.concat << prev.h, x;
    g.forget = sigmoid(p.forget_w * g.concat + p.forget_b);
    g.input = sigmoid(p.input_w * g.concat + p.input_b);
    g.output = sigmoid(p.output_w * g.concat + p.output_b);
    g.candidate = (p.cell_w * g.concat + p.cell_b).array().tanh().matrix();
    g.c_prev = prev.c;
    g.c = g.forget.cwiseProduct(prev.c) + g.input.cwiseProduct(g.candidate);
    g.tanh_c = g.c.array().tanh().matrix();
    s.next.c = g.c;
    s.next.h = g.output.cwiseProduct(g.tanh_c);
    return s;
}

ForwardResult forward(const LstmParams& p, const MatrixXd& sequence) {
    if (sequence.rows() == 0) throw ValidationError("forward: empty sequence");
    if (sequence.cols() != Index(p.input_size())) throw ValidationError("forward: input width mismatch");
    ForwardResult r;
    r.caches.reserve(std::size_t(sequence.rows()));
    LstmState state = LstmState::zeros(p.hidden_size());
    for (Index t = 0; t < sequence.rows(); ++t) {
        CellStep step = cell_forward(p, sequence.row(t).transpose(), state);
        state = std::move(step.next);
        r.caches.push_back(std::move(step.cache));
    }
    r.probabilities = sigmoid(p.head_w * state.h + p.head_b);
    r.final_state = std::move(state);
    return r;
}

VectorXd predict(const LstmParams& p, const MatrixXd& sequence) { return forward(p, sequence).probabilities; }

double loss(const VectorXd& probabilities, const VectorXd& labels) {
    if (probabilities.size() != labels.size() || probabilities.size() == 0)
        throw ValidationError("loss: shape mismatch");
    double total = 0.0;
    for (Index k = 0; k < probabilities.size(); ++k) {
        const double s = std::clamp(probabilities(k), kProbabilityClamp, 1.0 - kProbabilityClamp);
        const double y = labels(k);
        total -= y * std::log(s) + (1.0 - y) * std::log(1.0 - s);
    }
    return total / double(probabilities.size());
}

LstmParams backward(const LstmParams& p, const MatrixXd& sequence, const VectorXd& labels, const ForwardResult& fwd) {
    const auto T = sequence.rows();
    if (Index(fwd.caches.size()) != T) throw ValidationError("backward: cache/sequence length mismatch");
    if (labels.size() != fwd.probabilities.size()) throw ValidationError("backward: label width mismatch");
    const auto H = Index(p.hidden_size());
    const auto W = p.forget_w.cols();

    LstmParams g = LstmParams::zeros(std::size_t(H), p.input_size(), p.outputs());
    const VectorXd dlogit = (fwd.probabilities - labels) / double(labels.size());
    g.head_w = dlogit * fwd.final_state.h.transpose();
    g.head_b = dlogit;

    // Per-timestep pre-activation gradients, columns = timesteps.
    MatrixXd dzf(H, T), dzi(H, T), dzo(H, T), dzg(H, T), concat(W, T);
    VectorXd dh = p.head_w.transpose() * dlogit;
    VectorXd dc = VectorXd::Zero(H);
    for (Index t = T - 1; t >= 0; --t) {
        const GateCache& c = fwd.caches[std::size_t(t)];
        const auto o = c.output.array(), f = c.forget.array(), i = c.input.array(), gg = c.candidate.array();
        const auto tc = c.tanh_c.array();
        dc.array() += dh.array() * o * (1.0 - tc.square());
        dzo.col(t) = (dh.array() * tc * o * (1.0 - o)).matrix();
        dzf.col(t) = (dc.array() * c.c_prev.array() * f * (1.0 - f)).matrix();
        dzi.col(t) = (dc.array() * gg * i * (1.0 - i)).matrix();
        dzg.col(t) = (dc.array() * i * (1.0 - gg.square())).matrix();
        concat.col(t) = c.concat;
        const VectorXd dconcat = p.forget_w.transpose() * dzf.col(t) + p.input_w.transpose() * dzi.col(t) +
                                 p.output_w.transpose() * dzo.col(t) + p.cell_w.transpose() * dzg.col(t);
        dh = dconcat.head(H);
        dc = (dc.array() * f).matrix();
    }
    g.forget_w.noalias() = dzf * concat.transpose();
    g.input_w.noalias() = dzi * concat.transpose();
    g.output_w.noalias() = dzo * concat.transpose();
    g.cell_w.noalias() = dzg * concat.transpose();
    g.forget_b = dzf.rowwise().sum();
    g.input_b = dzi.rowwise().sum();
    g.output_b = dzo.rowwise().sum();
    g.cell_b = dzg.rowwise().sum();
    return g;
}

VectorXd label_vector(RiskMask m) {
    VectorXd y(static_cast<Index>(kRiskTypeCount));
    for (auto r : kAllRiskTypes) y(Index(index(r))) = m.test(r) ? 1.0 : 0.0;
    return y;
}

void TrainConfig::validate() const {
    if (hidden_size == 0 || batch_size == 0 || max_epochs == 0)
        throw ValidationError("train config: sizes must be positive");
    if (!(learning_rate > 0.0)) throw ValidationError("train config: learning_rate must be positive");
    if (patience >= max_epochs) throw ValidationError("train config: patience must be below max_epochs");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && epsilon > 0))
        throw ValidationError("train config: invalid Adam constants");
}

double mean_loss(const LstmParams& p, const SampleSet& samples) {
    double total = 0.0;
    for (std::size_t n = 0; n < samples.size(); ++n)
        total += loss(predict(p, samples.inputs[n]), label_vector(samples.labels[n]));
    return total / double(samples.size());
}

namespace {

struct Adam {
    LstmParams m, v;
    std::size_t t = 0;

    explicit Adam(const LstmParams& shape)
        : m(LstmParams::zeros(shape.hidden_size(), shape.input_size(), shape.outputs())), v(m) {}

    void step(LstmParams& p, const LstmParams& grad, const TrainConfig& cfg) {
        ++t;
        const double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
        const double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
        auto pb = p.buffers();
        auto gb = grad.buffers();
        auto mb = m.buffers();
        auto vb = v.buffers();
        for (std::size_t k = 0; k < pb.size(); ++k) {
            for (std::size_t j = 0; j < pb[k].size(); ++j) {
                const double gj = gb[k][j];
                mb[k][j] = cfg.beta1 * mb[k][j] + (1.0 - cfg.beta1) * gj;
                vb[k][j] = cfg.beta2 * vb[k][j] + (1.0 - cfg.beta2) * gj * gj;
                const double mhat = mb[k][j] / bc1;
                const double vhat = vb[k][j] / bc2;
                pb[k][j] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
            }
        }
    }
};

void accumulate(LstmParams& into, const LstmParams& g) {
    auto a = into.buffers();
    auto b = g.buffers();
    for (std::size_t k = 0; k < a.size(); ++k)
        for (std::size_t j = 0; j < a[k].size(); ++j) a[k][j] += b[k][j];
}

void scale(LstmParams& p, double s) {
    for (auto b : p.buffers())
        for (double& v : b) v *= s;
}

double global_norm(const LstmParams& p) {
    double ss = 0.0;
    for (auto b : p.buffers())
        for (double v : b) ss += v * v;
    return std::sqrt(ss);
}

} // namespace

TrainResult train(const SampleSet& samples, const TrainConfig& cfg, const SampleSet& validation) {
    cfg.validate();
    if (samples.empty() || validation.empty()) throw ValidationError("train: empty training or validation set");
    if (samples.width() != validation.width()) throw ValidationError("train: validation width mismatch");

    TrainResult out;
    LstmParams params = LstmParams::initialize(cfg.hidden_size, samples.width(), kRiskTypeCount, cfg.seed);
    Adam adam(params);
    Rng rng(cfg.seed, 0xADA);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    double best = mean_loss(params, validation);
    out.history.initial_validation_loss = best;
    out.params = params;
    std::size_t stale = 0;
    const std::size_t stop_after = std::max<std::size_t>(cfg.patience, 1);

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double epoch_loss = 0.0;
        std::size_t batch_no = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_no) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            LstmParams grad = LstmParams::zeros(params.hidden_size(), params.input_size(), params.outputs());
            double batch_loss = 0.0;
            for (std::size_t k = start; k < end; ++k) {
                const auto n = order[k];
                const VectorXd y = label_vector(samples.labels[n]);
                const ForwardResult fwd = forward(params, samples.inputs[n]);
                batch_loss += loss(fwd.probabilities, y);
                accumulate(grad, backward(params, samples.inputs[n], y, fwd));
            }
            if (!std::isfinite(batch_loss))
                throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                         std::to_string(batch_no));
            epoch_loss += batch_loss;
            scale(grad, 1.0 / double(end - start));
            const double norm = global_norm(grad);
            if (norm > cfg.clip_norm) scale(grad, cfg.clip_norm / norm);
            adam.step(params, grad, cfg);
        }
        out.history.train_loss.push_back(epoch_loss / double(samples.size()));
        const double val = mean_loss(params, validation);
        if (!std::isfinite(val)) throw std::runtime_error("train: non-finite validation loss at epoch " + std::to_string(epoch));
        out.history.validation_loss.push_back(val);
        if (val < best) {
            best = val;
            out.params = params;
            out.history.best_epoch = epoch;
            stale = 0;
        } else if (++stale >= stop_after) {
            out.history.early_stopped = epoch < cfg.max_epochs;
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

json to_json(const LstmParams& p, const TrainConfig& cfg) {
    json tensors = json::object();
    const auto bufs = p.buffers();
    const std::array<std::pair<Index, Index>, 10> shapes = {
        std::pair{p.forget_w.rows(), p.forget_w.cols()}, {p.input_w.rows(), p.input_w.cols()},
        {p.output_w.rows(), p.output_w.cols()},         {p.cell_w.rows(), p.cell_w.cols()},
        {p.forget_b.size(), 1},                          {p.input_b.size(), 1},
        {p.output_b.size(), 1},                          {p.cell_b.size(), 1},
        {p.head_w.rows(), p.head_w.cols()},              {p.head_b.size(), 1}};
    for (std::size_t k = 0; k < bufs.size(); ++k) {
        const auto [rows, cols] = shapes[k];
        // Eigen storage is column-major; emit row-major.
        std::vector<double> data;
        data.reserve(bufs[k].size());
        for (Index r = 0; r < rows; ++r)
            for (Index c = 0; c < cols; ++c) data.push_back(bufs[k][std::size_t(c * rows + r)]);
        tensors[kTensorNames[k]] = {{"rows", rows}, {"cols", cols}, {"data", data}};
    }
    return {{"format", "riskwatch.lstm"},
            {"version", 1},
            {"hidden_size", p.hidden_size()},
            {"input_size", p.input_size()},
            {"outputs", p.outputs()},
            {"tensors", tensors},
            {"config",
             {{"hidden_size", cfg.hidden_size},
              {"batch_size", cfg.batch_size},
              {"learning_rate", cfg.learning_rate},
              {"max_epochs", cfg.max_epochs},
              {"patience", cfg.patience},
              {"beta1", cfg.beta1},
              {"beta2", cfg.beta2},
              {"epsilon", cfg.epsilon},
              {"clip_norm", cfg.clip_norm},
              {"seed", cfg.seed}}}};
}

LstmParams params_from_json(const json& j) {
    try {
        if (j.at("format") != "riskwatch.lstm" || j.at("version") != 1)
            throw ParseError("not a version-1 riskwatch LSTM checkpoint");
        LstmParams p = LstmParams::zeros(j.at("hidden_size").get<std::size_t>(), j.at("input_size").get<std::size_t>(),
                                         j.at("outputs").get<std::size_t>());
        auto bufs = p.buffers();
        const std::array<Index, 10> rows = {p.forget_w.rows(), p.input_w.rows(), p.output_w.rows(), p.cell_w.rows(),
                                            p.forget_b.size(), p.input_b.size(), p.output_b.size(), p.cell_b.size(),
                                            p.head_w.rows(),   p.head_b.size()};
        for (std::size_t k = 0; k < bufs.size(); ++k) {
            const auto& t = j.at("tensors").at(kTensorNames[k]);
            const auto r = t.at("rows").get<Index>(), c = t.at("cols").get<Index>();
            const auto data = t.at("data").get<std::vector<double>>();
            if (r != rows[k] || std::size_t(r * c) != bufs[k].size() || data.size() != bufs[k].size())
                throw ParseError(std::string("tensor shape mismatch: ") + kTensorNames[k]);
            for (Index rr = 0; rr < r; ++rr)
                for (Index cc = 0; cc < c; ++cc) bufs[k][std::size_t(cc * r + rr)] = data[std::size_t(rr * c + cc)];
        }
        p.check_shapes();
        if (!p.all_finite()) throw ParseError("checkpoint contains non-finite weights");
        return p;
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed LSTM checkpoint: ") + e.what());
    }
}

void save_checkpoint(const LstmParams& p, const TrainConfig& cfg, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json(p, cfg).dump() << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

LstmParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return params_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

} // namespace riskwatch::lstm
