#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "riskwatch/preprocess.hpp"

namespace riskwatch::lstm {

/// Gate weights act on the concatenation [h_prev, x]; the head maps the final hidden state to one
/// logit per output.
struct LstmParams {
    Eigen::MatrixXd forget_w, input_w, output_w, cell_w;
    Eigen::VectorXd forget_b, input_b, output_b, cell_b;
    Eigen::MatrixXd head_w;
    Eigen::VectorXd head_b;

    static LstmParams zeros(std::size_t hidden, std::size_t input, std::size_t outputs = kRiskTypeCount);
    /// Uniform(-k, k) with k = 1/sqrt(hidden + input) for gates and 1/sqrt(hidden) for the head;
    /// forget bias starts at 1.
    static LstmParams initialize(std::size_t hidden, std::size_t input, std::size_t outputs, std::uint64_t seed);

    std::size_t hidden_size() const { return std::size_t(forget_b.size()); }
    std::size_t input_size() const { return std::size_t(forget_w.cols()) - hidden_size(); }
    std::size_t outputs() const { return std::size_t(head_b.size()); }
    std::size_t parameter_count() const;

    /// Flat views of every tensor, in a fixed order.
    std::array<std::span<double>, 10> buffers();
    std::array<std::span<const double>, 10> buffers() const;

    bool all_finite() const;
    /// Throws ValidationError when tensor shapes disagree.
    void check_shapes() const;
};

inline constexpr std::array<const char*, 10> kTensorNames = {"forget_w", "input_w", "output_w", "cell_w", "forget_b",
                                                             "input_b",  "output_b", "cell_b", "head_w", "head_b"};

struct LstmState {
    Eigen::VectorXd h;
    Eigen::VectorXd c;

    static LstmState zeros(std::size_t hidden) {
        return {Eigen::VectorXd::Zero(Eigen::Index(hidden)), Eigen::VectorXd::Zero(Eigen::Index(hidden))};
    }
};

/// Activations retained for backpropagation.
struct GateCache {
    Eigen::VectorXd concat; // [h_prev, x]
    Eigen::VectorXd forget, input, output, candidate;
    Eigen::VectorXd c_prev, c, tanh_c;
};

struct CellStep {
    LstmState next;
    GateCache cache;
};

/// One timestep:
///   f = sigmoid(Wf [h, x] + bf), i = sigmoid(Wi [h, x] + bi), o = sigmoid(Wo [h, x] + bo)
///   c' = f * c + i * tanh(Wc [h, x] + bc),  h' = o * tanh(c')
CellStep cell_forward(const LstmParams& p, const Eigen::VectorXd& x, const LstmState& prev);

struct ForwardResult {
    Eigen::VectorXd probabilities;
    std::vector<GateCache> caches;
    LstmState final_state;
};

/// Runs the sequence (rows = timesteps) from a zero state and applies the sigmoid head.
ForwardResult forward(const LstmParams& p, const Eigen::MatrixXd& sequence);
Eigen::VectorXd predict(const LstmParams& p, const Eigen::MatrixXd& sequence);

inline constexpr double kProbabilityClamp = 1e-12;

/// Mean binary cross-entropy over outputs, probabilities clamped 1e-12 from {0, 1}.
double loss(const Eigen::VectorXd& probabilities, const Eigen::VectorXd& labels);

/// Exact gradient of loss() for one sequence via backpropagation through time.
LstmParams backward(const LstmParams& p, const Eigen::MatrixXd& sequence, const Eigen::VectorXd& labels,
                    const ForwardResult& fwd);

Eigen::VectorXd label_vector(RiskMask m);

struct TrainConfig {
    std::size_t hidden_size = 128;
    std::size_t batch_size = 64;
    double learning_rate = 0.001;
    std::size_t max_epochs = 100;
    std::size_t patience = 10;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double clip_norm = 5.0;
    std::uint64_t seed = 7;

    void validate() const;
};

struct TrainHistory {
    double initial_validation_loss = 0.0;
    std::vector<double> train_loss;
    std::vector<double> validation_loss;
    std::size_t best_epoch = 0; // 1-based; 0 means the initial parameters were best
    bool early_stopped = false;
};

struct TrainResult {
    LstmParams params;
    TrainHistory history;
};

/// Mini-batch Adam with seeded shuffling, global-norm clipping and early stopping on validation
/// loss. Returns the best-validation parameters.
TrainResult train(const SampleSet& samples, const TrainConfig& cfg, const SampleSet& validation);

double mean_loss(const LstmParams& p, const SampleSet& samples);

nlohmann::json to_json(const LstmParams& p, const TrainConfig& cfg);
LstmParams params_from_json(const nlohmann::json& j);
void save_checkpoint(const LstmParams& p, const TrainConfig& cfg, const std::filesystem::path& path);
LstmParams load_checkpoint(const std::filesystem::path& path);

} // namespace riskwatch::lstm
