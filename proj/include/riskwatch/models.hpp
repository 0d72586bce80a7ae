#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "json.hpp"
#include "riskwatch/eval.hpp"
#include "riskwatch/lstm.hpp"
#include "riskwatch/trees.hpp"

namespace riskwatch::models {

enum class ModelKind { lstm, random_forest, gradient_boosting };
inline constexpr std::array<ModelKind, 3> kAllModelKinds = {ModelKind::lstm, ModelKind::random_forest,
                                                           ModelKind::gradient_boosting};
std::string_view to_string(ModelKind k);
ModelKind parse_model_kind(std::string_view name);

/// LSTM wrapper: holds out the most recent `validation_fraction` of the training samples (after a
/// purge of the label horizon) for early stopping.
class LstmModel : public eval::RiskModel {
  public:
    LstmModel(lstm::TrainConfig cfg, double validation_fraction = 0.2);
    std::string name() const override { return "lstm"; }
    void fit(const SampleSet& train) override;
    std::vector<RiskVector> score(const SampleSet& samples) const override;

    const lstm::LstmParams& params() const { return *params_; }
    const lstm::TrainHistory& history() const { return history_; }

  private:
    lstm::TrainConfig cfg_;
    double validation_fraction_;
    std::optional<lstm::LstmParams> params_;
    lstm::TrainHistory history_;
};

/// One binary tree ensemble per risk type in `risks`; other risk types score 0.
class TreeModel : public eval::RiskModel {
  public:
    TreeModel(trees::EnsembleKind kind, trees::TreeParams params, RiskMask risks = all_risks());
    std::string name() const override;
    void fit(const SampleSet& train) override;
    std::vector<RiskVector> score(const SampleSet& samples) const override;

    const trees::RiskEnsembles& ensembles() const { return ensembles_; }
    static RiskMask all_risks() { return RiskMask{0b1111}; }

  private:
    trees::EnsembleKind kind_;
    trees::TreeParams params_;
    RiskMask risks_;
    trees::RiskEnsembles ensembles_;
};

/// Scores for one input window from every loaded model.
struct ModelScores {
    std::optional<RiskVector> lstm;
    std::optional<RiskVector> random_forest;
    std::optional<RiskVector> gradient_boosting;

    const std::optional<RiskVector>& get(ModelKind k) const;
    /// Mean over the models present.
    RiskVector combined() const;
    bool empty() const { return !lstm && !random_forest && !gradient_boosting; }
};

/// Everything needed to score a live feature stream: the fitted pipeline plus trained models.
struct ModelBundle {
    FeaturePipeline pipeline;
    /// Instruments the raw feature extractor tracks; the pipeline's features are a subset.
    Universe universe;
    std::size_t lookback = 30;
    std::size_t horizon = 30;
    std::optional<lstm::LstmParams> lstm;
    std::optional<trees::RiskEnsembles> random_forest;
    std::optional<trees::RiskEnsembles> gradient_boosting;
    /// Content hash per model, reported as its version.
    std::map<std::string, std::string> versions;

    bool has_any_model() const { return lstm || random_forest || gradient_boosting; }
    /// Throws ValidationError when a model's input width disagrees with the pipeline.
    void check_widths() const;
    /// `window` is lookback x features, already transformed by the pipeline.
    ModelScores score_window(const Eigen::MatrixXd& window) const;
};

nlohmann::json to_json(const Universe& u);
Universe universe_from_json(const nlohmann::json& j);

nlohmann::json pipeline_to_json(const FeaturePipeline& p, std::size_t lookback, std::size_t horizon,
                                const Universe& universe = {});
FeaturePipeline pipeline_from_json(const nlohmann::json& j, std::size_t* lookback = nullptr,
                                   std::size_t* horizon = nullptr, Universe* universe = nullptr);

/// Directory layout: pipeline.json, lstm.json, random_forest.json, gradient_boosting.json (each
/// model file optional).
void save_pipeline(const FeaturePipeline& p, std::size_t lookback, std::size_t horizon,
                   const std::filesystem::path& dir, const Universe& universe = {});
ModelBundle load_bundle(const std::filesystem::path& dir);
std::filesystem::path model_path(const std::filesystem::path& dir, ModelKind k);

/// FNV-1a of a file's bytes, as 16 hex digits.
std::string content_hash(const std::filesystem::path& path);

} // namespace riskwatch::models
