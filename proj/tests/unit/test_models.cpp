#include <doctest.h>

#include <fstream>

#include "riskwatch/models.hpp"
#include "riskwatch/rng.hpp"
#include "support.hpp"

using namespace riskwatch;
using namespace riskwatch::models;

namespace {

SampleSet planted_samples(std::size_t n, std::size_t width = 3, std::size_t lookback = 4) {
    Rng rng(21);
    SampleSet s;
    for (std::size_t f = 0; f < width; ++f) s.feature_names.push_back("f" + std::to_string(f));
    s.lookback = lookback;
    s.horizon = 2;
    for (std::size_t i = 0; i < n; ++i) {
        Eigen::MatrixXd x(static_cast<Eigen::Index>(lookback), static_cast<Eigen::Index>(width));
        for (Eigen::Index r = 0; r < x.rows(); ++r)
            for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) = rng.normal();
        RiskMask m;
        if (x(x.rows() - 1, 0) > 0.3) m.set(RiskType::market_crash);
        if (x(x.rows() - 1, 1) < -0.3) m.set(RiskType::liquidity);
        s.inputs.push_back(x);
        s.labels.push_back(m);
        s.anchors.push_back(Date::from_ymd(2018, 1, 1) + int(i));
        s.anchor_rows.push_back(i + lookback);
    }
    return s;
}

FeaturePipeline identity_pipeline(std::size_t width) {
    FeaturePipeline p;
    for (std::size_t f = 0; f < width; ++f) p.feature_names.push_back("f" + std::to_string(f));
    p.outliers.z_threshold = 3.0;
    p.outliers.median.assign(width, 0.0);
    p.outliers.scale.assign(width, 1.0);
    p.normalizer.feature_names = p.feature_names;
    p.normalizer.mean.assign(width, 0.0);
    p.normalizer.stddev.assign(width, 1.0);
    p.normalizer.constant.assign(width, false);
    return p;
}

double crash_auc(const eval::RiskModel& m, const SampleSet& test) {
    const auto scores = m.score(test);
    std::vector<double> s;
    for (const auto& v : scores) s.push_back(v[index(RiskType::market_crash)]);
    return eval::roc_auc(s, eval::binary_labels(test, RiskType::market_crash)).auc;
}

RiskMask crash_only() {
    RiskMask m;
    m.set(RiskType::market_crash);
    return m;
}

} // namespace

TEST_SUITE("models") {

TEST_CASE("model kind names") {
    CHECK(parse_model_kind("rf") == ModelKind::random_forest);
    CHECK(parse_model_kind("gbt") == ModelKind::gradient_boosting);
    CHECK(parse_model_kind("lstm") == ModelKind::lstm);
    CHECK(to_string(ModelKind::gradient_boosting) == "gradient_boosting");
    CHECK_THROWS_AS(parse_model_kind("svm"), ValidationError);
}

TEST_CASE("tree models learn the planted risks only where requested") {
    const auto s = planted_samples(400);
    auto params = trees::TreeParams::random_forest();
    params.n_trees = 30;
    params.max_depth = 5;
    TreeModel rf(trees::EnsembleKind::random_forest, params, crash_only());
    rf.fit(s.slice(0, 300));
    CHECK(rf.name() == "random_forest");
    CHECK(crash_auc(rf, s.slice(300, 400)) > 0.85);
    CHECK(rf.ensembles().per_risk[index(RiskType::market_crash)].has_value());
    CHECK_FALSE(rf.ensembles().per_risk[index(RiskType::liquidity)].has_value());
    for (const auto& v : rf.score(s.slice(300, 310))) CHECK(v[index(RiskType::liquidity)] == 0.0);

    auto gparams = trees::TreeParams::gradient_boosting();
    gparams.n_trees = 30;
    TreeModel gbt(trees::EnsembleKind::gradient_boosting, gparams);
    gbt.fit(s.slice(0, 300));
    CHECK(crash_auc(gbt, s.slice(300, 400)) > 0.85);
    CHECK_THROWS_AS(gbt.fit(s.slice(0, 0)), ValidationError);
}

TEST_CASE("lstm model holds out a purged validation block") {
    const auto s = planted_samples(200);
    lstm::TrainConfig cfg;
    cfg.hidden_size = 4;
    cfg.max_epochs = 3;
    cfg.patience = 1;
    cfg.batch_size = 16;
    cfg.learning_rate = 0.01;
    LstmModel m(cfg);
    CHECK_THROWS_AS(m.score(s), ValidationError);
    m.fit(s);
    CHECK(m.history().train_loss.size() <= 3);
    CHECK(m.params().input_size() == 3);
    for (const auto& v : m.score(s.slice(0, 5)))
        for (double p : v) {
            CHECK(p > 0.0);
            CHECK(p < 1.0);
        }
    CHECK_THROWS_AS(LstmModel(cfg, 1.0), ValidationError);
    CHECK_THROWS_AS(LstmModel(cfg).fit(s.slice(0, 2)), ValidationError);
}

TEST_CASE("combined scores average the models present") {
    ModelScores s;
    CHECK(s.empty());
    CHECK_THROWS_AS(s.combined(), ValidationError);
    s.lstm = RiskVector{0.2, 0.4, 0.6, 0.8};
    s.gradient_boosting = RiskVector{0.4, 0.0, 0.6, 0.0};
    const auto c = s.combined();
    CHECK(c[0] == doctest::Approx(0.3));
    CHECK(c[1] == doctest::Approx(0.2));
    CHECK(c[2] == doctest::Approx(0.6));
    CHECK(c[3] == doctest::Approx(0.4));
}

TEST_CASE("bundle round trip and width checks") {
    const auto dir = test_support::scratch_dir("bundle");
    CHECK_THROWS_AS(load_bundle(dir), IoError);

    const auto s = planted_samples(120);
    save_pipeline(identity_pipeline(3), 4, 2, dir);
    auto params = trees::TreeParams::random_forest();
    params.n_trees = 5;
    TreeModel rf(trees::EnsembleKind::random_forest, params);
    rf.fit(s);
    trees::save_ensembles(rf.ensembles(), model_path(dir, ModelKind::random_forest));
    lstm::TrainConfig cfg;
    cfg.hidden_size = 3;
    cfg.max_epochs = 1;
    cfg.patience = 0;
    LstmModel lm(cfg);
    lm.fit(s);
    lstm::save_checkpoint(lm.params(), cfg, model_path(dir, ModelKind::lstm));

    auto b = load_bundle(dir);
    CHECK(b.lookback == 4);
    CHECK(b.horizon == 2);
    CHECK(b.lstm.has_value());
    CHECK(b.random_forest.has_value());
    CHECK_FALSE(b.gradient_boosting.has_value());
    CHECK(b.versions.at("lstm").size() == 16);
    CHECK(b.versions.at("random_forest") == content_hash(model_path(dir, ModelKind::random_forest)));

    const auto scores = b.score_window(s.inputs[7]);
    REQUIRE(scores.random_forest);
    CHECK(*scores.random_forest == rf.score(s.slice(7, 8))[0]);
    REQUIRE(scores.lstm);
    CHECK(*scores.lstm == lm.score(s.slice(7, 8))[0]);
    CHECK_FALSE(scores.gradient_boosting);

    b.pipeline = identity_pipeline(4);
    CHECK_THROWS_AS(b.check_widths(), ValidationError);
    save_pipeline(identity_pipeline(5), 4, 2, dir);
    CHECK_THROWS_AS(load_bundle(dir), ValidationError);
}

TEST_CASE("pipeline json validation") {
    auto j = pipeline_to_json(identity_pipeline(2), 30, 30);
    std::size_t lookback = 0;
    const auto p = pipeline_from_json(j, &lookback);
    CHECK(lookback == 30);
    CHECK(p.feature_names == identity_pipeline(2).feature_names);
    j["mean"] = std::vector<double>{0.0};
    CHECK_THROWS_AS(pipeline_from_json(j), ParseError);
    j["format"] = "other";
    CHECK_THROWS_AS(pipeline_from_json(j), ParseError);
}

TEST_CASE("content hash tracks bytes") {
    const auto dir = test_support::scratch_dir("hash");
    std::ofstream(dir / "a") << "abc";
    std::ofstream(dir / "b") << "abd";
    CHECK(content_hash(dir / "a") != content_hash(dir / "b"));
    CHECK(content_hash(dir / "a") == content_hash(dir / "a"));
    CHECK_THROWS_AS(content_hash(dir / "missing"), IoError);
}

} // TEST_SUITE
