#include <cmath>

#include "../oracles.hpp"
#include "doctest.h"
#include "riskwatch/lstm.hpp"
#include "support.hpp"

using namespace riskwatch;
using namespace riskwatch::lstm;

namespace {

/// Feature 0 of the last row carries the label of market_crash; the other features are noise.
SampleSet separable_samples(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    SampleSet s;
    s.feature_names = {"signal", "noise"};
    s.lookback = 4;
    s.horizon = 1;
    for (std::size_t i = 0; i < n; ++i) {
        const bool pos = rng.bernoulli(0.4);
        Eigen::MatrixXd x(4, 2);
        for (Eigen::Index r = 0; r < 4; ++r) x(r, 1) = rng.normal();
        for (Eigen::Index r = 0; r < 4; ++r) x(r, 0) = 0.3 * rng.normal();
        x(3, 0) += pos ? 1.5 : -1.5;
        RiskMask m;
        if (pos) m.set(RiskType::market_crash);
        s.inputs.push_back(x);
        s.labels.push_back(m);
        s.anchors.push_back(Date::from_ymd(2020, 1, 1) + int(i));
        s.anchor_rows.push_back(i);
    }
    return s;
}

TrainConfig small_config() {
    TrainConfig c;
    c.hidden_size = 6;
    c.batch_size = 16;
    c.learning_rate = 0.02;
    c.max_epochs = 15;
    c.patience = 5;
    c.seed = 3;
    return c;
}

} // namespace

TEST_SUITE("lstm") {
    TEST_CASE("zero parameters: every gate is one half") {
        const auto p = LstmParams::zeros(3, 2);
        Eigen::VectorXd c0(3);
        c0 << 0.4, -1.0, 2.0;
        const LstmState prev{Eigen::VectorXd::Zero(3), c0};
        const auto step = cell_forward(p, Eigen::Vector2d(0.7, -3.0), prev);
        for (Eigen::Index k = 0; k < 3; ++k) {
            CHECK(step.cache.forget(k) == 0.5);
            CHECK(step.cache.input(k) == 0.5);
            CHECK(step.cache.output(k) == 0.5);
            CHECK(step.next.c(k) == doctest::Approx(0.5 * c0(k)).epsilon(1e-15));
            CHECK(step.next.h(k) == doctest::Approx(0.5 * std::tanh(0.5 * c0(k))).epsilon(1e-15));
        }
        Eigen::MatrixXd seq = Eigen::MatrixXd::Random(5, 2);
        const auto probs = predict(p, seq);
        for (Eigen::Index k = 0; k < probs.size(); ++k) CHECK(probs(k) == 0.5);
    }

    TEST_CASE("scalar reference cell") {
        auto p = LstmParams::zeros(1, 1, 1);
        p.forget_w.setOnes();
        p.input_w.setOnes();
        p.output_w.setOnes();
        p.cell_w.setOnes();
        const auto step = cell_forward(p, Eigen::VectorXd::Ones(1), LstmState::zeros(1));
        const auto ref = oracle::scalar_lstm_step(1.0, 0.0, 1.0, 0.0, 0.0);
        CHECK(step.cache.forget(0) == doctest::Approx(0.7311).epsilon(1e-3));
        CHECK(step.next.c(0) == doctest::Approx(0.5568).epsilon(1e-3));
        CHECK(step.next.h(0) == doctest::Approx(0.3696).epsilon(1e-3));
        CHECK(std::abs(step.next.c(0) - ref.cell) < 1e-12);
        CHECK(std::abs(step.next.h(0) - ref.hidden) < 1e-12);
    }

    TEST_CASE("saturated forget gate keeps the cell state") {
        auto p = LstmParams::zeros(2, 1);
        p.forget_b.setConstant(20.0);
        const LstmState prev{Eigen::VectorXd::Zero(2), Eigen::Vector2d(0.3, -0.9)};
        const auto step = cell_forward(p, Eigen::VectorXd::Zero(1), prev);
        CHECK((step.next.c - prev.c).cwiseAbs().maxCoeff() < 1e-8);
    }

    TEST_CASE("cell errors") {
        const auto p = LstmParams::zeros(2, 3);
        CHECK_THROWS_AS(cell_forward(p, Eigen::VectorXd::Zero(2), LstmState::zeros(2)), ValidationError);
        Eigen::VectorXd bad = Eigen::VectorXd::Zero(3);
        bad(1) = std::nan("");
        CHECK_THROWS_AS(cell_forward(p, bad, LstmState::zeros(2)), ValidationError);
        CHECK_THROWS_AS(forward(p, Eigen::MatrixXd(0, 3)), ValidationError);
        CHECK_THROWS_AS(forward(p, Eigen::MatrixXd::Zero(4, 2)), ValidationError);
    }

    TEST_CASE("gate ranges and probability range on random parameters") {
        for (std::uint64_t seed = 0; seed < 1000; ++seed) {
            auto p = LstmParams::initialize(3, 2, 4, seed);
            for (auto buf : p.buffers())
                for (auto& v : buf) v *= 8.0;
            Rng rng(seed + 99);
            Eigen::MatrixXd seq(3, 2);
            for (Eigen::Index i = 0; i < seq.size(); ++i) seq.data()[i] = 3.0 * rng.normal();
            const auto fwd = forward(p, seq);
            CHECK((fwd.probabilities.array() >= 0.0).all());
            CHECK((fwd.probabilities.array() <= 1.0).all());
            for (const auto& c : fwd.caches) {
                CHECK((c.forget.array() >= 0.0).all());
                CHECK((c.forget.array() <= 1.0).all());
                CHECK((c.candidate.array().abs() <= 1.0).all());
                CHECK((c.tanh_c.array().abs() <= 1.0).all());
            }
        }
        const auto p = LstmParams::initialize(3, 2, 4, 1);
        const auto probs = predict(p, Eigen::MatrixXd::Constant(4, 2, 0.5));
        CHECK((probs.array() > 0.0).all());
        CHECK((probs.array() < 1.0).all());
    }

    TEST_CASE("length-1 sequence is one cell step plus the head") {
        const auto p = LstmParams::initialize(4, 3, 4, 5);
        const Eigen::Vector3d x(0.1, -0.4, 1.2);
        const auto step = cell_forward(p, x, LstmState::zeros(4));
        const Eigen::VectorXd logits = p.head_w * step.next.h + p.head_b;
        const Eigen::VectorXd expected = (1.0 + (-logits.array()).exp()).inverse();
        const auto got = predict(p, x.transpose());
        CHECK((got - expected).cwiseAbs().maxCoeff() < 1e-15);
    }

    TEST_CASE("binary cross-entropy") {
        CHECK(loss(Eigen::Vector4d::Constant(0.5), Eigen::Vector4d(1, 0, 1, 1)) == doctest::Approx(std::log(2.0)));
        CHECK(loss(Eigen::Vector4d(1, 0, 0, 1), Eigen::Vector4d(1, 0, 0, 1)) < 1e-11);
        CHECK(loss(Eigen::Vector2d(0.9, 0.1), Eigen::Vector2d(1, 0)) == doctest::Approx(0.10536).epsilon(1e-4));
        CHECK(std::isfinite(loss(Eigen::Vector2d(0.0, 1.0), Eigen::Vector2d(1, 0))));
        CHECK_THROWS_AS(loss(Eigen::Vector2d(0.5, 0.5), Eigen::Vector3d(1, 0, 0)), ValidationError);
    }

    TEST_CASE("analytic gradient matches central differences") {
        double worst = 0.0;
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const auto inst = oracle::random_lstm_instance(4, 3, 5, seed);
            worst = std::max(worst, oracle::lstm_gradient_error(inst.params, inst.sequence, inst.labels));
        }
        CHECK(worst < 1e-4);
    }

    TEST_CASE("gradient linearity and dependence on provided timesteps") {
        const auto inst = oracle::random_lstm_instance(3, 2, 6, 77);
        const auto g = backward(inst.params, inst.sequence, inst.labels, forward(inst.params, inst.sequence));
        auto doubled = g;
        for (auto buf : doubled.buffers())
            for (auto& v : buf) v = 0.0;
        for (int rep = 0; rep < 2; ++rep) {
            const auto gi = backward(inst.params, inst.sequence, inst.labels, forward(inst.params, inst.sequence));
            auto dst = doubled.buffers();
            const auto src = gi.buffers();
            for (std::size_t t = 0; t < dst.size(); ++t)
                for (std::size_t i = 0; i < dst[t].size(); ++i) dst[t][i] += src[t][i];
        }
        const auto a = g.buffers();
        const auto b = doubled.buffers();
        for (std::size_t t = 0; t < a.size(); ++t)
            for (std::size_t i = 0; i < a[t].size(); ++i) CHECK(b[t][i] == 2.0 * a[t][i]);

        const Eigen::MatrixXd head = inst.sequence.topRows(3);
        Eigen::MatrixXd other = inst.sequence;
        other.bottomRows(3).setConstant(9.0);
        const auto g1 = backward(inst.params, head, inst.labels, forward(inst.params, head));
        const Eigen::MatrixXd head2 = other.topRows(3);
        const auto g2 = backward(inst.params, head2, inst.labels, forward(inst.params, head2));
        CHECK(g1.input_w == g2.input_w);
        CHECK_THROWS_AS(backward(inst.params, head, inst.labels, forward(inst.params, inst.sequence)),
                        ValidationError);
    }

    TEST_CASE("training reduces validation loss and is deterministic") {
        const auto train_set = separable_samples(160, 1);
        const auto val_set = separable_samples(60, 2);
        const auto cfg = small_config();
        const auto a = train(train_set, cfg, val_set);
        const auto b = train(train_set, cfg, val_set);
        CHECK(a.history.validation_loss == b.history.validation_loss);
        CHECK(a.history.train_loss == b.history.train_loss);
        CHECK(a.params.head_w == b.params.head_w);
        CHECK(a.params.forget_w == b.params.forget_w);
        const double best = *std::min_element(a.history.validation_loss.begin(), a.history.validation_loss.end());
        CHECK(best < a.history.initial_validation_loss);
        CHECK(mean_loss(a.params, val_set) == doctest::Approx(best).epsilon(1e-12));
        CHECK(a.params.all_finite());
    }

    TEST_CASE("patience zero stops after the first non-improving epoch") {
        auto cfg = small_config();
        cfg.patience = 0;
        cfg.learning_rate = 0.5;
        cfg.max_epochs = 40;
        const auto r = train(separable_samples(80, 4), cfg, separable_samples(40, 5));
        const auto& v = r.history.validation_loss;
        REQUIRE(r.history.early_stopped);
        double best = r.history.initial_validation_loss;
        for (std::size_t e = 0; e + 1 < v.size(); ++e) {
            CHECK(v[e] < best);
            best = v[e];
        }
        CHECK(v.back() >= best);
    }

    TEST_CASE("configuration and input errors") {
        auto cfg = small_config();
        cfg.patience = cfg.max_epochs;
        CHECK_THROWS_AS(cfg.validate(), ValidationError);
        cfg = small_config();
        cfg.learning_rate = 0.0;
        CHECK_THROWS_AS(cfg.validate(), ValidationError);
        CHECK_THROWS_AS(train(SampleSet{}, small_config(), separable_samples(4, 1)), ValidationError);
        CHECK_THROWS_AS(train(separable_samples(4, 1), small_config(), SampleSet{}), ValidationError);
        TrainConfig defaults;
        CHECK(defaults.hidden_size == 128);
        CHECK(defaults.batch_size == 64);
        CHECK(defaults.learning_rate == 0.001);
        CHECK(defaults.max_epochs == 100);
    }

    TEST_CASE("initialization ranges") {
        const auto p = LstmParams::initialize(8, 4, 4, 1);
        const double k = 1.0 / std::sqrt(12.0);
        CHECK(p.forget_w.cwiseAbs().maxCoeff() <= k);
        CHECK(p.head_w.cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(8.0));
        CHECK(p.forget_b.isOnes());
        CHECK(p.input_b.cwiseAbs().maxCoeff() <= k);
        CHECK(p.parameter_count() == 4 * (8 * 12 + 8) + 4 * 8 + 4);
    }

    TEST_CASE("checkpoint round-trip") {
        const auto p = LstmParams::initialize(5, 3, 4, 8);
        const auto dir = test_support::scratch_dir("lstm_ckpt");
        save_checkpoint(p, small_config(), dir / "lstm.json");
        const auto q = load_checkpoint(dir / "lstm.json");
        const auto a = p.buffers();
        const auto b = q.buffers();
        for (std::size_t t = 0; t < a.size(); ++t) CHECK(std::equal(a[t].begin(), a[t].end(), b[t].begin(), b[t].end()));
        auto j = to_json(p, small_config());
        CHECK(j.at("config").at("hidden_size") == small_config().hidden_size);
        CHECK(j.at("hidden_size") == 5);
        j["version"] = 2;
        CHECK_THROWS_AS(params_from_json(j), ParseError);
        auto bad = to_json(p, small_config());
        bad["tensors"]["head_b"]["data"] = nlohmann::json::array({1.0});
        CHECK_THROWS_AS(params_from_json(bad), ParseError);
    }
}
