#include <doctest.h>

#include <fstream>
#include <sstream>

#include "riskwatch/cli.hpp"
#include "support.hpp"

using namespace riskwatch;
using namespace riskwatch::cli;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code = 0;
    std::string out;
    std::string err;
};

Outcome run_cli(std::vector<std::string> args, const std::map<std::string, std::string>& env = {}) {
    args.insert(args.begin(), "riskwatch");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run(int(argv.size()), argv.data(), out, err, env);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

fs::path write_config(const std::string& name, const std::string& text) {
    const auto path = test_support::scratch_dir("cli_cfg_" + name) / "run.conf";
    std::ofstream(path) << text;
    return path;
}

const char* kSmall = R"(# small synthetic run
gen.instruments = 3
gen.forex = 1
gen.commodities = 1
gen.start = 2018-01-01
gen.end = 2020-06-30
preprocess.lookback = 8
preprocess.horizon = 10
lstm.hidden = 4
lstm.epochs = 3
lstm.patience = 1
lstm.batch = 32
rf.trees = 8
rf.depth = 3
gbt.trees = 10
gbt.depth = 3
backtest.initial_train = 250
backtest.horizon = 60
backtest.step = 60
)";

} // namespace

TEST_CASE("config defaults are valid and seeds derive from the master seed") {
    const auto a = RunConfig::load(std::nullopt, {}, {});
    CHECK(a.problems().empty());
    CHECK(a.gen.seed == 42);
    CHECK(a.backtest.purge == a.horizon);
    const auto b = RunConfig::load(std::nullopt, {{"seed", "7"}}, {});
    CHECK(b.gen.seed == 7);
    CHECK(b.lstm.seed != a.lstm.seed);
    CHECK(b.rf.seed != b.gbt.seed);
    const auto c = RunConfig::load(std::nullopt, {{"seed", "7"}, {"gen.seed", "99"}}, {});
    CHECK(c.gen.seed == 99);
    CHECK(c.lstm.seed == b.lstm.seed);
}

TEST_CASE("config precedence is flags over environment over file") {
    const auto path = write_config("prec", "gen.instruments = 4\npreprocess.lookback = 12\nservice.port = 9000\n");
    const auto from_file = RunConfig::load(path, {}, {});
    CHECK(from_file.gen.n_instruments == 4);
    CHECK(from_file.lookback == 12);
    CHECK(from_file.service.port == 9000);

    const std::map<std::string, std::string> env = {{"RISKWATCH_GEN_INSTRUMENTS", "6"}, {"RISKWATCH_PORT", "9100"}};
    const auto with_env = RunConfig::load(path, {}, env);
    CHECK(with_env.gen.n_instruments == 6);
    CHECK(with_env.lookback == 12);
    CHECK(with_env.service.port == 9100);

    const auto with_flags = RunConfig::load(path, {{"gen.instruments", "8"}, {"service.port", "9200"}}, env);
    CHECK(with_flags.gen.n_instruments == 8);
    CHECK(with_flags.service.port == 9200);
    CHECK(RunConfig::env_name("gen.base_volatility") == "RISKWATCH_GEN_BASE_VOLATILITY");
}

TEST_CASE("config errors are listed exhaustively") {
    const auto path = write_config("bad", "bogus.key = 1\ngen.instruments = many\nno equals sign\nlstm.patience = 500\n");
    try {
        RunConfig::load(path, {{"eval.threshold", "2"}}, {{"RISKWATCH_PREPROCESS_LOOKBACK", "x"}});
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("run.conf:1: bogus.key: unknown key") != std::string::npos);
        CHECK(msg.find("run.conf:2: gen.instruments") != std::string::npos);
        CHECK(msg.find("run.conf:3: expected key = value") != std::string::npos);
        CHECK(msg.find("patience") != std::string::npos);
        CHECK(msg.find("eval.threshold") != std::string::npos);
        CHECK(msg.find("RISKWATCH_PREPROCESS_LOOKBACK") != std::string::npos);
    }
    CHECK_THROWS_AS(RunConfig::load(fs::path("/nonexistent/run.conf"), {}, {}), IoError);
}

TEST_CASE("every documented key is settable") {
    RunConfig c;
    const std::map<std::string, std::string> samples = {
        {"gen.start", "2019-01-01"}, {"gen.end", "2020-01-01"}, {"gen.event_rates", "1,2,3,4"},
        {"gen.event_magnitude", "-0.1,0.5,0.2,2"}, {"gen.split", "true"}, {"preprocess.features", "all"},
        {"rf.feature_subsample", "auto"}, {"train.risks", "market_crash|volatility"}, {"backtest.mode", "expanding"},
        {"service.bind", "0.0.0.0"}, {"service.store", "/tmp/s"}, {"service.models", "/tmp/m"},
        {"service.bayes", "/tmp/b.json"}, {"service.tokens", "reader:" + std::string(32, 'r')}};
    for (const auto& key : RunConfig::keys()) {
        const auto it = samples.find(key);
        const std::string value = it != samples.end() ? it->second
                                  : key.find("learning_rate") != std::string::npos ||
                                            key.find("volatility") != std::string::npos ||
                                            key.find("multiplier") != std::string::npos ||
                                            key.find("z_threshold") != std::string::npos ||
                                            key.find("fraction") != std::string::npos ||
                                            key.find("subsample") != std::string::npos ||
                                            key == "eval.threshold" || key == "lstm.clip_norm"
                                      ? "0.5"
                                      : "3";
        CHECK_NOTHROW(c.set(key, value));
    }
    CHECK(c.split_files);
    CHECK(c.backtest.mode == eval::BacktestMode::expanding);
    CHECK(c.service.tokens.size() == 1);
    CHECK_THROWS_AS(c.set("preprocess.features", "some"), ValidationError);
    CHECK_THROWS_AS(c.set("gen.start", "2019/01/01"), ValidationError);
}

TEST_CASE("help on every subcommand exits 0") {
    for (const char* sub : {"gen", "preprocess", "train", "eval", "backtest", "calibrate", "serve", "replay", "bench"}) {
        const auto r = run_cli({sub, "--help"});
        CHECK_MESSAGE(r.code == 0, sub);
        CHECK_MESSAGE(r.out.find("Usage") != std::string::npos, sub);
    }
    const auto top = run_cli({"--help"});
    CHECK(top.code == 0);
    CHECK(top.out.find("backtest") != std::string::npos);
    CHECK(run_cli({}).code != 0);
    CHECK(run_cli({"frobnicate"}).code != 0);
    CHECK(run_cli({"train", "svm"}).code != 0);
}

TEST_CASE("subcommands name the producer of a missing artifact") {
    const auto root = test_support::scratch_dir("cli_missing");
    const auto r = run_cli({"--out", root.string(), "train", "lstm"});
    CHECK(r.code == kExitMissingArtifact);
    const auto err = json::parse(r.err.substr(r.err.find('{')));
    CHECK(err["error"]["code"] == "missing_artifact");
    CHECK(err["error"]["producer"] == "preprocess");
    CHECK(std::string(err["error"]["message"]).rfind("run preprocess first", 0) == 0);

    CHECK(json::parse(run_cli({"--out", root.string(), "preprocess"}).err)["error"]["producer"] == "gen");
    CHECK(run_cli({"--out", root.string(), "eval"}).code == kExitMissingArtifact);
    CHECK(run_cli({"--out", root.string(), "replay"}).code == kExitMissingArtifact);

    const auto bad = run_cli({"--out", root.string(), "--set", "lstm.hidden=0", "--set", "gbt.depth=x", "gen"});
    CHECK(bad.code == kExitUsage);
    const auto msg = json::parse(bad.err)["error"]["message"].get<std::string>();
    CHECK(msg.find("hidden") != std::string::npos);
    CHECK(msg.find("gbt.depth") != std::string::npos);
}

TEST_CASE("gen, preprocess, train, eval end to end and reproducibly") {
    const auto cfg = write_config("e2e", kSmall);
    auto pipeline = [&](const fs::path& root) {
        const std::string out = root.string(), conf = cfg.string();
        for (std::vector<std::string> args : {std::vector<std::string>{"gen", "--events"}, {"preprocess"},
                                               {"train", "lstm"}, {"train", "rf"}, {"train", "gbt"}}) {
            args.insert(args.begin(), {"--config", conf, "--out", out, "--quiet"});
            const auto r = run_cli(args);
            REQUIRE_MESSAGE(r.code == 0, r.err);
        }
        return run_cli({"--config", conf, "--out", out, "--quiet", "eval"});
    };
    const auto a = test_support::scratch_dir("cli_e2e_a");
    const auto b = test_support::scratch_dir("cli_e2e_b");
    const auto ra = pipeline(a);
    REQUIRE_MESSAGE(ra.code == 0, ra.err);
    const auto rb = pipeline(b);
    REQUIRE(rb.code == 0);
    CHECK(ra.out == rb.out);
    for (const char* m : {"lstm", "random_forest", "gradient_boosting"}) CHECK(ra.out.find(m) != std::string::npos);

    const auto report = json::parse(slurp(a / "reports" / "metrics.json"));
    REQUIRE(report["models"].size() == 3);
    for (const auto& [model, block] : report["models"].items()) {
        const auto& per_risk = block["holdout"]["per_risk"];
        REQUIRE_FALSE(per_risk.empty());
        for (const auto& [risk, ev] : per_risk.items()) {
            if (ev["metrics"].is_null()) continue;
            for (const char* metric : {"accuracy", "precision", "recall", "f1"})
                CHECK_MESSAGE(ev["metrics"].contains(metric), model << "/" << risk << " lacks " << metric);
        }
    }

    for (const auto& entry : fs::recursive_directory_iterator(a)) {
        if (!entry.is_regular_file()) continue;
        const auto rel = fs::relative(entry.path(), a);
        CHECK_MESSAGE(slurp(entry.path()) == slurp(b / rel), rel.string());
    }

    SUBCASE("calibrate then replay") {
        const auto cal = run_cli({"--config", cfg.string(), "--out", a.string(), "--quiet", "calibrate"});
        REQUIRE_MESSAGE(cal.code == 0, cal.err);
        CHECK(fs::exists(a / "models" / "bayes.json"));
        const auto rep = run_cli({"--config", cfg.string(), "--out", a.string(), "--quiet", "replay", "--workers", "2"});
        REQUIRE_MESSAGE(rep.code == 0, rep.err);
        const auto metrics = json::parse(rep.out);
        CHECK(metrics["days_scored"].get<int>() > 0);
        CHECK(json::parse(slurp(a / "replay" / "metrics.json")) == metrics);
        std::ifstream days(a / "replay" / "days.jsonl");
        std::string line;
        std::size_t n = 0;
        while (std::getline(days, line)) ++n;
        CHECK(n > 0);
    }
    SUBCASE("backtest retrains per window") {
        const auto bt = run_cli({"--config", cfg.string(), "--out", a.string(), "--quiet", "backtest", "--models", "gbt"});
        REQUIRE_MESSAGE(bt.code == 0, bt.err);
        CHECK(bt.out.find("backtest") != std::string::npos);
        const auto j = json::parse(slurp(a / "reports" / "backtest.json"));
        CHECK(j["models"].contains("gradient_boosting"));
    }
    SUBCASE("service settings default into the run directory") {
        const auto c = RunConfig::load(cfg, {}, {});
        const auto s = resolve_service_config(c, Layout{a});
        CHECK(s.store == a / "store");
        REQUIRE(s.models);
        CHECK(*s.models == a / "models");
        CHECK_FALSE(s.bayes);
    }
}

TEST_CASE("bench command writes and re-aggregates report files") {
    const auto root = test_support::scratch_dir("cli_bench");
    const auto cfg = write_config("bench", kSmall);
    const auto r = run_cli({"--config", cfg.string(), "--out", (root / "a").string(), "--quiet", "bench", "--volumes",
                            "64K,256K", "--concurrency", "1,2", "--duration", "0.2"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto csv = slurp(root / "a" / "series.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 + 2);
    const auto again = run_cli({"--out", (root / "b").string(), "--quiet", "bench", "--from-samples",
                                (root / "a" / "samples.json").string()});
    REQUIRE(again.code == 0);
    CHECK(slurp(root / "a" / "report.json") == slurp(root / "b" / "report.json"));
    CHECK(slurp(root / "a" / "series.csv") == slurp(root / "b" / "series.csv"));

    const auto bad = run_cli({"--out", root.string(), "bench", "--volumes", "2M,1M", "--concurrency", ""});
    CHECK(bad.code == kExitUsage);
}
