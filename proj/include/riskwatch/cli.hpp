#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "riskwatch/alert.hpp"
#include "riskwatch/datagen.hpp"
#include "riskwatch/eval.hpp"
#include "riskwatch/lstm.hpp"
#include "riskwatch/service.hpp"
#include "riskwatch/trees.hpp"

namespace riskwatch::cli {

/// Everything a subcommand may read, merged as defaults < config file < RISKWATCH_* environment <
/// command-line flags.
struct RunConfig {
    std::uint64_t seed = 42;
    GeneratorSpec gen;
    /// One CSV per record kind instead of a combined file.
    bool split_files = false;

    std::size_t lookback = 30;
    std::size_t horizon = 30;
    double z_threshold = 3.0;
    /// `market` (aggregate columns only) or `all`.
    std::string features = "market";

    lstm::TrainConfig lstm;
    trees::TreeParams rf = trees::TreeParams::random_forest();
    trees::TreeParams gbt = trees::TreeParams::gradient_boosting();
    RiskMask tree_risks{0b1111};

    eval::BacktestSpec backtest;
    double threshold = 0.5;
    double holdout_fraction = 0.8;

    alert::CostSpec cost;
    std::size_t buckets = 10;

    service::ServiceConfig service;

    /// Every settable key, in documentation order (`service.*` keys included).
    static const std::vector<std::string>& keys();
    /// Environment variable for a key: `gen.instruments` -> `RISKWATCH_GEN_INSTRUMENTS`.
    static std::string env_name(const std::string& key);

    /// Collects every problem (unknown keys, malformed values, violated constraints) into one
    /// ValidationError.
    static RunConfig load(const std::optional<std::filesystem::path>& file,
                          const std::vector<std::pair<std::string, std::string>>& overrides,
                          const std::map<std::string, std::string>& env);

    /// Throws ValidationError naming the key.
    void set(const std::string& key, const std::string& value);
    /// Exhaustive list of constraint violations; empty when valid.
    std::vector<std::string> problems() const;

    /// Seeds not set explicitly are derived from `seed`.
    void derive_seeds();

  private:
    std::set<std::string> explicit_;
};

/// Paths of the artifacts exchanged between subcommands, under one output root.
struct Layout {
    std::filesystem::path root;

    std::filesystem::path data() const { return root / "data"; }
    std::filesystem::path events() const { return root / "data" / "events.jsonl"; }
    std::filesystem::path features() const { return root / "features"; }
    std::filesystem::path samples() const { return root / "samples"; }
    std::filesystem::path models() const { return root / "models"; }
    std::filesystem::path bayes() const { return root / "models" / "bayes.json"; }
    std::filesystem::path reports() const { return root / "reports"; }
    std::filesystem::path replay() const { return root / "replay"; }
    std::filesystem::path store() const { return root / "store"; }
};

/// A required input is absent; `producer` is the subcommand that writes it.
class MissingArtifact : public std::runtime_error {
  public:
    MissingArtifact(const std::string& producer, const std::filesystem::path& path);
    const std::string& producer() const { return producer_; }

  private:
    std::string producer_;
};

/// Service settings for `serve`: store and model paths default into the layout.
service::ServiceConfig resolve_service_config(const RunConfig& cfg, const Layout& layout);

/// Entry point; returns the process exit code. Data goes to `out`, logs and errors to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
        const std::map<std::string, std::string>& env);

/// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitMissingArtifact = 3;

} // namespace riskwatch::cli
