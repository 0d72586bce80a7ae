#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "riskwatch/datagen.hpp"
#include "riskwatch/models.hpp"

namespace riskwatch::bench {

/// A measurement run that could not complete (generation failure, memory exhaustion, error rate).
class BenchError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// `512`, `100K`, `100M`, `1G` (binary multiples) to bytes.
std::uint64_t parse_byte_size(std::string_view text);
std::string format_byte_size(std::uint64_t bytes);
/// Comma-separated list of byte sizes or counts.
std::vector<std::uint64_t> parse_size_list(std::string_view text);
std::vector<std::size_t> parse_count_list(std::string_view text);

enum class Endpoint { health, risk_latest, alerts, history };
std::string_view to_string(Endpoint e);
Endpoint parse_endpoint(std::string_view name);
/// Request target for an endpoint, e.g. `/api/v1/alerts?limit=100`.
std::string request_target(Endpoint e);

struct LoadProfile {
    std::vector<std::uint64_t> data_volumes;
    std::vector<std::size_t> concurrency_levels;
    double duration_seconds = 5.0;
    std::map<Endpoint, double> request_mix{
        {Endpoint::health, 1.0}, {Endpoint::risk_latest, 4.0}, {Endpoint::alerts, 3.0}, {Endpoint::history, 2.0}};
    std::uint64_t seed = 42;
    std::size_t repetitions = 3;
    /// Abort threshold on the non-2xx fraction of a concurrency level.
    double max_error_rate = 0.01;

    /// Throws ValidationError listing every violated field.
    void validate() const;
};

/// `health=1,risk_latest=4,...` to endpoint weights.
std::map<Endpoint, double> parse_request_mix(std::string_view text);

struct Environment {
    unsigned cpus = 0;
    std::uint64_t memory_bytes = 0;
    static Environment current();
    bool operator==(const Environment&) const = default;
};

/// Raw measurements; every reported number is a pure function of these.
struct VolumeSample {
    std::uint64_t target_bytes = 0;
    std::uint64_t bytes = 0; // serialized size actually processed
    std::size_t records = 0;
    std::size_t windows = 0;
    std::vector<double> seconds; // one per repetition
    bool operator==(const VolumeSample&) const = default;
};

struct LevelSample {
    std::size_t clients = 0;
    double wall_seconds = 0.0;
    std::vector<double> latencies; // seconds, successful and failed requests alike
    std::size_t errors = 0;
    bool operator==(const LevelSample&) const = default;
};

struct RawSamples {
    Environment environment;
    std::vector<VolumeSample> volumes;
    std::vector<LevelSample> levels;
    bool operator==(const RawSamples&) const = default;
};

struct VolumeRow {
    std::uint64_t bytes = 0;
    std::size_t records = 0;
    std::size_t repetitions = 0;
    double processing_seconds = 0.0; // median repetition
    double throughput_bytes_per_min = 0.0;
};

struct LevelRow {
    std::size_t clients = 0;
    std::size_t requests = 0;
    std::size_t errors = 0;
    double error_rate = 0.0;
    double p50 = 0.0, p95 = 0.0, p99 = 0.0; // seconds
    double requests_per_second = 0.0;
};

struct BenchReport {
    Environment environment;
    std::vector<VolumeRow> volumes;
    std::vector<LevelRow> levels;
    /// max / min throughput over the volume ladder; absent with fewer than two volumes.
    std::optional<double> throughput_ratio;
    std::optional<std::size_t> peak_clients;
    /// Peak strictly between the smallest and largest level.
    bool interior_peak = false;
    bool p50_non_decreasing = true;
};

/// Median of the repetitions; the lower middle element for an even count.
double median(std::vector<double> values);
double throughput_bytes_per_min(std::uint64_t bytes, double seconds);
BenchReport aggregate(const RawSamples& raw);

/// Generator settings whose serialized records come to roughly `target_bytes`, over the
/// instruments of `universe`. Throws ValidationError when the target cannot hold one input window.
GeneratorSpec volume_spec(const Universe& universe, std::uint64_t target_bytes, std::size_t lookback,
                          std::uint64_t seed);

/// Per volume: generate (untimed), then time parse + feature extraction + transform + scoring of
/// every window, `repetitions` times.
std::vector<VolumeSample> bench_batch(const std::vector<std::uint64_t>& volumes, const models::ModelBundle& bundle,
                                      std::size_t repetitions, std::uint64_t seed);

struct Target {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string token;
};

/// Closed-loop clients per level, each drawing requests from the profile's mix until the level
/// duration elapses. Throws BenchError when a level's error rate exceeds the profile limit.
std::vector<LevelSample> bench_concurrency(const LoadProfile& profile, const Target& target);

nlohmann::json to_json(const RawSamples& raw);
RawSamples raw_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BenchReport& r);
BenchReport report_from_json(const nlohmann::json& j);

/// CSV `series,x,processing_seconds,throughput_bytes_per_min,p50,p95,p99,requests_per_second,error_rate`:
/// one `volume` row per volume, then one `concurrency` row per level.
std::string report_csv(const BenchReport& r);

/// Writes samples.json, report.json and series.csv into `dir`.
void emit_report(const RawSamples& raw, const std::filesystem::path& dir);

} // namespace riskwatch::bench
