#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "riskwatch/alert.hpp"
#include "riskwatch/models.hpp"

namespace riskwatch::stream {

using Millis = std::int64_t;
inline constexpr Millis kNoWatermark = std::numeric_limits<Millis>::min();
inline constexpr Millis kEndOfStream = std::numeric_limits<Millis>::max();
inline constexpr Millis kDayMs = 86'400'000;

struct StreamEvent {
    Millis event_time = 0;
    std::string key;
    std::map<std::string, double> payload;
    std::uint32_t source = 0;

    void validate() const;
    bool operator==(const StreamEvent&) const = default;
};

nlohmann::json to_json(const StreamEvent& e);
StreamEvent event_from_json(const nlohmann::json& j);
/// JSON-lines replay files.
std::vector<StreamEvent> read_events(const std::filesystem::path& path);
void write_events(std::span<const StreamEvent> events, const std::filesystem::path& path);

/// Key `<kind>/<instrument>`, event time at 00:00 UTC of the record date, payload = observed fields.
StreamEvent to_event(const Record& r);
std::vector<StreamEvent> to_events(const RecordSet& records);
Record to_record(const std::string& key, Date day, const std::map<std::string, double>& fields);

enum class WindowKind { tumbling, sliding };

struct WindowSpec {
    WindowKind kind = WindowKind::tumbling;
    Millis size = 60'000;
    Millis slide = 0; // sliding only
    Millis allowed_lateness = 0;

    static WindowSpec tumbling(Millis size, Millis lateness = 0) { return {WindowKind::tumbling, size, 0, lateness}; }
    static WindowSpec sliding(Millis size, Millis slide, Millis lateness = 0) {
        return {WindowKind::sliding, size, slide, lateness};
    }
    Millis step() const { return kind == WindowKind::tumbling ? size : slide; }
    void validate() const;
};

/// Half-open [start, end).
struct WindowId {
    Millis start = 0;
    Millis end = 0;
    auto operator<=>(const WindowId&) const = default;
};

/// Every window containing `event_time`, in ascending start order.
std::vector<WindowId> assign_windows(Millis event_time, const WindowSpec& spec);

/// min over sources of (max observed time - bound).
Millis advance_watermark(std::span<const Millis> source_max_times, Millis bound);

/// Bounded out-of-orderness watermark over a fixed set of sources. Sources that have not
/// produced an event hold the watermark back.
class WatermarkTracker {
  public:
    WatermarkTracker(std::size_t sources, Millis bound);
    /// Returns true when the watermark advanced.
    bool observe(std::uint32_t source, Millis event_time);
    Millis watermark() const { return watermark_; }
    Millis bound() const { return bound_; }

  private:
    std::vector<Millis> max_time_;
    std::vector<bool> seen_;
    Millis bound_;
    Millis watermark_ = kNoWatermark;
};

/// Welford running aggregate.
struct Aggregate {
    std::size_t count = 0;
    double sum = 0.0;
    double mean = 0.0;
    double m2 = 0.0;
    double min = std::numeric_limits<double>::infinity();
    double max = -std::numeric_limits<double>::infinity();

    void add(double v);
    /// Sample variance; 0 below two observations.
    double variance() const { return count > 1 ? m2 / double(count - 1) : 0.0; }
};

nlohmann::json to_json(const Aggregate& a);

struct WindowEmission {
    std::string key;
    WindowId window;
    std::size_t events = 0;
    std::map<std::string, Aggregate> fields;
    bool late_update = false;
};

nlohmann::json to_json(const WindowEmission& e);

struct OperatorStats {
    std::size_t events = 0;
    std::size_t fired = 0;
    std::size_t late_updates = 0;
    /// Event-window assignments discarded because the window was past its allowed lateness.
    std::size_t dropped = 0;
};

/// Keyed event-time windows with incremental aggregates, allowed lateness and exactly-once
/// primary firing.
class WindowOperator {
  public:
    explicit WindowOperator(WindowSpec spec, bool emit_empty = false);

    /// Late updates produced by this event (windows already fired but within lateness).
    std::vector<WindowEmission> process(const StreamEvent& e);
    /// Fires every window with end <= watermark, ordered by (end, start, key). Throws
    /// std::logic_error on regression.
    std::vector<WindowEmission> advance(Millis watermark);
    Millis watermark() const { return watermark_; }
    const OperatorStats& stats() const { return stats_; }
    std::size_t open_windows() const { return state_.size(); }

  private:
    struct State {
        std::size_t events = 0;
        std::map<std::string, Aggregate> fields;
        bool fired = false;
    };
    WindowSpec spec_;
    bool emit_empty_;
    Millis watermark_ = kNoWatermark;
    std::map<std::pair<std::string, WindowId>, State> state_;
    // Empty-window bookkeeping: next unfired start and the last start holding data, per key.
    struct KeySpan {
        Millis next;
        Millis last;
    };
    std::map<std::string, KeySpan> spans_;
    OperatorStats stats_;
};

/// Drops events identical in key, time and payload to one already seen.
class Deduplicator {
  public:
    bool is_duplicate(const StreamEvent& e);
    /// Forgets events older than `time`.
    void forget_before(Millis time);
    std::size_t size() const { return seen_.size(); }

  private:
    std::set<std::tuple<Millis, std::string, std::map<std::string, double>>> seen_;
};

enum class Comparison { lt, le, gt, ge, eq, ne };
Comparison parse_comparison(std::string_view op);

struct Predicate {
    std::string field;
    Comparison op = Comparison::lt;
    double value = 0.0;
    /// False when the field is absent.
    bool test(const StreamEvent& e) const;
};

enum class Contiguity { strict, relaxed };

/// `steps` holds either one predicate applied `length` times or exactly `length` predicates.
struct PatternSpec {
    std::vector<Predicate> steps;
    std::size_t length = 1;
    Millis within = 0;
    Contiguity contiguity = Contiguity::strict;
    void validate() const;
    const Predicate& step(std::size_t i) const { return steps.size() == 1 ? steps[0] : steps[i]; }
};

struct PatternMatch {
    std::string key;
    /// Indices into the input span.
    std::vector<std::size_t> events;
    Millis start_time = 0;
    Millis end_time = 0;
    bool operator==(const PatternMatch&) const = default;
};

/// Matches per key, ordered by (key, first event). Strict contiguity needs consecutive events of
/// the key; relaxed takes the next satisfying event. Spans are inclusive of `within`.
std::vector<PatternMatch> match_pattern(std::span<const StreamEvent> events, const PatternSpec& p);

// ---------------------------------------------------------------------------
// Parallel windowing

struct EpochEmission {
    /// Number of watermark advances before this emission.
    std::size_t epoch = 0;
    WindowEmission emission;
};

struct WindowRunConfig {
    WindowSpec window = WindowSpec::tumbling(kDayMs);
    Millis out_of_orderness = 2000;
    std::size_t sources = 1;
    std::size_t workers = 1;
    bool emit_empty = false;
};

struct WindowRun {
    std::vector<EpochEmission> emissions;
    /// Watermark value of each epoch.
    std::vector<Millis> watermarks;
    /// Wall-clock ingest time of the event that opened each epoch.
    std::vector<std::chrono::steady_clock::time_point> epoch_opened;
    std::size_t events = 0;
    std::size_t duplicates = 0;
    OperatorStats stats;
};

/// Deduplicates, tracks the watermark, partitions by key hash over `workers` operators, runs them
/// concurrently and merges by (epoch, window, key). Ends with an end-of-stream watermark.
WindowRun run_windows(std::span<const StreamEvent> events, const WindowRunConfig& cfg);

// ---------------------------------------------------------------------------
// Scoring pipeline

struct DayResult {
    Date day;
    /// Pipeline-transformed feature row.
    std::vector<double> features;
    std::optional<models::ModelScores> scores;
    std::optional<RiskVector> posteriors;
    std::vector<alert::AlertEvent> alerts;
};

nlohmann::json to_json(const DayResult& d);

/// Turns consecutive trading days of records into model scores and alerts.
class DayScorer {
  public:
    /// Throws ValidationError when the bundle's models, pipeline and universe disagree.
    DayScorer(const models::ModelBundle& bundle, std::optional<alert::BayesModel> bayes = std::nullopt,
              alert::CostSpec cost = {});

    /// `records` are the day's daily records plus macro releases dated up to `day`.
    DayResult push_day(Date day, std::span<const Record* const> records);
    std::optional<Date> last_day() const { return last_day_; }
    const models::ModelBundle& bundle() const { return *bundle_; }

  private:
    const models::ModelBundle* bundle_;
    FeatureExtractor extractor_;
    std::vector<std::size_t> columns_;
    std::vector<double> fill_state_;
    std::vector<std::vector<double>> history_;
    std::optional<alert::AlertEngine> alerts_;
    std::optional<Date> last_day_;
};

/// Groups fired day windows into trading days; macro releases wait for the next stock day, other
/// records on days without stock data are discarded.
class DayAssembler {
  public:
    void add(const std::string& key, Date day, const std::map<std::string, double>& fields);
    void add(Record r);
    /// Days up to and including `through` that carry stock records, in order.
    std::vector<std::pair<Date, RecordSet>> take_ready(Date through);

  private:
    std::map<Date, RecordSet> days_;
    RecordSet pending_macro_;
};

struct Percentiles {
    double p50 = 0.0, p95 = 0.0, p99 = 0.0;
};
/// Nearest-rank percentiles; all zero for an empty sample.
Percentiles percentiles(std::vector<double> values);

struct StageMetrics {
    std::string name;
    std::size_t items = 0;
    double seconds = 0.0;
    double throughput() const { return seconds > 0.0 ? double(items) / seconds : 0.0; }
};

struct PipelineMetrics {
    std::size_t events = 0;
    std::size_t duplicates = 0;
    std::size_t late_updates = 0;
    std::size_t dropped = 0;
    std::size_t days_scored = 0;
    std::size_t alerts = 0;
    std::vector<StageMetrics> stages;
    /// Ingest-to-output latency in milliseconds.
    Percentiles latency_ms;
};

nlohmann::json to_json(const PipelineMetrics& m);

struct PipelineConfig {
    Millis out_of_orderness = 2000;
    Millis allowed_lateness = 0;
    std::size_t sources = 1;
    std::size_t workers = 1;
};

struct PipelineResult {
    std::vector<WindowEmission> windows;
    std::vector<DayResult> days;
    std::vector<alert::AlertEvent> alerts;
    PipelineMetrics metrics;
};

/// ingest -> daily windows -> features -> model scores -> alerts.
PipelineResult run_pipeline(std::span<const StreamEvent> events, DayScorer& scorer, const PipelineConfig& cfg);

} // namespace riskwatch::stream
