#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "riskwatch/common.hpp"

namespace riskwatch {

enum class RecordKind : std::uint8_t { stock = 0, forex = 1, commodity = 2, macro = 3, sentiment = 4 };

inline constexpr std::array<RecordKind, 5> kAllRecordKinds = {RecordKind::stock, RecordKind::forex,
                                                             RecordKind::commodity, RecordKind::macro,
                                                             RecordKind::sentiment};

std::string_view to_string(RecordKind k);
RecordKind parse_record_kind(std::string_view name);

/// Ordered field schema of a record kind. Feature counts follow the source dataset layout
/// (stock 10, forex 6, commodity 5, macro 8, sentiment 3).
std::span<const std::string_view> kind_fields(RecordKind k);
/// Index of `field` in kind_fields(k), or -1.
int field_index(RecordKind k, std::string_view field);
bool is_monthly(RecordKind k);

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

/// One timestamped market observation.
///
/// `values` is aligned with kind_fields(kind); a NaN cell means "missing".
struct Record {
    Date timestamp;
    std::string instrument;
    RecordKind kind = RecordKind::stock;
    std::vector<double> values;
    RiskMask labels;

    bool missing(std::size_t i) const { return std::isnan(values[i]); }
    /// Value of a named field; NaN when missing or not part of the schema.
    double get(std::string_view field) const;

    friend bool operator==(const Record& a, const Record& b);
};

using RecordSet = std::vector<Record>;

/// An event injected at a fixed date in addition to the randomly scheduled ones.
struct PlantedEvent {
    RiskType type = RiskType::market_crash;
    Date start;
    int duration = 5; // trading days
    double magnitude = -0.2;
};

struct GeneratorSpec {
    std::uint64_t seed = 42;
    int n_instruments = 10;
    int n_forex = 3;
    int n_commodities = 3;
    Date start_date = Date::from_ymd(2016, 1, 1);
    Date end_date = Date::from_ymd(2023, 12, 31);
    double base_volatility = 0.01;
    /// Volatility multiplier applied in the stressed regime.
    double stress_multiplier = 2.5;
    /// Row-stochastic calm/stressed transition matrix; state 0 is calm.
    std::array<std::array<double, 2>, 2> regime_transition{{{0.98, 0.02}, {0.10, 0.90}}};
    /// Expected events per year, indexed by RiskType.
    RiskVector event_rates{1.5, 2.0, 2.0, 2.0};
    /// crash: total simple return over the event; liquidity: volume drop fraction;
    /// operational: per-cell missing probability; volatility: volatility multiplier.
    RiskVector event_magnitude{-0.20, 0.7, 0.3, 3.0};
    std::array<int, kRiskTypeCount> event_duration{5, 10, 3, 15};
    /// Trading days before onset over which a precursor signal ramps up.
    int precursor_lead = 40;
    std::vector<PlantedEvent> planted;

    /// Throws ValidationError listing every violated field.
    void validate() const;
};

/// Every weekday in [start, end].
std::vector<Date> trading_days(Date start, Date end);

/// Deterministic synthetic market data: daily stock/forex/commodity/sentiment records on the
/// trading calendar, monthly macro records for each whole month, ordered by (timestamp, kind,
/// instrument). Active events are recorded in each daily record's label set.
RecordSet generate(const GeneratorSpec& spec);

struct SummaryRow {
    RecordKind kind;
    std::size_t sample_count = 0;
    std::size_t feature_count = 0;
    std::string granularity;
};

/// One row per kind present in `records`, in kind order.
std::vector<SummaryRow> summarize(const RecordSet& records);
/// Tab-separated table with thousands separators.
std::string format_summary(std::span<const SummaryRow> rows);

/// Combined CSV: `timestamp,instrument,kind,<union of fields>,labels`.
void write_records(const RecordSet& records, const std::filesystem::path& path);
void write_records(const RecordSet& records, std::ostream& out);
/// One `<kind>.csv` file per kind present.
void write_records_split(const RecordSet& records, const std::filesystem::path& dir);
/// Reads a combined or per-kind CSV file, or every `*.csv` in a directory.
RecordSet read_records(const std::filesystem::path& path);
RecordSet read_records(std::istream& in);

} // namespace riskwatch
