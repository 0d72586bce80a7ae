#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace riskwatch {

/// Raised when an input violates a documented precondition.
class ValidationError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed external data; carries the 1-based line number when known.
class ParseError : public std::runtime_error {
  public:
    ParseError(const std::string& what, std::size_t line = 0)
        : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

  private:
    std::size_t line_;
};

class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Calendar date stored as days since 1970-01-01.
struct Date {
    std::int32_t days = 0;

    static Date from_ymd(int year, unsigned month, unsigned day);
    /// Parses `YYYY-MM-DD` (an optional `THH:MM:SS...` suffix is ignored).
    static Date parse(std::string_view iso);

    int year() const;
    unsigned month() const;
    unsigned day() const;
    /// 0 = Sunday ... 6 = Saturday.
    unsigned weekday() const;
    bool is_weekday() const { return weekday() != 0 && weekday() != 6; }
    Date last_of_month() const;
    std::string iso() const;

    /// Milliseconds since the epoch at 00:00 UTC of this date.
    std::int64_t epoch_ms() const { return std::int64_t{days} * 86'400'000; }
    static Date from_epoch_ms(std::int64_t ms);

    Date operator+(int n) const { return Date{days + n}; }
    Date operator-(int n) const { return Date{days - n}; }
    int operator-(Date other) const { return days - other.days; }
    auto operator<=>(const Date&) const = default;
};

enum class RiskType : std::uint8_t { market_crash = 0, liquidity = 1, operational = 2, volatility = 3 };

inline constexpr std::size_t kRiskTypeCount = 4;
inline constexpr std::array<RiskType, kRiskTypeCount> kAllRiskTypes = {
    RiskType::market_crash, RiskType::liquidity, RiskType::operational, RiskType::volatility};

std::string_view to_string(RiskType r);
RiskType parse_risk_type(std::string_view name);
std::optional<RiskType> try_parse_risk_type(std::string_view name);

/// Set of risk types, one bit per RiskType.
struct RiskMask {
    std::uint8_t bits = 0;

    bool test(RiskType r) const { return bits & (1u << static_cast<unsigned>(r)); }
    void set(RiskType r) { bits |= static_cast<std::uint8_t>(1u << static_cast<unsigned>(r)); }
    bool empty() const { return bits == 0; }
    RiskMask operator|(RiskMask o) const { return RiskMask{static_cast<std::uint8_t>(bits | o.bits)}; }
    auto operator<=>(const RiskMask&) const = default;

    /// `|`-separated names in RiskType order; empty string for the empty set.
    std::string str() const;
    static RiskMask parse(std::string_view text);
};

/// Per-risk-type values, indexed by RiskType.
using RiskVector = std::array<double, kRiskTypeCount>;

inline std::size_t index(RiskType r) { return static_cast<std::size_t>(r); }

/// Formats a double with the shortest representation that round-trips.
std::string format_double(double v);
/// Strict full-string parse; nullopt on any trailing garbage.
std::optional<double> parse_double(std::string_view s);

} // namespace riskwatch
