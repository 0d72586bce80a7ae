#include "riskwatch/common.hpp"

#include <charconv>
#include <chrono>
#include <cstdio>

namespace riskwatch {

namespace chr = std::chrono;

namespace {
chr::year_month_day ymd_of(Date d) { return chr::year_month_day{chr::sys_days{chr::days{d.days}}}; }

Date from_sys(chr::sys_days s) { return Date{static_cast<std::int32_t>(s.time_since_epoch().count())}; }
} // namespace

Date Date::from_ymd(int year, unsigned month, unsigned day) {
    chr::year_month_day ymd{chr::year{year}, chr::month{month}, chr::day{day}};
    if (!ymd.ok())
        throw ValidationError("invalid calendar date " + std::to_string(year) + "-" + std::to_string(month) + "-" +
                              std::to_string(day));
    return from_sys(chr::sys_days{ymd});
}

Date Date::parse(std::string_view iso) {
    auto bad = [&] { return ParseError("invalid ISO-8601 date '" + std::string(iso) + "'"); };
    if (iso.size() < 10 || iso[4] != '-' || iso[7] != '-') throw bad();
    if (iso.size() > 10 && iso[10] != 'T' && iso[10] != ' ') throw bad();
    int y = 0;
    unsigned m = 0, d = 0;
    auto num = [&](std::string_view s, auto& out) {
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
        if (ec != std::errc{} || p != s.data() + s.size()) throw bad();
    };
    num(iso.substr(0, 4), y);
    num(iso.substr(5, 2), m);
    num(iso.substr(8, 2), d);
    chr::year_month_day ymd{chr::year{y}, chr::month{m}, chr::day{d}};
    if (!ymd.ok()) throw bad();
    return from_sys(chr::sys_days{ymd});
}

int Date::year() const { return static_cast<int>(ymd_of(*this).year()); }
unsigned Date::month() const { return static_cast<unsigned>(ymd_of(*this).month()); }
unsigned Date::day() const { return static_cast<unsigned>(ymd_of(*this).day()); }

unsigned Date::weekday() const { return chr::weekday{chr::sys_days{chr::days{days}}}.c_encoding(); }

Date Date::last_of_month() const {
    auto ymd = ymd_of(*this);
    return from_sys(chr::sys_days{chr::year_month_day_last{ymd.year(), chr::month_day_last{ymd.month()}}});
}

std::string Date::iso() const {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", year(), month(), day());
    return buf;
}

Date Date::from_epoch_ms(std::int64_t ms) {
    auto d = ms >= 0 ? ms / 86'400'000 : -((-ms + 86'399'999) / 86'400'000);
    return Date{static_cast<std::int32_t>(d)};
}

std::string_view to_string(RiskType r) {
    switch (r) {
    case RiskType::market_crash: return "market_crash";
    case RiskType::liquidity: return "liquidity";
    case RiskType::operational: return "operational";
    case RiskType::volatility: return "volatility";
    }
    return "unknown";
}

std::optional<RiskType> try_parse_risk_type(std::string_view name) {
    for (auto r : kAllRiskTypes)
        if (to_string(r) == name) return r;
    return std::nullopt;
}

RiskType parse_risk_type(std::string_view name) {
    if (auto r = try_parse_risk_type(name)) return *r;
    throw ParseError("unknown risk type '" + std::string(name) + "'");
}

std::string RiskMask::str() const {
    std::string out;
    for (auto r : kAllRiskTypes) {
        if (!test(r)) continue;
        if (!out.empty()) out += '|';
        out += to_string(r);
    }
    return out;
}

RiskMask RiskMask::parse(std::string_view text) {
    RiskMask m;
    while (!text.empty()) {
        auto bar = text.find('|');
        m.set(parse_risk_type(text.substr(0, bar)));
        if (bar == std::string_view::npos) break;
        text.remove_prefix(bar + 1);
    }
    return m;
}

std::string format_double(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

std::optional<double> parse_double(std::string_view s) {
    double v = 0;
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) return std::nullopt;
    return v;
}

} // namespace riskwatch
