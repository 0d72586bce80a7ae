#include "riskwatch/datagen.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "riskwatch/rng.hpp"

namespace riskwatch {

namespace {

constexpr std::string_view kStockFields[] = {"open",   "high", "low",            "close",    "adj_close",
                                             "volume", "vwap", "bid_ask_spread", "turnover", "trade_count"};
constexpr std::string_view kForexFields[] = {"open", "high", "low", "close", "spread", "volume"};
constexpr std::string_view kCommodityFields[] = {"open", "high", "low", "close", "volume"};
constexpr std::string_view kMacroFields[] = {"gdp_growth", "cpi_yoy",  "unemployment", "policy_rate",
                                             "yield_10y",  "yield_2y", "pmi",          "m2_growth"};
constexpr std::string_view kSentimentFields[] = {"sentiment_score", "article_count", "sentiment_dispersion"};

constexpr std::string_view kForexNames[] = {"EURUSD", "USDJPY", "GBPUSD", "AUDUSD", "USDCAD", "USDCHF"};
constexpr std::string_view kCommodityNames[] = {"CL", "GC", "HG", "NG", "SI", "ZC"};

constexpr double kTradingDaysPerYear = 261.0;

std::string numbered(const char* prefix, int i, int width) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%0*d", prefix, width, i);
    return buf;
}

/// Per-trading-day drivers shared by every instrument.
struct MarketPath {
    std::vector<RiskMask> active;
    std::array<std::vector<double>, kRiskTypeCount> precursor; // ramp in [0, 1]
    std::vector<double> crash_drift;                           // log-return added on crash days
    std::vector<double> liquidity_drop;
    std::vector<double> missing_rate;
    std::vector<double> vol;
    std::vector<bool> stressed;
    std::vector<double> market_shock;
};

struct ScheduledEvent {
    RiskType type;
    std::size_t onset;
    int duration;
    double magnitude;
};

std::vector<ScheduledEvent> schedule_events(const GeneratorSpec& spec, const std::vector<Date>& days) {
    std::vector<ScheduledEvent> events;
    for (auto r : kAllRiskTypes) {
        const double rate = spec.event_rates[index(r)];
        if (rate <= 0.0) continue;
        Rng rng(spec.seed, 1000 + index(r));
        const double p = std::min(1.0, rate / kTradingDaysPerYear);
        const int duration = spec.event_duration[index(r)];
        std::size_t next_allowed = static_cast<std::size_t>(spec.precursor_lead);
        for (std::size_t d = 0; d < days.size(); ++d) {
            const bool fire = rng.bernoulli(p);
            if (d < next_allowed || !fire) continue;
            events.push_back({r, d, duration, spec.event_magnitude[index(r)]});
            next_allowed = d + static_cast<std::size_t>(duration + spec.precursor_lead);
        }
    }
    for (const auto& pe : spec.planted) {
        auto it = std::lower_bound(days.begin(), days.end(), pe.start);
        events.push_back({pe.type, static_cast<std::size_t>(it - days.begin()), pe.duration, pe.magnitude});
    }
    return events;
}

MarketPath simulate_market(const GeneratorSpec& spec, const std::vector<Date>& days) {
    const std::size_t n = days.size();
    MarketPath m;
    m.active.assign(n, RiskMask{});
    for (auto& p : m.precursor) p.assign(n, 0.0);
    m.crash_drift.assign(n, 0.0);
    m.liquidity_drop.assign(n, 0.0);
    m.missing_rate.assign(n, 0.0);
    m.vol.assign(n, 0.0);
    m.stressed.assign(n, false);
    m.market_shock.assign(n, 0.0);

    std::vector<double> vol_event(n, 1.0);
    const int lead = spec.precursor_lead;
    for (const auto& ev : schedule_events(spec, days)) {
        const auto r = index(ev.type);
        for (int k = 1; k <= lead; ++k) {
            if (ev.onset < static_cast<std::size_t>(k)) break;
            const std::size_t d = ev.onset - static_cast<std::size_t>(k);
            const double ramp = static_cast<double>(lead - k + 1) / lead;
            m.precursor[r][d] = std::max(m.precursor[r][d], ramp);
        }
        for (int k = 0; k < ev.duration; ++k) {
            const std::size_t d = ev.onset + static_cast<std::size_t>(k);
            if (d >= n) break;
            m.active[d].set(ev.type);
            m.precursor[r][d] = 1.0;
            switch (ev.type) {
            case RiskType::market_crash: m.crash_drift[d] += std::log1p(ev.magnitude) / ev.duration; break;
            case RiskType::liquidity: m.liquidity_drop[d] = std::max(m.liquidity_drop[d], ev.magnitude); break;
            case RiskType::operational: m.missing_rate[d] = std::max(m.missing_rate[d], ev.magnitude); break;
            case RiskType::volatility: vol_event[d] = std::max(vol_event[d], ev.magnitude); break;
            }
        }
    }

    Rng regime_rng(spec.seed, 1);
    Rng shock_rng(spec.seed, 2);
    int state = 0;
    for (std::size_t d = 0; d < n; ++d) {
        if (d > 0) state = regime_rng.uniform() < spec.regime_transition[state][0] ? 0 : 1;
        const bool vol_active = m.active[d].test(RiskType::volatility);
        m.stressed[d] = state == 1 || vol_active;
        const double crash_pre = m.precursor[index(RiskType::market_crash)][d];
        const double vol_pre = m.precursor[index(RiskType::volatility)][d];
        m.vol[d] = spec.base_volatility * (m.stressed[d] ? spec.stress_multiplier : 1.0) * vol_event[d] *
                   (1.0 + 0.5 * vol_pre) * (1.0 + 0.5 * crash_pre);
        m.missing_rate[d] = std::max(m.missing_rate[d], 0.03 * m.precursor[index(RiskType::operational)][d]);
        m.market_shock[d] = shock_rng.normal();
    }
    return m;
}

Record make_record(Date t, std::string instrument, RecordKind kind, RiskMask labels) {
    Record r;
    r.timestamp = t;
    r.instrument = std::move(instrument);
    r.kind = kind;
    r.values.assign(kind_fields(kind).size(), 0.0);
    r.labels = labels;
    return r;
}

/// Applies operational missing/outlier damage to a daily record.
void damage(Record& rec, double missing_rate, Rng& rng, int outlier_field) {
    for (auto& v : rec.values) {
        const double u = rng.uniform();
        if (u < missing_rate) v = kMissing;
    }
    const double u = rng.uniform();
    if (outlier_field >= 0 && u < missing_rate / 3.0 && !std::isnan(rec.values[outlier_field]))
        rec.values[outlier_field] *= 10.0;
}

} // namespace

std::string_view to_string(RecordKind k) {
    switch (k) {
    case RecordKind::stock: return "stock";
    case RecordKind::forex: return "forex";
    case RecordKind::commodity: return "commodity";
    case RecordKind::macro: return "macro";
    case RecordKind::sentiment: return "sentiment";
    }
    return "unknown";
}

RecordKind parse_record_kind(std::string_view name) {
    for (auto k : kAllRecordKinds)
        if (to_string(k) == name) return k;
    throw ParseError("unknown record kind '" + std::string(name) + "'");
}

std::span<const std::string_view> kind_fields(RecordKind k) {
    switch (k) {
    case RecordKind::stock: return kStockFields;
    case RecordKind::forex: return kForexFields;
    case RecordKind::commodity: return kCommodityFields;
    case RecordKind::macro: return kMacroFields;
    case RecordKind::sentiment: return kSentimentFields;
    }
    return {};
}

int field_index(RecordKind k, std::string_view field) {
    auto fields = kind_fields(k);
    auto it = std::find(fields.begin(), fields.end(), field);
    return it == fields.end() ? -1 : static_cast<int>(it - fields.begin());
}

bool is_monthly(RecordKind k) { return k == RecordKind::macro; }

double Record::get(std::string_view field) const {
    const int i = field_index(kind, field);
    return i < 0 ? kMissing : values[static_cast<std::size_t>(i)];
}

bool operator==(const Record& a, const Record& b) {
    if (a.timestamp != b.timestamp || a.instrument != b.instrument || a.kind != b.kind || a.labels != b.labels ||
        a.values.size() != b.values.size())
        return false;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        const bool na = std::isnan(a.values[i]), nb = std::isnan(b.values[i]);
        if (na != nb || (!na && a.values[i] != b.values[i])) return false;
    }
    return true;
}

void GeneratorSpec::validate() const {
    std::vector<std::string> problems;
    if (n_instruments < 1) problems.push_back("n_instruments: must be >= 1");
    if (n_forex < 0) problems.push_back("n_forex: must be >= 0");
    if (n_commodities < 0) problems.push_back("n_commodities: must be >= 0");
    if (!(start_date < end_date)) problems.push_back("start_date: must precede end_date");
    if (!(base_volatility >= 0.0) || !std::isfinite(base_volatility))
        problems.push_back("base_volatility: must be finite and >= 0");
    if (!(stress_multiplier > 0.0) || !std::isfinite(stress_multiplier))
        problems.push_back("stress_multiplier: must be finite and > 0");
    for (std::size_t row = 0; row < 2; ++row) {
        const auto& p = regime_transition[row];
        if (p[0] < 0 || p[1] < 0 || std::abs(p[0] + p[1] - 1.0) > 1e-12)
            problems.push_back("regime_transition: row " + std::to_string(row) +
                               " must be non-negative and sum to 1");
    }
    for (auto r : kAllRiskTypes) {
        const auto name = std::string(to_string(r));
        if (!(event_rates[index(r)] >= 0.0) || !std::isfinite(event_rates[index(r)]))
            problems.push_back("event_rates." + name + ": must be finite and >= 0");
        if (!std::isfinite(event_magnitude[index(r)])) problems.push_back("event_magnitude." + name + ": not finite");
        if (event_duration[index(r)] < 1) problems.push_back("event_duration." + name + ": must be >= 1");
    }
    if (!(event_magnitude[index(RiskType::market_crash)] > -1.0))
        problems.push_back("event_magnitude.market_crash: must be > -1");
    if (precursor_lead < 0) problems.push_back("precursor_lead: must be >= 0");
    for (std::size_t i = 0; i < planted.size(); ++i) {
        const auto& pe = planted[i];
        const auto tag = "planted[" + std::to_string(i) + "]";
        if (pe.duration < 1) problems.push_back(tag + ".duration: must be >= 1");
        if (pe.start < start_date || pe.start > end_date) problems.push_back(tag + ".start: outside date range");
        if (pe.type == RiskType::market_crash && !(pe.magnitude > -1.0))
            problems.push_back(tag + ".magnitude: crash magnitude must be > -1");
    }
    if (problems.empty()) return;
    std::string msg = "invalid generator spec:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError(msg);
}

std::vector<Date> trading_days(Date start, Date end) {
    std::vector<Date> out;
    for (Date d = start; d <= end; d = d + 1)
        if (d.is_weekday()) out.push_back(d);
    return out;
}

RecordSet generate(const GeneratorSpec& spec) {
    spec.validate();
    const auto days = trading_days(spec.start_date, spec.end_date);
    if (days.size() < 2) throw ValidationError("date range yields fewer than 2 trading days");
    const std::size_t n = days.size();
    const MarketPath m = simulate_market(spec, days);
    const auto crash = index(RiskType::market_crash);
    const auto liq = index(RiskType::liquidity);
    const auto vol = index(RiskType::volatility);
    const auto op = index(RiskType::operational);

    // Daily series per instrument, indexed [instrument][day].
    std::vector<std::vector<Record>> stocks(static_cast<std::size_t>(spec.n_instruments));
    for (int i = 0; i < spec.n_instruments; ++i) {
        Rng rng(spec.seed, 100 + static_cast<std::uint64_t>(i));
        const double price0 = rng.uniform(50.0, 150.0);
        const double base_volume = rng.uniform(1e5, 1e6);
        const double base_spread = rng.uniform(0.0005, 0.002);
        const double beta = 0.6, idio = 0.8;
        const auto name = numbered("STK", i + 1, 4);
        double prev = price0;
        auto& series = stocks[static_cast<std::size_t>(i)];
        series.reserve(n);
        for (std::size_t d = 0; d < n; ++d) {
            const double eps = rng.normal(), n1 = rng.normal(), n2 = rng.normal(), n3 = rng.normal();
            const double n4 = rng.normal(), n5 = rng.normal();
            const double sigma = m.vol[d] * (1.0 + m.precursor[vol][d]);
            const double ret = m.vol[d] * beta * m.market_shock[d] + sigma * idio * eps + m.crash_drift[d];
            const double open = prev * std::exp(0.2 * m.vol[d] * n1);
            const double close = prev * std::exp(ret);
            const double high = std::max(open, close) * std::exp(0.5 * m.vol[d] * std::abs(n2));
            const double low = std::min(open, close) * std::exp(-0.5 * m.vol[d] * std::abs(n3));
            const double volume = base_volume * std::exp(0.25 * n4) * (1.0 - 0.3 * m.precursor[liq][d]) *
                                  (1.0 - m.liquidity_drop[d]) * (m.stressed[d] ? 1.5 : 1.0);
            const double vwap = (high + low + close) / 3.0;
            const double spread = base_spread * std::exp(0.1 * n5) *
                                  (1.0 + m.precursor[liq][d] + 4.0 * m.liquidity_drop[d]) *
                                  (m.stressed[d] ? 1.5 : 1.0);
            Record rec = make_record(days[d], name, RecordKind::stock, m.active[d]);
            rec.values = {open, high, low, close, close, volume, vwap, spread, volume * vwap, std::round(volume / 100)};
            damage(rec, m.missing_rate[d], rng, 5);
            series.push_back(std::move(rec));
            prev = close;
        }
    }

    auto fx_like = [&](int count, std::span<const std::string_view> names, const char* prefix, RecordKind kind,
                       std::uint64_t stream_base, double vol_scale, double market_beta, double crash_beta) {
        std::vector<std::vector<Record>> out(static_cast<std::size_t>(count));
        for (int j = 0; j < count; ++j) {
            Rng rng(spec.seed, stream_base + static_cast<std::uint64_t>(j));
            const double level0 = kind == RecordKind::forex ? rng.uniform(0.8, 1.5) : rng.uniform(20.0, 2000.0);
            const double base_volume = rng.uniform(1e4, 1e5);
            const auto name = static_cast<std::size_t>(j) < names.size() ? std::string(names[static_cast<std::size_t>(j)])
                                                                        : numbered(prefix, j + 1, 2);
            double prev = level0;
            auto& series = out[static_cast<std::size_t>(j)];
            series.reserve(n);
            for (std::size_t d = 0; d < n; ++d) {
                const double e = rng.normal(), n1 = rng.normal(), n2 = rng.normal(), n3 = rng.normal();
                const double n4 = rng.normal();
                const double s = vol_scale * m.vol[d];
                const double ret = s * (market_beta * m.market_shock[d] + e) + crash_beta * m.crash_drift[d];
                const double open = prev * std::exp(0.2 * s * n1);
                const double close = prev * std::exp(ret);
                const double high = std::max(open, close) * std::exp(0.5 * s * std::abs(n2));
                const double low = std::min(open, close) * std::exp(-0.5 * s * std::abs(n3));
                const double volume = base_volume * std::exp(0.2 * n4) * (m.stressed[d] ? 1.3 : 1.0);
                Record rec = make_record(days[d], name, kind, m.active[d]);
                if (kind == RecordKind::forex)
                    rec.values = {open, high, low, close, 1e-4 * (m.stressed[d] ? 2.0 : 1.0) * std::exp(0.1 * n4),
                                  volume};
                else
                    rec.values = {open, high, low, close, volume};
                series.push_back(std::move(rec));
                prev = close;
            }
        }
        return out;
    };
    auto forex = fx_like(spec.n_forex, kForexNames, "FX", RecordKind::forex, 10000, 0.5, 0.2, -0.2);
    auto commodities =
        fx_like(spec.n_commodities, kCommodityNames, "CMD", RecordKind::commodity, 20000, 1.5, 0.4, 0.5);

    std::vector<Record> news;
    {
        Rng rng(spec.seed, 30000);
        news.reserve(n);
        for (std::size_t d = 0; d < n; ++d) {
            const double n1 = rng.normal(), n2 = rng.normal(), n3 = rng.normal();
            const double crash_active = m.active[d].test(RiskType::market_crash) ? 1.0 : 0.0;
            const double score = 0.1 + 0.25 * n1 - 1.2 * m.precursor[crash][d] - 0.3 * (m.stressed[d] ? 1.0 : 0.0) -
                                 1.0 * crash_active - 0.3 * m.precursor[liq][d];
            const double count = std::round(200.0 *
                                            (1.0 + 0.5 * m.precursor[crash][d] + 0.3 * m.precursor[liq][d] +
                                             0.1 * m.precursor[op][d]) *
                                            std::exp(0.15 * n2));
            const double dispersion = 0.3 + 0.05 * n3 + 0.3 * m.precursor[crash][d] + 0.2 * m.precursor[vol][d];
            Record rec = make_record(days[d], "NEWS", RecordKind::sentiment, m.active[d]);
            rec.values = {score, count, dispersion};
            news.push_back(std::move(rec));
        }
    }

    // Monthly macro series for each whole month, stamped on the month's last calendar day.
    std::vector<Record> macro;
    {
        Rng rng(spec.seed, 40000);
        static constexpr double mean[] = {2.0, 2.5, 5.0, 2.0, 3.0, 2.0, 52.0, 6.0};
        static constexpr double sd[] = {0.3, 0.2, 0.2, 0.1, 0.15, 0.15, 1.5, 0.5};
        static constexpr double stress_effect[] = {-1.0, 0.3, 0.8, -0.3, -0.4, -0.5, -4.0, 1.0};
        std::array<double, 8> x{};
        std::copy(std::begin(mean), std::end(mean), x.begin());
        Date first = spec.start_date.day() == 1 ? spec.start_date : spec.start_date.last_of_month() + 1;
        std::size_t cursor = 0;
        for (Date month = first; month.last_of_month() <= spec.end_date; month = month.last_of_month() + 1) {
            const Date stamp = month.last_of_month();
            std::size_t total = 0, stressed = 0;
            while (cursor < n && days[cursor] <= stamp) {
                if (days[cursor] >= month) {
                    ++total;
                    stressed += m.stressed[cursor] ? 1 : 0;
                }
                ++cursor;
            }
            const double frac = total ? static_cast<double>(stressed) / static_cast<double>(total) : 0.0;
            Record rec = make_record(stamp, "MACRO", RecordKind::macro, RiskMask{});
            for (std::size_t f = 0; f < 8; ++f) {
                x[f] = mean[f] + 0.8 * (x[f] - mean[f]) + sd[f] * rng.normal() + stress_effect[f] * frac * 0.5;
                rec.values[f] = x[f];
            }
            macro.push_back(std::move(rec));
        }
    }

    RecordSet out;
    out.reserve(n * static_cast<std::size_t>(spec.n_instruments + spec.n_forex + spec.n_commodities + 1) +
                macro.size());
    for (std::size_t d = 0; d < n; ++d) {
        for (auto& s : stocks) out.push_back(std::move(s[d]));
        for (auto& s : forex) out.push_back(std::move(s[d]));
        for (auto& s : commodities) out.push_back(std::move(s[d]));
        out.push_back(std::move(news[d]));
    }
    for (auto& rec : macro) out.push_back(std::move(rec));
    std::stable_sort(out.begin(), out.end(), [](const Record& a, const Record& b) {
        if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
        if (a.kind != b.kind) return a.kind < b.kind;
        return a.instrument < b.instrument;
    });
    return out;
}

std::vector<SummaryRow> summarize(const RecordSet& records) {
    if (records.empty()) throw ValidationError("summarize: empty record set");
    std::array<std::size_t, kAllRecordKinds.size()> counts{};
    for (const auto& r : records) ++counts[static_cast<std::size_t>(r.kind)];
    std::vector<SummaryRow> rows;
    for (auto k : kAllRecordKinds) {
        const auto c = counts[static_cast<std::size_t>(k)];
        if (c == 0) continue;
        rows.push_back({k, c, kind_fields(k).size(), is_monthly(k) ? "Monthly" : "Daily"});
    }
    return rows;
}

std::string format_summary(std::span<const SummaryRow> rows) {
    auto label = [](RecordKind k) -> std::string_view {
        switch (k) {
        case RecordKind::stock: return "Stock data";
        case RecordKind::forex: return "Forex data";
        case RecordKind::commodity: return "Commodity futures";
        case RecordKind::macro: return "Macroeconomic indicators";
        case RecordKind::sentiment: return "News sentiment";
        }
        return "";
    };
    auto grouped = [](std::size_t v) {
        std::string s = std::to_string(v);
        for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
        return s;
    };
    std::ostringstream os;
    os << "Data Type\tSample Count\tFeature Count\tTime Granularity\n";
    for (const auto& r : rows)
        os << label(r.kind) << '\t' << grouped(r.sample_count) << '\t' << r.feature_count << '\t' << r.granularity
           << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::vector<std::string_view> header_fields(const RecordSet& records) {
    std::array<bool, kAllRecordKinds.size()> present{};
    for (const auto& r : records) present[static_cast<std::size_t>(r.kind)] = true;
    std::vector<std::string_view> fields;
    for (auto k : kAllRecordKinds) {
        if (!present[static_cast<std::size_t>(k)]) continue;
        for (auto f : kind_fields(k))
            if (std::find(fields.begin(), fields.end(), f) == fields.end()) fields.push_back(f);
    }
    return fields;
}

std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> cells;
    while (true) {
        auto comma = line.find(',');
        cells.push_back(line.substr(0, comma));
        if (comma == std::string_view::npos) break;
        line.remove_prefix(comma + 1);
    }
    return cells;
}

} // namespace

void write_records(const RecordSet& records, std::ostream& out) {
    const auto fields = header_fields(records);
    out << "timestamp,instrument,kind";
    for (auto f : fields) out << ',' << f;
    out << ",labels\n";
    std::vector<int> column_of(fields.size());
    std::string line;
    for (const auto& r : records) {
        if (r.instrument.find_first_of(",\n") != std::string::npos)
            throw ValidationError("instrument identifier contains a separator: " + r.instrument);
        line.clear();
        line += r.timestamp.iso();
        line += ',';
        line += r.instrument;
        line += ',';
        line += to_string(r.kind);
        for (auto f : fields) {
            line += ',';
            const int i = field_index(r.kind, f);
            if (i >= 0 && !r.missing(static_cast<std::size_t>(i))) line += format_double(r.values[static_cast<std::size_t>(i)]);
        }
        line += ',';
        line += r.labels.str();
        line += '\n';
        out << line;
    }
    if (!out) throw IoError("write failed");
}

void write_records(const RecordSet& records, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    write_records(records, out);
}

void write_records_split(const RecordSet& records, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (auto k : kAllRecordKinds) {
        RecordSet part;
        for (const auto& r : records)
            if (r.kind == k) part.push_back(r);
        if (!part.empty()) write_records(part, dir / (std::string(to_string(k)) + ".csv"));
    }
}

RecordSet read_records(std::istream& in) {
    std::string line;
    std::size_t line_no = 1;
    if (!std::getline(in, line)) throw ParseError("missing header row", 1);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string header_line = line;
    const auto header = split_csv(header_line);
    if (header.size() < 4 || header[0] != "timestamp" || header[1] != "instrument" || header[2] != "kind" ||
        header.back() != "labels")
        throw ParseError("header must be timestamp,instrument,kind,<fields...>,labels", 1);

    // Column index of each schema field, per kind (-1 when the header lacks it).
    std::array<std::vector<int>, kAllRecordKinds.size()> columns;
    for (auto k : kAllRecordKinds) {
        for (auto f : kind_fields(k)) {
            auto it = std::find(header.begin() + 3, header.end() - 1, f);
            columns[static_cast<std::size_t>(k)].push_back(it == header.end() - 1 ? -1
                                                                                   : static_cast<int>(it - header.begin()));
        }
    }

    RecordSet out;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cells = split_csv(line);
        if (cells.size() != header.size())
            throw ParseError("expected " + std::to_string(header.size()) + " cells, found " +
                                 std::to_string(cells.size()),
                             line_no);
        Record r;
        try {
            r.timestamp = Date::parse(cells[0]);
            r.kind = parse_record_kind(cells[2]);
            r.labels = RiskMask::parse(cells.back());
        } catch (const ParseError& e) {
            throw ParseError(e.what(), line_no);
        }
        if (cells[1].empty()) throw ParseError("empty instrument", line_no);
        r.instrument = std::string(cells[1]);
        const auto& cols = columns[static_cast<std::size_t>(r.kind)];
        const auto fields = kind_fields(r.kind);
        r.values.resize(fields.size());
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (cols[i] < 0)
                throw ParseError("header lacks field '" + std::string(fields[i]) + "' required by kind " +
                                     std::string(to_string(r.kind)),
                                 line_no);
            const auto cell = cells[static_cast<std::size_t>(cols[i])];
            if (cell.empty()) {
                r.values[i] = kMissing;
                continue;
            }
            auto v = parse_double(cell);
            if (!v || !std::isfinite(*v))
                throw ParseError("non-numeric value '" + std::string(cell) + "' in field '" + std::string(fields[i]) +
                                     "'",
                                 line_no);
            r.values[i] = *v;
        }
        out.push_back(std::move(r));
    }
    return out;
}

RecordSet read_records(const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    if (fs::is_directory(path)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(path))
            if (e.path().extension() == ".csv") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        RecordSet all;
        for (const auto& f : files) {
            auto part = read_records(f);
            all.insert(all.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
        }
        std::stable_sort(all.begin(), all.end(), [](const Record& a, const Record& b) {
            if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
            if (a.kind != b.kind) return a.kind < b.kind;
            return a.instrument < b.instrument;
        });
        return all;
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return read_records(in);
}

} // namespace riskwatch
