#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "riskwatch/datagen.hpp"
#include "support.hpp"

using namespace riskwatch;

namespace {

GeneratorSpec small_spec() {
    GeneratorSpec s;
    s.n_instruments = 3;
    s.n_forex = 1;
    s.n_commodities = 1;
    s.start_date = Date::from_ymd(2020, 1, 1);
    s.end_date = Date::from_ymd(2020, 12, 31);
    return s;
}

std::string to_csv(const RecordSet& r) {
    std::ostringstream os;
    write_records(r, os);
    return os.str();
}

std::map<std::string, std::vector<double>> closes_by_instrument(const RecordSet& records, RecordKind kind) {
    std::map<std::string, std::vector<double>> out;
    for (const auto& r : records)
        if (r.kind == kind) out[r.instrument].push_back(r.get("close"));
    return out;
}

} // namespace

TEST_SUITE("common") {
    TEST_CASE("date arithmetic and parsing") {
        const Date d = Date::from_ymd(2024, 2, 29);
        CHECK(d.iso() == "2024-02-29");
        CHECK(Date::parse("2024-02-29") == d);
        CHECK(Date::parse("2024-02-29T13:00:00Z") == d);
        CHECK(d.weekday() == 4);
        CHECK(d.last_of_month() == d);
        CHECK(Date::from_ymd(2023, 2, 3).last_of_month() == Date::from_ymd(2023, 2, 28));
        CHECK(Date::from_epoch_ms(d.epoch_ms() + 5) == d);
        CHECK(Date::from_epoch_ms(-1) == Date::from_ymd(1969, 12, 31));
        CHECK_THROWS_AS(Date::parse("2024-13-01"), ParseError);
        CHECK_THROWS_AS(Date::parse("yesterday"), ParseError);
    }

    TEST_CASE("risk types round-trip") {
        for (auto r : kAllRiskTypes) CHECK(parse_risk_type(to_string(r)) == r);
        CHECK_FALSE(try_parse_risk_type("meteor"));
        RiskMask m;
        m.set(RiskType::liquidity);
        m.set(RiskType::volatility);
        CHECK(m.str() == "liquidity|volatility");
        CHECK(RiskMask::parse(m.str()) == m);
        CHECK(RiskMask::parse("").empty());
        CHECK_THROWS(RiskMask::parse("liquidity|nope"));
    }

    TEST_CASE("double formatting round-trips") {
        for (double v : {0.1, -1e-300, 123456.789, 1.0 / 3.0}) CHECK(*parse_double(format_double(v)) == v);
        CHECK_FALSE(parse_double("1.5x"));
        CHECK_FALSE(parse_double(""));
    }
}

TEST_SUITE("datagen") {
    TEST_CASE("generation is deterministic") {
        const auto spec = small_spec();
        const auto a = generate(spec);
        const auto b = generate(spec);
        CHECK(a == b);
        CHECK(to_csv(a) == to_csv(b));
        auto other = spec;
        other.seed = 43;
        CHECK(to_csv(generate(other)) != to_csv(a));
    }

    TEST_CASE("zero volatility and no events give constant closes") {
        auto spec = small_spec();
        spec.base_volatility = 0.0;
        spec.event_rates = {0, 0, 0, 0};
        const auto records = generate(spec);
        for (auto kind : {RecordKind::stock, RecordKind::forex, RecordKind::commodity}) {
            const auto closes = closes_by_instrument(records, kind);
            REQUIRE_FALSE(closes.empty());
            for (const auto& [id, series] : closes)
                for (double c : series) CHECK(c == series.front());
        }
        for (const auto& r : records) CHECK(r.labels.empty());
    }

    TEST_CASE("planted crash produces the configured drawdown over its labeled window") {
        for (double vol : {0.01, 0.001}) {
            auto spec = small_spec();
            spec.base_volatility = vol;
            spec.event_rates = {0, 0, 0, 0};
            const Date start = Date::from_ymd(2020, 6, 1);
            spec.planted.push_back({RiskType::market_crash, start, 5, -0.20});
            const auto records = generate(spec);

            std::set<Date> labeled;
            for (const auto& r : records)
                if (r.kind == RecordKind::stock && r.labels.test(RiskType::market_crash)) labeled.insert(r.timestamp);
            REQUIRE(labeled.size() == 5);
            CHECK(*labeled.begin() == start);

            // Independent recomputation from the emitted closes.
            std::map<std::string, std::map<Date, double>> close;
            for (const auto& r : records)
                if (r.kind == RecordKind::stock) close[r.instrument][r.timestamp] = r.get("close");
            double mean_cum = 0.0;
            for (auto& [id, series] : close) {
                auto first = series.find(*labeled.begin());
                REQUIRE(first != series.begin());
                const double before = std::prev(first)->second;
                const double after = series.at(*labeled.rbegin());
                const double cum = std::log(after / before);
                mean_cum += cum / double(close.size());
                if (vol < 0.005) CHECK(cum <= -0.15);
            }
            CHECK(mean_cum <= -0.15);
        }
    }

    TEST_CASE("planted events are labeled exactly over their dates") {
        auto spec = small_spec();
        spec.event_rates = {0, 0, 0, 0};
        const Date liq = Date::from_ymd(2020, 3, 2);
        const Date op = Date::from_ymd(2020, 9, 14);
        spec.planted.push_back({RiskType::liquidity, liq, 10, 0.7});
        spec.planted.push_back({RiskType::operational, op, 3, 0.3});
        const auto days = trading_days(spec.start_date, spec.end_date);
        auto expected = [&](Date d, Date start, int duration) {
            auto it = std::find(days.begin(), days.end(), start);
            const auto pos = std::find(days.begin(), days.end(), d);
            return pos >= it && pos < it + duration;
        };
        for (const auto& r : generate(spec)) {
            if (r.kind == RecordKind::macro) {
                CHECK(r.labels.empty());
                continue;
            }
            CHECK(r.labels.test(RiskType::liquidity) == expected(r.timestamp, liq, 10));
            CHECK(r.labels.test(RiskType::operational) == expected(r.timestamp, op, 3));
            CHECK_FALSE(r.labels.test(RiskType::market_crash));
            CHECK_FALSE(r.labels.test(RiskType::volatility));
        }
    }

    TEST_CASE("liquidity and operational events perturb their fields") {
        auto spec = small_spec();
        spec.event_rates = {0, 0, 0, 0};
        spec.planted.push_back({RiskType::liquidity, Date::from_ymd(2020, 3, 2), 10, 0.7});
        spec.planted.push_back({RiskType::operational, Date::from_ymd(2020, 9, 14), 3, 0.9});
        double vol_in = 0, vol_out = 0, spr_in = 0, spr_out = 0;
        int n_in = 0, n_out = 0, missing_in = 0, missing_out = 0;
        for (const auto& r : generate(spec)) {
            if (r.kind != RecordKind::stock) continue;
            if (r.labels.test(RiskType::operational)) {
                for (std::size_t i = 0; i < r.values.size(); ++i) missing_in += r.missing(i);
                continue;
            }
            for (std::size_t i = 0; i < r.values.size(); ++i) missing_out += r.missing(i);
            if (r.labels.test(RiskType::liquidity)) {
                vol_in += r.get("volume"), spr_in += r.get("bid_ask_spread"), ++n_in;
            } else if (!std::isnan(r.get("volume")) && !std::isnan(r.get("bid_ask_spread"))) {
                vol_out += r.get("volume"), spr_out += r.get("bid_ask_spread"), ++n_out;
            }
        }
        CHECK(vol_in / n_in < 0.6 * vol_out / n_out);
        CHECK(spr_in / n_in > 1.5 * spr_out / n_out);
        CHECK(missing_in > 10);
        CHECK(double(missing_out) / (n_out + n_in) < 0.1 * double(missing_in) / 9.0);
    }

    TEST_CASE("granularity: daily kinds per trading day, macro per whole month") {
        const auto spec = small_spec();
        const auto records = generate(spec);
        const auto days = trading_days(spec.start_date, spec.end_date);
        CHECK(days.size() == 262);
        for (Date d : days) CHECK(d.is_weekday());
        std::map<RecordKind, std::size_t> count;
        for (const auto& r : records) ++count[r.kind];
        CHECK(count[RecordKind::stock] == days.size() * 3);
        CHECK(count[RecordKind::forex] == days.size());
        CHECK(count[RecordKind::commodity] == days.size());
        CHECK(count[RecordKind::sentiment] == days.size());
        CHECK(count[RecordKind::macro] == 12);
        for (const auto& r : records) {
            CHECK(r.values.size() == kind_fields(r.kind).size());
            if (r.kind == RecordKind::macro) CHECK(r.timestamp == r.timestamp.last_of_month());
        }

        auto partial = spec;
        partial.start_date = Date::from_ymd(2020, 1, 15);
        partial.end_date = Date::from_ymd(2020, 4, 10);
        std::size_t macro = 0;
        for (const auto& r : generate(partial)) macro += r.kind == RecordKind::macro;
        CHECK(macro == 2); // February and March
    }

    TEST_CASE("records are ordered by timestamp") {
        const auto records = generate(small_spec());
        for (std::size_t i = 1; i < records.size(); ++i) CHECK(records[i - 1].timestamp <= records[i].timestamp);
    }

    TEST_CASE("invalid specs are reported field by field") {
        auto spec = small_spec();
        spec.n_instruments = 0;
        spec.regime_transition[0] = {0.5, 0.6};
        spec.event_rates[2] = -1;
        spec.end_date = spec.start_date;
        try {
            spec.validate();
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("n_instruments") != std::string::npos);
            CHECK(msg.find("regime_transition") != std::string::npos);
            CHECK(msg.find("event_rates") != std::string::npos);
            CHECK(msg.find("end_date") != std::string::npos);
        }
        auto one_day = small_spec();
        one_day.start_date = Date::from_ymd(2020, 1, 3); // Friday
        one_day.end_date = Date::from_ymd(2020, 1, 5);   // Sunday
        CHECK_THROWS_AS(generate(one_day), ValidationError);
    }

    TEST_CASE("summary table") {
        GeneratorSpec spec;
        spec.n_instruments = 1;
        spec.n_forex = 0;
        spec.n_commodities = 0;
        spec.start_date = Date::from_ymd(2010, 1, 1);
        spec.end_date = Date::from_ymd(2023, 12, 31);
        const auto rows = summarize(generate(spec));
        std::map<RecordKind, SummaryRow> by_kind;
        for (const auto& r : rows) by_kind[r.kind] = r;
        CHECK(by_kind.count(RecordKind::forex) == 0);
        CHECK(by_kind.at(RecordKind::macro).sample_count == 168);
        CHECK(by_kind.at(RecordKind::macro).feature_count == 8);
        CHECK(by_kind.at(RecordKind::macro).granularity == "Monthly");
        CHECK(by_kind.at(RecordKind::stock).sample_count == trading_days(spec.start_date, spec.end_date).size());
        CHECK(by_kind.at(RecordKind::stock).feature_count == 10);

        const SummaryRow stock{RecordKind::stock, 1000 * 3517, 10, "Daily"};
        const std::string table = format_summary(std::span(&stock, 1));
        CHECK(table.find("Stock data\t3,517,000\t10\tDaily") != std::string::npos);
        CHECK_THROWS_AS(summarize({}), ValidationError);
    }

    TEST_CASE("csv round-trip, combined and split") {
        auto spec = small_spec();
        spec.planted.push_back({RiskType::operational, Date::from_ymd(2020, 5, 4), 3, 0.5});
        const auto records = generate(spec);
        bool any_missing = false;
        for (const auto& r : records)
            for (std::size_t i = 0; i < r.values.size(); ++i) any_missing |= r.missing(i);
        REQUIRE(any_missing);

        const auto dir = test_support::scratch_dir("datagen_csv");
        write_records(records, dir / "all.csv");
        CHECK(read_records(dir / "all.csv") == records);
        write_records_split(records, dir / "split");
        CHECK(std::filesystem::exists(dir / "split" / "macro.csv"));
        CHECK(read_records(dir / "split") == records);
    }

    TEST_CASE("malformed csv rows name their line") {
        const std::string header = "timestamp,instrument,kind,open,high,low,close,adj_close,volume,vwap,"
                                   "bid_ask_spread,turnover,trade_count,labels\n";
        std::istringstream bad(header + "2020-01-02,STK0001,stock,1,1,1,1,1,1,1,1,1,1,\n" +
                               "2020-01-03,STK0001,stock,1,1,1,abc,1,1,1,1,1,1,\n");
        try {
            read_records(bad);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.line() == 3);
            CHECK(std::string(e.what()).find("line 3") != std::string::npos);
        }
        std::istringstream gap(header + "2020-01-02,STK0001,stock,1,1,1,,1,1,1,1,1,1,market_crash\n");
        const auto recs = read_records(gap);
        REQUIRE(recs.size() == 1);
        CHECK(std::isnan(recs[0].get("close")));
        CHECK(recs[0].get("open") == 1.0);
        CHECK(recs[0].labels.test(RiskType::market_crash));
        std::istringstream short_row(header + "2020-01-02,STK0001,stock,1,1\n");
        CHECK_THROWS_AS(read_records(short_row), ParseError);
        CHECK_THROWS_AS(read_records(std::filesystem::path("/nonexistent/file.csv")), IoError);
    }
}
