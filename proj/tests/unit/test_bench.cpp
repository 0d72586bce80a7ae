#include <doctest.h>

#include <fstream>
#include <sstream>
#include <thread>

#include "../stream_fixture.hpp"
#include "riskwatch/bench.hpp"
#include "riskwatch/service.hpp"
#include "support.hpp"

using namespace riskwatch;
using namespace riskwatch::bench;
using nlohmann::json;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

RawSamples random_raw(std::uint64_t seed, std::size_t n_volumes, std::size_t n_levels) {
    Rng rng(seed);
    RawSamples raw;
    raw.environment = {4, 8ull << 30};
    for (std::size_t v = 0; v < n_volumes; ++v) {
        VolumeSample s;
        s.target_bytes = s.bytes = (v + 1) * 1000 + rng.below(100);
        s.records = s.bytes / 50;
        s.windows = s.records / 10;
        for (std::size_t r = 0; r < 3 + rng.below(3); ++r) s.seconds.push_back(rng.uniform(0.01, 2.0));
        raw.volumes.push_back(s);
    }
    for (std::size_t l = 0; l < n_levels; ++l) {
        LevelSample s;
        s.clients = 1u << l;
        s.wall_seconds = rng.uniform(0.5, 2.0);
        for (std::size_t i = 0; i < 1 + rng.below(400); ++i) s.latencies.push_back(rng.uniform(1e-4, 0.1));
        s.errors = rng.below(2);
        raw.levels.push_back(s);
    }
    return raw;
}

} // namespace

TEST_CASE("byte sizes and lists") {
    CHECK(parse_byte_size("512") == 512);
    CHECK(parse_byte_size("100K") == 100u << 10);
    CHECK(parse_byte_size("100M") == 100u << 20);
    CHECK(parse_byte_size("1G") == 1ull << 30);
    CHECK(parse_byte_size("1gb") == 1ull << 30);
    CHECK_THROWS_AS(parse_byte_size("M"), ValidationError);
    CHECK_THROWS_AS(parse_byte_size("10X"), ValidationError);
    CHECK_THROWS_AS(parse_byte_size(""), ValidationError);
    CHECK(format_byte_size(500u << 20) == "500M");
    CHECK(format_byte_size(1ull << 30) == "1G");
    CHECK(format_byte_size(1000) == "1000");
    const std::vector<std::uint64_t> sizes = {100u << 20, 500u << 20, 1ull << 30};
    CHECK(parse_size_list("100M,500M,1G") == sizes);
    const std::vector<std::size_t> levels = {1, 8, 32, 64};
    CHECK(parse_count_list("1,8,32,64") == levels);
    CHECK_THROWS_AS(parse_count_list("1,x"), ValidationError);
}

TEST_CASE("request mix and endpoints") {
    const auto mix = parse_request_mix("health=1, alerts=2.5");
    CHECK(mix.size() == 2);
    CHECK(mix.at(Endpoint::alerts) == 2.5);
    CHECK_THROWS_AS(parse_request_mix("bogus=1"), ValidationError);
    CHECK_THROWS_AS(parse_request_mix("health"), ValidationError);
    for (auto e : {Endpoint::health, Endpoint::risk_latest, Endpoint::alerts, Endpoint::history}) {
        CHECK(parse_endpoint(to_string(e)) == e);
        CHECK(request_target(e).rfind("/api/v1/", 0) == 0);
    }
}

TEST_CASE("load profile validation") {
    LoadProfile p;
    p.data_volumes = {1, 2};
    p.concurrency_levels = {1, 4};
    CHECK_NOTHROW(p.validate());

    auto bad = p;
    bad.data_volumes = {2, 1};
    bad.concurrency_levels = {0, 4};
    bad.repetitions = 2;
    bad.duration_seconds = 0;
    try {
        bad.validate();
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("data_volumes") != std::string::npos);
        CHECK(msg.find("concurrency_levels") != std::string::npos);
        CHECK(msg.find("repetitions") != std::string::npos);
        CHECK(msg.find("duration_seconds") != std::string::npos);
    }
    auto zero_mix = p;
    for (auto& [e, w] : zero_mix.request_mix) w = 0;
    CHECK_THROWS_AS(zero_mix.validate(), ValidationError);
}

TEST_CASE("median picks a recorded repetition") {
    CHECK(median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(median({4.0, 1.0, 3.0, 2.0}) == 2.0);
    CHECK_THROWS_AS(median({}), ValidationError);
    CHECK(throughput_bytes_per_min(600, 60.0) == 600.0);
    CHECK_THROWS_AS(throughput_bytes_per_min(1, 0.0), ValidationError);
}

TEST_CASE("aggregate rows satisfy identities on random samples") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto raw = random_raw(seed, 1 + seed % 4, 1 + seed % 5);
        const auto r = aggregate(raw);
        REQUIRE(r.volumes.size() == raw.volumes.size());
        REQUIRE(r.levels.size() == raw.levels.size());
        for (std::size_t i = 0; i < r.volumes.size(); ++i) {
            auto sorted = raw.volumes[i].seconds;
            std::sort(sorted.begin(), sorted.end());
            CHECK(r.volumes[i].processing_seconds == sorted[(sorted.size() - 1) / 2]);
            CHECK(r.volumes[i].throughput_bytes_per_min == double(r.volumes[i].bytes) * 60.0 / r.volumes[i].processing_seconds);
        }
        for (std::size_t i = 0; i < r.levels.size(); ++i) {
            const auto& l = r.levels[i];
            CHECK(l.p50 <= l.p95);
            CHECK(l.p95 <= l.p99);
            auto sorted = raw.levels[i].latencies;
            std::sort(sorted.begin(), sorted.end());
            const auto rank = [&](double q) { return sorted[std::size_t(std::ceil(q * double(sorted.size()))) - 1]; };
            CHECK(l.p50 == rank(0.50));
            CHECK(l.p99 == rank(0.99));
            CHECK(l.requests == sorted.size());
        }
        if (r.volumes.size() >= 2) {
            double lo = 1e300, hi = 0;
            for (const auto& v : r.volumes) {
                lo = std::min(lo, v.throughput_bytes_per_min);
                hi = std::max(hi, v.throughput_bytes_per_min);
            }
            CHECK(*r.throughput_ratio == hi / lo);
        } else {
            CHECK_FALSE(r.throughput_ratio);
        }
    }
}

TEST_CASE("peak level and trend flags") {
    RawSamples raw;
    for (auto [clients, rps] : std::vector<std::pair<std::size_t, double>>{{1, 10}, {4, 30}, {16, 20}}) {
        LevelSample s;
        s.clients = clients;
        s.wall_seconds = 1.0;
        s.latencies.assign(std::size_t(rps), 0.01 * double(clients));
        raw.levels.push_back(s);
    }
    auto r = aggregate(raw);
    CHECK(r.peak_clients == 4u);
    CHECK(r.interior_peak);
    CHECK(r.p50_non_decreasing);
    raw.levels[1].latencies.assign(60, 0.001);
    r = aggregate(raw);
    CHECK(r.peak_clients == 4u);
    CHECK_FALSE(r.p50_non_decreasing);
    raw.levels[2].latencies.assign(100, 0.5);
    r = aggregate(raw);
    CHECK(r.peak_clients == 16u);
    CHECK_FALSE(r.interior_peak);
}

TEST_CASE("report serialization") {
    const auto raw = random_raw(7, 3, 4);
    const auto report = aggregate(raw);

    SUBCASE("csv has one row per volume and level") {
        const auto csv = report_csv(report);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 3 + 4);
        CHECK(csv.rfind("series,x,", 0) == 0);
    }
    SUBCASE("json round trips") {
        const auto j = to_json(report);
        CHECK(to_json(report_from_json(json::parse(j.dump()))) == j);
        CHECK(raw_from_json(json::parse(to_json(raw).dump())) == raw);
        CHECK_THROWS_AS(report_from_json(json{{"format", "other"}}), ParseError);
    }
    SUBCASE("re-emitting from stored samples is byte identical") {
        const auto a = test_support::scratch_dir("bench_emit_a");
        const auto b = test_support::scratch_dir("bench_emit_b");
        emit_report(raw, a);
        emit_report(raw_from_json(json::parse(slurp(a / "samples.json"))), b);
        for (const char* name : {"samples.json", "report.json", "series.csv"}) {
            CHECK(slurp(a / name) == slurp(b / name));
            CHECK_FALSE(slurp(a / name).empty());
        }
    }
}

TEST_CASE("volume spec") {
    const auto f = fixture::make_fixture(5, 4);
    CHECK_THROWS_AS(volume_spec(f.bundle.universe, 0, f.bundle.lookback, 1), ValidationError);
    CHECK_THROWS_AS(volume_spec(f.bundle.universe, 100, f.bundle.lookback, 1), ValidationError);
    for (std::uint64_t target : {64u << 10, 512u << 10}) {
        const auto spec = volume_spec(f.bundle.universe, target, f.bundle.lookback, 1);
        std::ostringstream os;
        write_records(generate(spec), os);
        const double ratio = double(os.str().size()) / double(target);
        CHECK(ratio > 0.8);
        CHECK(ratio < 1.25);
    }
}

TEST_CASE("batch bench runs the pipeline on each volume") {
    const auto f = fixture::make_fixture(5, 4);
    const std::vector<std::uint64_t> volumes = {32u << 10, 128u << 10};
    const auto samples = bench_batch(volumes, f.bundle, 3, 11);
    REQUIRE(samples.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(samples[i].target_bytes == volumes[i]);
        CHECK(samples[i].seconds.size() == 3);
        CHECK(samples[i].windows > 0);
        CHECK(samples[i].records > 0);
    }
    CHECK(samples[1].bytes > samples[0].bytes);
    RawSamples raw{Environment::current(), samples, {}};
    const auto r = aggregate(raw);
    for (const auto& row : r.volumes)
        CHECK(row.throughput_bytes_per_min == double(row.bytes) * 60.0 / row.processing_seconds);
    CHECK(r.throughput_ratio.has_value());

    auto empty = f.bundle;
    empty.gradient_boosting.reset();
    CHECK_THROWS_AS(bench_batch(volumes, empty, 3, 11), ValidationError);
    const std::vector<std::uint64_t> tiny = {10};
    CHECK_THROWS_AS(bench_batch(tiny, f.bundle, 3, 11), ValidationError);
}

TEST_CASE("concurrency bench against a live server") {
    const std::string token(32, 'r');
    service::ServiceConfig cfg;
    cfg.store = test_support::scratch_dir("bench_service");
    cfg.port = 0;
    cfg.threads = 4;
    cfg.tokens = {{token, service::Role::reader}};
    const auto f = fixture::make_fixture(5, 4);
    service::RiskService svc(cfg, f.bundle, f.bayes, f.cost);
    svc.ingest(f.records);
    service::HttpServer server(svc);
    const int port = server.bind();
    std::thread runner([&] { server.run(); });

    LoadProfile p;
    p.concurrency_levels = {1, 3};
    p.duration_seconds = 0.3;
    const auto levels = bench_concurrency(p, {"127.0.0.1", port, token});
    REQUIRE(levels.size() == 2);
    for (const auto& l : levels) {
        CHECK(l.errors == 0);
        CHECK_FALSE(l.latencies.empty());
        CHECK(l.wall_seconds >= 0.3);
    }
    const auto r = aggregate({Environment::current(), {}, levels});
    for (const auto& row : r.levels) {
        CHECK(row.p50 <= row.p95);
        CHECK(row.p95 <= row.p99);
        CHECK(row.requests_per_second > 0);
    }

    LoadProfile unauth = p;
    unauth.concurrency_levels = {1};
    unauth.duration_seconds = 0.1;
    CHECK_THROWS_AS(bench_concurrency(unauth, {"127.0.0.1", port, "wrong"}), BenchError);

    server.stop();
    runner.join();
}
