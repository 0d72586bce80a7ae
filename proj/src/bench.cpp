#include "riskwatch/bench.hpp"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <new>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "riskwatch/rng.hpp"
#include "riskwatch/stream.hpp"

namespace riskwatch::bench {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

std::vector<std::string_view> split(std::string_view text, char sep) {
    std::vector<std::string_view> out;
    while (true) {
        const auto pos = text.find(sep);
        out.push_back(text.substr(0, pos));
        if (pos == std::string_view::npos) break;
        text.remove_prefix(pos + 1);
    }
    return out;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <class T> bool ascending_positive(const std::vector<T>& v) {
    for (std::size_t i = 0; i < v.size(); ++i)
        if (v[i] <= 0 || (i && v[i] <= v[i - 1])) return false;
    return true;
}

} // namespace

std::uint64_t parse_byte_size(std::string_view text) {
    const auto s = trim(text);
    if (s.empty()) throw ValidationError("empty byte size");
    std::size_t digits = 0;
    while (digits < s.size() && std::isdigit(static_cast<unsigned char>(s[digits]))) ++digits;
    if (digits == 0) throw ValidationError("byte size must start with a number: '" + std::string(text) + "'");
    auto suffix = std::string(s.substr(digits));
    std::transform(suffix.begin(), suffix.end(), suffix.begin(), [](unsigned char c) { return std::toupper(c); });
    if (suffix.size() == 2 && suffix[1] == 'B') suffix.pop_back();
    std::uint64_t mult = 1;
    if (suffix == "K") mult = 1ull << 10;
    else if (suffix == "M") mult = 1ull << 20;
    else if (suffix == "G") mult = 1ull << 30;
    else if (!suffix.empty() && suffix != "B") throw ValidationError("unknown size suffix in '" + std::string(text) + "'");
    const auto value = std::stoull(std::string(s.substr(0, digits)));
    if (value > ~std::uint64_t{0} / mult) throw ValidationError("byte size overflows: '" + std::string(text) + "'");
    return value * mult;
}

std::string format_byte_size(std::uint64_t bytes) {
    constexpr std::pair<std::uint64_t, const char*> units[] = {{1ull << 30, "G"}, {1ull << 20, "M"}, {1ull << 10, "K"}};
    for (const auto& [m, name] : units)
        if (bytes >= m && bytes % m == 0) return std::to_string(bytes / m) + name;
    return std::to_string(bytes);
}

std::vector<std::uint64_t> parse_size_list(std::string_view text) {
    std::vector<std::uint64_t> out;
    for (auto part : split(text, ',')) out.push_back(parse_byte_size(part));
    return out;
}

std::vector<std::size_t> parse_count_list(std::string_view text) {
    std::vector<std::size_t> out;
    for (auto part : split(text, ',')) {
        const auto s = std::string(trim(part));
        if (s.empty() || !std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); }))
            throw ValidationError("not a count: '" + s + "'");
        out.push_back(std::stoull(s));
    }
    return out;
}

std::string_view to_string(Endpoint e) {
    switch (e) {
    case Endpoint::health: return "health";
    case Endpoint::risk_latest: return "risk_latest";
    case Endpoint::alerts: return "alerts";
    case Endpoint::history: return "history";
    }
    return "?";
}

Endpoint parse_endpoint(std::string_view name) {
    for (auto e : {Endpoint::health, Endpoint::risk_latest, Endpoint::alerts, Endpoint::history})
        if (to_string(e) == name) return e;
    throw ValidationError("unknown endpoint '" + std::string(name) + "'");
}

std::string request_target(Endpoint e) {
    switch (e) {
    case Endpoint::health: return "/api/v1/health";
    case Endpoint::risk_latest: return "/api/v1/risk/latest";
    case Endpoint::alerts: return "/api/v1/alerts?limit=100";
    case Endpoint::history: return "/api/v1/history?metric=combined.market_crash";
    }
    return "/";
}

std::map<Endpoint, double> parse_request_mix(std::string_view text) {
    std::map<Endpoint, double> out;
    for (auto part : split(text, ',')) {
        const auto eq = part.find('=');
        if (eq == std::string_view::npos) throw ValidationError("request mix entry needs name=weight: '" + std::string(part) + "'");
        const auto weight = parse_double(trim(part.substr(eq + 1)));
        if (!weight) throw ValidationError("bad weight in '" + std::string(part) + "'");
        out[parse_endpoint(trim(part.substr(0, eq)))] = *weight;
    }
    return out;
}

void LoadProfile::validate() const {
    std::vector<std::string> errors;
    if (!ascending_positive(data_volumes)) errors.push_back("data_volumes must be positive and strictly ascending");
    if (!ascending_positive(concurrency_levels))
        errors.push_back("concurrency_levels must be positive and strictly ascending");
    if (!(duration_seconds > 0)) errors.push_back("duration_seconds must be positive");
    if (repetitions < 3) errors.push_back("repetitions must be at least 3");
    double total = 0;
    for (const auto& [e, w] : request_mix) {
        if (!(w >= 0) || !std::isfinite(w)) errors.push_back("request mix weight of " + std::string(to_string(e)) + " must be >= 0");
        total += w;
    }
    if (!(total > 0)) errors.push_back("request mix needs a positive total weight");
    if (!(max_error_rate >= 0 && max_error_rate <= 1)) errors.push_back("max_error_rate must be in [0, 1]");
    if (!errors.empty()) {
        std::string msg = "invalid load profile:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw ValidationError(msg);
    }
}

Environment Environment::current() {
    Environment e;
    e.cpus = std::thread::hardware_concurrency();
    const long pages = sysconf(_SC_PHYS_PAGES), page = sysconf(_SC_PAGESIZE);
    if (pages > 0 && page > 0) e.memory_bytes = std::uint64_t(pages) * std::uint64_t(page);
    return e;
}

double median(std::vector<double> values) {
    if (values.empty()) throw ValidationError("median of an empty sample");
    std::sort(values.begin(), values.end());
    return values[(values.size() - 1) / 2];
}

double throughput_bytes_per_min(std::uint64_t bytes, double seconds) {
    if (!(seconds > 0)) throw ValidationError("processing time must be positive");
    return double(bytes) * 60.0 / seconds;
}

BenchReport aggregate(const RawSamples& raw) {
    BenchReport r;
    r.environment = raw.environment;
    for (const auto& v : raw.volumes) {
        VolumeRow row;
        row.bytes = v.bytes;
        row.records = v.records;
        row.repetitions = v.seconds.size();
        row.processing_seconds = median(v.seconds);
        row.throughput_bytes_per_min = throughput_bytes_per_min(v.bytes, row.processing_seconds);
        r.volumes.push_back(row);
    }
    if (r.volumes.size() >= 2) {
        const auto [lo, hi] = std::minmax_element(r.volumes.begin(), r.volumes.end(), [](const auto& a, const auto& b) {
            return a.throughput_bytes_per_min < b.throughput_bytes_per_min;
        });
        r.throughput_ratio = hi->throughput_bytes_per_min / lo->throughput_bytes_per_min;
    }
    for (const auto& l : raw.levels) {
        LevelRow row;
        row.clients = l.clients;
        row.requests = l.latencies.size();
        row.errors = l.errors;
        row.error_rate = row.requests ? double(l.errors) / double(row.requests) : 0.0;
        const auto p = stream::percentiles(l.latencies);
        row.p50 = p.p50;
        row.p95 = p.p95;
        row.p99 = p.p99;
        row.requests_per_second = l.wall_seconds > 0 ? double(row.requests - row.errors) / l.wall_seconds : 0.0;
        r.levels.push_back(row);
    }
    if (!r.levels.empty()) {
        std::size_t peak = 0;
        for (std::size_t i = 1; i < r.levels.size(); ++i)
            if (r.levels[i].requests_per_second > r.levels[peak].requests_per_second) peak = i;
        r.peak_clients = r.levels[peak].clients;
        r.interior_peak = peak > 0 && peak + 1 < r.levels.size();
        for (std::size_t i = 1; i < r.levels.size(); ++i)
            if (r.levels[i].p50 < r.levels[i - 1].p50) r.p50_non_decreasing = false;
    }
    return r;
}

GeneratorSpec volume_spec(const Universe& universe, std::uint64_t target_bytes, std::size_t lookback,
                          std::uint64_t seed) {
    GeneratorSpec spec;
    spec.seed = seed;
    spec.n_instruments = int(universe.stocks.size());
    spec.n_forex = int(universe.forex.size());
    spec.n_commodities = int(universe.commodities.size());
    spec.start_date = Date::from_ymd(2000, 1, 1);
    spec.end_date = Date::from_ymd(2000, 12, 31);

    std::ostringstream probe;
    write_records(generate(spec), probe);
    const auto probe_days = trading_days(spec.start_date, spec.end_date).size();
    const double per_day = double(probe.str().size()) / double(probe_days);
    const auto days = std::size_t(std::ceil(double(target_bytes) / per_day));
    if (days < lookback + 1)
        throw ValidationError("volume " + format_byte_size(target_bytes) + " holds fewer than one input window of " +
                              std::to_string(lookback) + " days");

    Date end = spec.start_date;
    for (std::size_t n = end.is_weekday() ? 1 : 0; n < days;)
        if ((end = end + 1).is_weekday()) ++n;
    spec.end_date = end;
    spec.validate();
    return spec;
}

std::vector<VolumeSample> bench_batch(const std::vector<std::uint64_t>& volumes, const models::ModelBundle& bundle,
                                      std::size_t repetitions, std::uint64_t seed) {
    if (repetitions == 0) throw ValidationError("at least one repetition is required");
    if (!bundle.has_any_model()) throw ValidationError("bench needs at least one trained model");
    std::vector<VolumeSample> out;
    for (const auto target : volumes) {
        VolumeSample sample;
        sample.target_bytes = target;
        const auto spec = volume_spec(bundle.universe, target, bundle.lookback, seed);
        std::string csv;
        try {
            std::ostringstream os;
            write_records(generate(spec), os);
            csv = std::move(os).str();
        } catch (const std::bad_alloc&) {
            throw BenchError("out of memory generating volume " + format_byte_size(target));
        } catch (const std::exception& e) {
            throw BenchError("generating volume " + format_byte_size(target) + " failed: " + e.what());
        }
        sample.bytes = csv.size();
        double checksum = 0.0;
        try {
            for (std::size_t rep = 0; rep < repetitions; ++rep) {
                const auto t0 = Clock::now();
                std::istringstream in(csv);
                const auto records = read_records(in);
                const auto raw = extract_features(records, bundle.universe);
                const auto m = bundle.pipeline.transform(raw.select(bundle.pipeline.feature_names));
                const auto inputs = make_inputs(m, bundle.lookback);
                for (std::size_t i = 0; i < inputs.size(); ++i)
                    checksum += bundle.score_window(inputs.inputs[i]).combined()[0];
                sample.seconds.push_back(seconds_since(t0));
                sample.records = records.size();
                sample.windows = inputs.size();
            }
        } catch (const std::bad_alloc&) {
            throw BenchError("out of memory processing volume " + format_byte_size(target));
        }
        if (!std::isfinite(checksum)) throw BenchError("non-finite scores at volume " + format_byte_size(target));
        out.push_back(std::move(sample));
    }
    return out;
}

std::vector<LevelSample> bench_concurrency(const LoadProfile& profile, const Target& target) {
    if (!ascending_positive(profile.concurrency_levels))
        throw ValidationError("concurrency_levels must be positive and strictly ascending");
    std::vector<std::pair<Endpoint, double>> mix;
    double total = 0;
    for (const auto& [e, w] : profile.request_mix)
        if (w > 0) mix.push_back({e, total += w});
    if (mix.empty()) throw ValidationError("request mix needs a positive total weight");

    std::vector<LevelSample> out;
    for (std::size_t level = 0; level < profile.concurrency_levels.size(); ++level) {
        const auto clients = profile.concurrency_levels[level];
        std::vector<std::vector<double>> latencies(clients);
        std::vector<std::size_t> errors(clients, 0);
        std::atomic<std::size_t> ready{0};
        std::atomic<bool> go{false};
        const auto duration = std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(profile.duration_seconds));
        Clock::time_point start;
        {
            std::vector<std::jthread> threads;
            for (std::size_t c = 0; c < clients; ++c)
                threads.emplace_back([&, c] {
                    Rng rng(profile.seed, level * 100'000 + c);
                    httplib::Client cli(target.host, target.port);
                    cli.set_connection_timeout(10);
                    cli.set_read_timeout(30);
                    httplib::Headers headers;
                    if (!target.token.empty()) headers.emplace("Authorization", "Bearer " + target.token);
                    auto& lat = latencies[c];
                    ++ready;
                    while (!go.load()) std::this_thread::yield();
                    const auto deadline = start + duration;
                    while (Clock::now() < deadline) {
                        const double u = rng.uniform() * total;
                        auto it = std::find_if(mix.begin(), mix.end(), [u](const auto& p) { return u < p.second; });
                        if (it == mix.end()) it = std::prev(mix.end());
                        const auto t0 = Clock::now();
                        const auto res = cli.Get(request_target(it->first), headers);
                        lat.push_back(seconds_since(t0));
                        if (!res || res->status / 100 != 2) ++errors[c];
                    }
                });
            while (ready.load() < clients) std::this_thread::yield();
            start = Clock::now();
            go = true;
        }
        LevelSample s;
        s.clients = clients;
        s.wall_seconds = seconds_since(start);
        for (std::size_t c = 0; c < clients; ++c) {
            s.latencies.insert(s.latencies.end(), latencies[c].begin(), latencies[c].end());
            s.errors += errors[c];
        }
        const double rate = s.latencies.empty() ? 0.0 : double(s.errors) / double(s.latencies.size());
        if (rate > profile.max_error_rate)
            throw BenchError("error rate " + format_double(rate) + " at " + std::to_string(clients) +
                             " clients exceeds " + format_double(profile.max_error_rate));
        out.push_back(std::move(s));
    }
    return out;
}

json to_json(const RawSamples& raw) {
    json volumes = json::array(), levels = json::array();
    for (const auto& v : raw.volumes)
        volumes.push_back({{"target_bytes", v.target_bytes}, {"bytes", v.bytes}, {"records", v.records},
                           {"windows", v.windows}, {"seconds", v.seconds}});
    for (const auto& l : raw.levels)
        levels.push_back({{"clients", l.clients}, {"wall_seconds", l.wall_seconds}, {"errors", l.errors},
                          {"latencies", l.latencies}});
    return {{"format", "riskwatch.bench-samples"},
            {"version", 1},
            {"environment", {{"cpus", raw.environment.cpus}, {"memory_bytes", raw.environment.memory_bytes}}},
            {"volumes", volumes},
            {"levels", levels}};
}

RawSamples raw_from_json(const json& j) {
    if (j.value("format", "") != "riskwatch.bench-samples") throw ParseError("not a bench samples file");
    RawSamples raw;
    raw.environment.cpus = j.at("environment").at("cpus").get<unsigned>();
    raw.environment.memory_bytes = j.at("environment").at("memory_bytes").get<std::uint64_t>();
    for (const auto& v : j.at("volumes"))
        raw.volumes.push_back({v.at("target_bytes").get<std::uint64_t>(), v.at("bytes").get<std::uint64_t>(),
                               v.at("records").get<std::size_t>(), v.at("windows").get<std::size_t>(),
                               v.at("seconds").get<std::vector<double>>()});
    for (const auto& l : j.at("levels"))
        raw.levels.push_back({l.at("clients").get<std::size_t>(), l.at("wall_seconds").get<double>(),
                              l.at("latencies").get<std::vector<double>>(), l.at("errors").get<std::size_t>()});
    return raw;
}

json to_json(const BenchReport& r) {
    json volumes = json::array(), levels = json::array();
    for (const auto& v : r.volumes)
        volumes.push_back({{"bytes", v.bytes},
                           {"records", v.records},
                           {"repetitions", v.repetitions},
                           {"processing_seconds", v.processing_seconds},
                           {"throughput_bytes_per_min", v.throughput_bytes_per_min}});
    for (const auto& l : r.levels)
        levels.push_back({{"clients", l.clients},
                          {"requests", l.requests},
                          {"errors", l.errors},
                          {"error_rate", l.error_rate},
                          {"p50_seconds", l.p50},
                          {"p95_seconds", l.p95},
                          {"p99_seconds", l.p99},
                          {"requests_per_second", l.requests_per_second}});
    json summary = {{"interior_peak", r.interior_peak}, {"p50_non_decreasing", r.p50_non_decreasing}};
    summary["throughput_ratio"] = r.throughput_ratio ? json(*r.throughput_ratio) : json(nullptr);
    summary["peak_clients"] = r.peak_clients ? json(*r.peak_clients) : json(nullptr);
    return {{"format", "riskwatch.bench-report"},
            {"version", 1},
            {"environment", {{"cpus", r.environment.cpus}, {"memory_bytes", r.environment.memory_bytes}}},
            {"volumes", volumes},
            {"concurrency", levels},
            {"summary", summary}};
}

BenchReport report_from_json(const json& j) {
    if (j.value("format", "") != "riskwatch.bench-report") throw ParseError("not a bench report");
    BenchReport r;
    r.environment.cpus = j.at("environment").at("cpus").get<unsigned>();
    r.environment.memory_bytes = j.at("environment").at("memory_bytes").get<std::uint64_t>();
    for (const auto& v : j.at("volumes"))
        r.volumes.push_back({v.at("bytes").get<std::uint64_t>(), v.at("records").get<std::size_t>(),
                             v.at("repetitions").get<std::size_t>(), v.at("processing_seconds").get<double>(),
                             v.at("throughput_bytes_per_min").get<double>()});
    for (const auto& l : j.at("concurrency"))
        r.levels.push_back({l.at("clients").get<std::size_t>(), l.at("requests").get<std::size_t>(),
                            l.at("errors").get<std::size_t>(), l.at("error_rate").get<double>(),
                            l.at("p50_seconds").get<double>(), l.at("p95_seconds").get<double>(),
                            l.at("p99_seconds").get<double>(), l.at("requests_per_second").get<double>()});
    const auto& s = j.at("summary");
    if (!s.at("throughput_ratio").is_null()) r.throughput_ratio = s["throughput_ratio"].get<double>();
    if (!s.at("peak_clients").is_null()) r.peak_clients = s["peak_clients"].get<std::size_t>();
    r.interior_peak = s.at("interior_peak").get<bool>();
    r.p50_non_decreasing = s.at("p50_non_decreasing").get<bool>();
    return r;
}

std::string report_csv(const BenchReport& r) {
    std::ostringstream os;
    os << "series,x,processing_seconds,throughput_bytes_per_min,p50,p95,p99,requests_per_second,error_rate\n";
    for (const auto& v : r.volumes)
        os << "volume," << v.bytes << ',' << format_double(v.processing_seconds) << ','
           << format_double(v.throughput_bytes_per_min) << ",,,,,\n";
    for (const auto& l : r.levels)
        os << "concurrency," << l.clients << ",,," << format_double(l.p50) << ',' << format_double(l.p95) << ','
           << format_double(l.p99) << ',' << format_double(l.requests_per_second) << ','
           << format_double(l.error_rate) << '\n';
    return os.str();
}

void emit_report(const RawSamples& raw, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    const auto report = aggregate(raw);
    auto write = [&](const std::string& name, const std::string& text) {
        std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
        out << text;
        out.flush();
        if (!out) throw IoError("cannot write " + (dir / name).string());
    };
    write("samples.json", to_json(raw).dump(2) + "\n");
    write("report.json", to_json(report).dump(2) + "\n");
    write("series.csv", report_csv(report));
}

} // namespace riskwatch::bench
