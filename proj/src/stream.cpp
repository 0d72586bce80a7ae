#include "riskwatch/stream.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <thread>

namespace riskwatch::stream {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

Millis floor_div(Millis a, Millis b) {
    Millis q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

} // namespace

void StreamEvent::validate() const {
    if (key.empty()) throw ValidationError("stream event: empty key");
    for (const auto& [name, v] : payload)
        if (!std::isfinite(v)) throw ValidationError("stream event: payload '" + name + "' is not finite");
}

json to_json(const StreamEvent& e) {
    json j = {{"event_time", e.event_time}, {"key", e.key}, {"payload", e.payload}};
    if (e.source) j["source"] = e.source;
    return j;
}

StreamEvent event_from_json(const json& j) {
    try {
        StreamEvent e;
        e.event_time = j.at("event_time").get<Millis>();
        e.key = j.at("key").get<std::string>();
        e.payload = j.at("payload").get<std::map<std::string, double>>();
        e.source = j.value("source", std::uint32_t{0});
        e.validate();
        return e;
    } catch (const json::exception& ex) {
        throw ParseError(std::string("malformed stream event: ") + ex.what());
    }
}

std::vector<StreamEvent> read_events(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<StreamEvent> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(event_from_json(json::parse(line)));
        } catch (const json::parse_error& e) {
            throw ParseError(e.what(), n);
        } catch (const std::exception& e) {
            throw ParseError(e.what(), n);
        }
    }
    return out;
}

void write_events(std::span<const StreamEvent> events, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& e : events) out << to_json(e).dump() << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

StreamEvent to_event(const Record& r) {
    StreamEvent e;
    e.event_time = r.timestamp.epoch_ms();
    e.key = std::string(to_string(r.kind)) + "/" + r.instrument;
    const auto fields = kind_fields(r.kind);
    for (std::size_t i = 0; i < fields.size() && i < r.values.size(); ++i)
        if (!r.missing(i)) e.payload.emplace(std::string(fields[i]), r.values[i]);
    return e;
}

std::vector<StreamEvent> to_events(const RecordSet& records) {
    std::vector<StreamEvent> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(to_event(r));
    return out;
}

Record to_record(const std::string& key, Date day, const std::map<std::string, double>& fields) {
    const auto slash = key.find('/');
    if (slash == std::string::npos) throw ValidationError("stream key '" + key + "' is not <kind>/<instrument>");
    Record r;
    r.kind = parse_record_kind(key.substr(0, slash));
    r.instrument = key.substr(slash + 1);
    r.timestamp = day;
    const auto names = kind_fields(r.kind);
    r.values.assign(names.size(), kMissing);
    for (const auto& [name, v] : fields) {
        const int i = field_index(r.kind, name);
        if (i >= 0) r.values[std::size_t(i)] = v;
    }
    return r;
}

// ---------------------------------------------------------------------------

void WindowSpec::validate() const {
    if (size <= 0) throw ValidationError("window size must be positive");
    if (kind == WindowKind::sliding && (slide <= 0 || slide > size))
        throw ValidationError("sliding window slide must lie in (0, size]");
    if (allowed_lateness < 0) throw ValidationError("allowed lateness must be non-negative");
}

std::vector<WindowId> assign_windows(Millis t, const WindowSpec& spec) {
    spec.validate();
    const Millis step = spec.step();
    std::vector<WindowId> out;
    const Millis last = floor_div(t, step) * step;
    for (Millis start = last; start > t - spec.size; start -= step) out.push_back({start, start + spec.size});
    std::reverse(out.begin(), out.end());
    return out;
}

Millis advance_watermark(std::span<const Millis> source_max_times, Millis bound) {
    if (source_max_times.empty()) throw ValidationError("advance_watermark: no sources");
    Millis wm = kEndOfStream;
    for (Millis t : source_max_times) wm = std::min(wm, t == kNoWatermark ? kNoWatermark : t - bound);
    return wm;
}

WatermarkTracker::WatermarkTracker(std::size_t sources, Millis bound)
    : max_time_(sources, kNoWatermark), seen_(sources, false), bound_(bound) {
    if (sources == 0) throw ValidationError("watermark tracker needs at least one source");
    if (bound < 0) throw ValidationError("out-of-orderness bound must be non-negative");
}

bool WatermarkTracker::observe(std::uint32_t source, Millis t) {
    if (source >= max_time_.size()) throw ValidationError("event from unknown source " + std::to_string(source));
    seen_[source] = true;
    max_time_[source] = std::max(max_time_[source], t);
    if (std::find(seen_.begin(), seen_.end(), false) != seen_.end()) return false;
    const Millis wm = advance_watermark(max_time_, bound_);
    if (wm <= watermark_) return false;
    watermark_ = wm;
    return true;
}

void Aggregate::add(double v) {
    ++count;
    sum += v;
    const double delta = v - mean;
    mean += delta / double(count);
    m2 += delta * (v - mean);
    min = std::min(min, v);
    max = std::max(max, v);
}

json to_json(const Aggregate& a) {
    if (a.count == 0) return {{"count", 0}};
    return {{"count", a.count}, {"sum", a.sum},     {"mean", a.mean},
            {"min", a.min},     {"max", a.max},     {"variance", a.variance()}};
}

json to_json(const WindowEmission& e) {
    json fields = json::object();
    for (const auto& [name, a] : e.fields) fields[name] = to_json(a);
    return {{"key", e.key},
            {"start", e.window.start},
            {"end", e.window.end},
            {"events", e.events},
            {"late_update", e.late_update},
            {"fields", fields}};
}

WindowOperator::WindowOperator(WindowSpec spec, bool emit_empty) : spec_(spec), emit_empty_(emit_empty) {
    spec_.validate();
}

std::vector<WindowEmission> WindowOperator::process(const StreamEvent& e) {
    ++stats_.events;
    std::vector<WindowEmission> late;
    for (const auto& w : assign_windows(e.event_time, spec_)) {
        if (watermark_ != kNoWatermark && w.end + spec_.allowed_lateness <= watermark_) {
            ++stats_.dropped;
            continue;
        }
        auto& s = state_[{e.key, w}];
        ++s.events;
        for (const auto& [name, v] : e.payload) s.fields[name].add(v);
        if (s.fired) {
            ++stats_.late_updates;
            late.push_back({e.key, w, s.events, s.fields, true});
        } else if (emit_empty_) {
            auto [it, inserted] = spans_.try_emplace(e.key, KeySpan{w.start, w.start});
            if (!inserted) {
                it->second.next = std::min(it->second.next, w.start);
                it->second.last = std::max(it->second.last, w.start);
            }
        }
    }
    return late;
}

std::vector<WindowEmission> WindowOperator::advance(Millis wm) {
    if (wm < watermark_) throw std::logic_error("watermark regressed");
    watermark_ = wm;
    std::vector<WindowEmission> out;
    for (auto& [id, s] : state_) {
        if (s.fired || id.second.end > wm) continue;
        s.fired = true;
        out.push_back({id.first, id.second, s.events, s.fields, false});
    }
    const Millis step = spec_.step();
    for (auto& [key, span] : spans_) {
        const Millis stop = std::min(wm - spec_.size, span.last);
        Millis start = span.next;
        for (; start <= stop; start += step)
            if (!state_.contains({key, WindowId{start, start + spec_.size}}))
                out.push_back({key, {start, start + spec_.size}, 0, {}, false});
        span.next = start;
    }
    std::sort(out.begin(), out.end(), [](const WindowEmission& a, const WindowEmission& b) {
        return std::tie(a.window.end, a.window.start, a.key) < std::tie(b.window.end, b.window.start, b.key);
    });
    stats_.fired += out.size();
    for (auto it = state_.begin(); it != state_.end();) {
        if (it->second.fired && it->first.second.end + spec_.allowed_lateness <= wm)
            it = state_.erase(it);
        else
            ++it;
    }
    return out;
}

bool Deduplicator::is_duplicate(const StreamEvent& e) {
    return !seen_.emplace(e.event_time, e.key, e.payload).second;
}

void Deduplicator::forget_before(Millis time) {
    for (auto it = seen_.begin(); it != seen_.end() && std::get<0>(*it) < time;) it = seen_.erase(it);
}

// ---------------------------------------------------------------------------

Comparison parse_comparison(std::string_view op) {
    if (op == "<" || op == "lt") return Comparison::lt;
    if (op == "<=" || op == "le") return Comparison::le;
    if (op == ">" || op == "gt") return Comparison::gt;
    if (op == ">=" || op == "ge") return Comparison::ge;
    if (op == "==" || op == "eq") return Comparison::eq;
    if (op == "!=" || op == "ne") return Comparison::ne;
    throw ValidationError("unknown comparison '" + std::string(op) + "'");
}

bool Predicate::test(const StreamEvent& e) const {
    const auto it = e.payload.find(field);
    if (it == e.payload.end()) return false;
    const double v = it->second;
    switch (op) {
    case Comparison::lt: return v < value;
    case Comparison::le: return v <= value;
    case Comparison::gt: return v > value;
    case Comparison::ge: return v >= value;
    case Comparison::eq: return v == value;
    case Comparison::ne: return v != value;
    }
    return false;
}

void PatternSpec::validate() const {
    if (length < 1) throw ValidationError("pattern length must be >= 1");
    if (within <= 0) throw ValidationError("pattern 'within' must be positive");
    if (steps.size() != 1 && steps.size() != length)
        throw ValidationError("pattern needs one predicate or one per step");
}

std::vector<PatternMatch> match_pattern(std::span<const StreamEvent> events, const PatternSpec& p) {
    p.validate();
    std::map<std::string, std::vector<std::size_t>> by_key;
    for (std::size_t i = 0; i < events.size(); ++i) {
        auto& idx = by_key[events[i].key];
        if (!idx.empty() && events[idx.back()].event_time > events[i].event_time)
            throw ValidationError("match_pattern: events of key '" + events[i].key + "' are not in time order");
        idx.push_back(i);
    }
    std::vector<PatternMatch> out;
    for (const auto& [key, idx] : by_key) {
        for (std::size_t s = 0; s < idx.size(); ++s) {
            if (!p.step(0).test(events[idx[s]])) continue;
            std::vector<std::size_t> chosen = {idx[s]};
            const Millis t0 = events[idx[s]].event_time;
            std::size_t cursor = s + 1;
            while (chosen.size() < p.length && cursor < idx.size()) {
                const auto& e = events[idx[cursor]];
                if (e.event_time - t0 > p.within) break;
                if (p.step(chosen.size()).test(e))
                    chosen.push_back(idx[cursor]);
                else if (p.contiguity == Contiguity::strict)
                    break;
                ++cursor;
            }
            if (chosen.size() == p.length)
                out.push_back({key, chosen, t0, events[chosen.back()].event_time});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

WindowRun run_windows(std::span<const StreamEvent> events, const WindowRunConfig& cfg) {
    cfg.window.validate();
    const std::size_t workers = std::max<std::size_t>(cfg.workers, 1);

    // Commands per partition: an event index, or a watermark advance (encoded as ~epoch).
    struct Command {
        bool is_event;
        std::size_t value;
    };
    std::vector<std::vector<Command>> plan(workers);
    WindowRun run;
    Deduplicator dedup;
    WatermarkTracker tracker(cfg.sources, cfg.out_of_orderness);
    const std::hash<std::string> hasher;
    for (std::size_t i = 0; i < events.size(); ++i) {
        const auto& e = events[i];
        e.validate();
        ++run.events;
        if (dedup.is_duplicate(e)) {
            ++run.duplicates;
            continue;
        }
        plan[hasher(e.key) % workers].push_back({true, i});
        if (tracker.observe(e.source, e.event_time)) {
            run.watermarks.push_back(tracker.watermark());
            run.epoch_opened.push_back(Clock::now());
            for (auto& p : plan) p.push_back({false, run.watermarks.size()});
            dedup.forget_before(tracker.watermark() - cfg.window.size - cfg.window.allowed_lateness);
        }
    }
    run.watermarks.push_back(kEndOfStream);
    run.epoch_opened.push_back(Clock::now());
    for (auto& p : plan) p.push_back({false, run.watermarks.size()});

    std::vector<std::vector<EpochEmission>> outputs(workers);
    std::vector<OperatorStats> stats(workers);
    auto work = [&](std::size_t w) {
        WindowOperator op(cfg.window, cfg.emit_empty);
        std::size_t epoch = 0;
        for (const auto& c : plan[w]) {
            if (c.is_event) {
                for (auto& em : op.process(events[c.value])) outputs[w].push_back({epoch, std::move(em)});
            } else {
                epoch = c.value;
                for (auto& em : op.advance(run.watermarks[epoch - 1])) outputs[w].push_back({epoch, std::move(em)});
            }
        }
        stats[w] = op.stats();
    };
    if (workers == 1) {
        work(0);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    }

    for (std::size_t w = 0; w < workers; ++w) {
        run.emissions.insert(run.emissions.end(), std::make_move_iterator(outputs[w].begin()),
                             std::make_move_iterator(outputs[w].end()));
        run.stats.events += stats[w].events;
        run.stats.fired += stats[w].fired;
        run.stats.late_updates += stats[w].late_updates;
        run.stats.dropped += stats[w].dropped;
    }
    // Per-key order is preserved by each partition, so a stable sort on this key is total.
    std::stable_sort(run.emissions.begin(), run.emissions.end(), [](const EpochEmission& a, const EpochEmission& b) {
        const auto& x = a.emission;
        const auto& y = b.emission;
        return std::tie(a.epoch, x.late_update, x.window.end, x.window.start, x.key) <
               std::tie(b.epoch, y.late_update, y.window.end, y.window.start, y.key);
    });
    return run;
}

// ---------------------------------------------------------------------------

json to_json(const DayResult& d) {
    json j = {{"date", d.day.iso()}};
    if (d.scores) {
        json models = json::object();
        for (auto k : models::kAllModelKinds)
            if (const auto& s = d.scores->get(k)) {
                json v = json::object();
                for (auto r : kAllRiskTypes) v[std::string(to_string(r))] = (*s)[index(r)];
                models[std::string(to_string(k))] = v;
            }
        j["scores"] = models;
    }
    if (d.posteriors) {
        json v = json::object();
        for (auto r : kAllRiskTypes) v[std::string(to_string(r))] = (*d.posteriors)[index(r)];
        j["posteriors"] = v;
    }
    json alerts = json::array();
    for (const auto& a : d.alerts) alerts.push_back(alert::to_json(a));
    j["alerts"] = alerts;
    return j;
}

DayScorer::DayScorer(const models::ModelBundle& bundle, std::optional<alert::BayesModel> bayes, alert::CostSpec cost)
    : bundle_(&bundle), extractor_(bundle.universe) {
    bundle.check_widths();
    if (!bundle.has_any_model()) throw ValidationError("no trained model in the bundle");
    const auto& names = extractor_.feature_names();
    for (const auto& f : bundle.pipeline.feature_names) {
        const auto it = std::find(names.begin(), names.end(), f);
        if (it == names.end())
            throw ValidationError("pipeline feature '" + f + "' is not produced by the configured universe");
        columns_.push_back(std::size_t(it - names.begin()));
    }
    if (bayes) alerts_.emplace(std::move(*bayes), cost);
}

DayResult DayScorer::push_day(Date day, std::span<const Record* const> records) {
    if (last_day_ && day <= *last_day_) throw ValidationError("days must be pushed in increasing order");
    last_day_ = day;
    const auto raw = extractor_.push_day(day, records);
    std::vector<double> selected(columns_.size());
    for (std::size_t c = 0; c < columns_.size(); ++c) selected[c] = raw[columns_[c]];
    DayResult out;
    out.day = day;
    out.features = bundle_->pipeline.transform_row(selected, fill_state_);
    history_.push_back(out.features);
    const std::size_t lookback = bundle_->lookback;
    if (history_.size() > lookback + 1) history_.erase(history_.begin());
    if (history_.size() == lookback + 1) {
        Eigen::MatrixXd window(Eigen::Index(lookback), Eigen::Index(columns_.size()));
        for (std::size_t r = 0; r < lookback; ++r)
            for (std::size_t c = 0; c < columns_.size(); ++c)
                window(Eigen::Index(r), Eigen::Index(c)) = history_[r + 1][c];
        out.scores = bundle_->score_window(window);
        if (alerts_) {
            const auto combined = out.scores->combined();
            out.posteriors = alerts_->model().posteriors(combined);
            out.alerts = alerts_->push_posteriors(day.epoch_ms(), *out.posteriors, day.iso());
        }
    }
    return out;
}

void DayAssembler::add(const std::string& key, Date day, const std::map<std::string, double>& fields) {
    add(to_record(key, day, fields));
}

void DayAssembler::add(Record r) {
    if (r.kind == RecordKind::macro)
        pending_macro_.push_back(std::move(r));
    else
        days_[r.timestamp].push_back(std::move(r));
}

std::vector<std::pair<Date, RecordSet>> DayAssembler::take_ready(Date through) {
    std::vector<std::pair<Date, RecordSet>> out;
    while (!days_.empty() && days_.begin()->first <= through) {
        auto node = days_.extract(days_.begin());
        RecordSet& day = node.mapped();
        const bool has_stock =
            std::any_of(day.begin(), day.end(), [](const Record& r) { return r.kind == RecordKind::stock; });
        if (!has_stock) continue;
        RecordSet records;
        std::stable_sort(pending_macro_.begin(), pending_macro_.end(),
                         [](const Record& a, const Record& b) { return a.timestamp < b.timestamp; });
        auto keep = std::stable_partition(pending_macro_.begin(), pending_macro_.end(),
                                          [&](const Record& r) { return r.timestamp <= node.key(); });
        records.insert(records.end(), pending_macro_.begin(), keep);
        pending_macro_.erase(pending_macro_.begin(), keep);
        std::sort(day.begin(), day.end(), [](const Record& a, const Record& b) {
            return std::tie(a.kind, a.instrument) < std::tie(b.kind, b.instrument);
        });
        records.insert(records.end(), day.begin(), day.end());
        out.emplace_back(node.key(), std::move(records));
    }
    return out;
}

Percentiles percentiles(std::vector<double> v) {
    Percentiles p;
    if (v.empty()) return p;
    std::sort(v.begin(), v.end());
    auto rank = [&](double q) {
        const auto k = std::size_t(std::ceil(q * double(v.size())));
        return v[std::clamp<std::size_t>(k, 1, v.size()) - 1];
    };
    p.p50 = rank(0.50);
    p.p95 = rank(0.95);
    p.p99 = rank(0.99);
    return p;
}

json to_json(const PipelineMetrics& m) {
    json stages = json::array();
    for (const auto& s : m.stages)
        stages.push_back({{"stage", s.name}, {"items", s.items}, {"seconds", s.seconds}, {"throughput", s.throughput()}});
    return {{"events", m.events},
            {"duplicates", m.duplicates},
            {"late_updates", m.late_updates},
            {"dropped", m.dropped},
            {"days_scored", m.days_scored},
            {"alerts", m.alerts},
            {"stages", stages},
            {"latency_ms", {{"p50", m.latency_ms.p50}, {"p95", m.latency_ms.p95}, {"p99", m.latency_ms.p99}}}};
}

PipelineResult run_pipeline(std::span<const StreamEvent> events, DayScorer& scorer, const PipelineConfig& cfg) {
    PipelineResult out;
    if (events.empty()) {
        out.metrics.stages = {{"ingest"}, {"features"}, {"scoring"}, {"alerting"}};
        return out;
    }
    WindowRunConfig wc;
    wc.window = WindowSpec::tumbling(kDayMs, cfg.allowed_lateness);
    wc.out_of_orderness = cfg.out_of_orderness;
    wc.sources = cfg.sources;
    wc.workers = cfg.workers;

    const auto t_ingest = Clock::now();
    auto run = run_windows(events, wc);
    const double ingest_s = seconds_since(t_ingest);

    DayAssembler assembler;
    double feature_s = 0.0, scoring_s = 0.0;
    std::size_t scored = 0;
    std::vector<double> latencies;
    std::size_t i = 0;
    while (i < run.emissions.size()) {
        const std::size_t epoch = run.emissions[i].epoch;
        for (; i < run.emissions.size() && run.emissions[i].epoch == epoch; ++i) {
            const auto& em = run.emissions[i].emission;
            out.windows.push_back(em);
            if (em.late_update) continue;
            std::map<std::string, double> fields;
            for (const auto& [name, a] : em.fields) fields[name] = a.mean;
            assembler.add(em.key, Date::from_epoch_ms(em.window.start), fields);
        }
        const Millis wm = run.watermarks[epoch - 1];
        const Date through = wm == kEndOfStream ? Date{std::numeric_limits<std::int32_t>::max()}
                                                : Date::from_epoch_ms(wm - kDayMs);
        const auto t0 = Clock::now();
        auto ready = assembler.take_ready(through);
        feature_s += seconds_since(t0);
        for (auto& [day, records] : ready) {
            std::vector<const Record*> ptrs;
            for (const auto& r : records) ptrs.push_back(&r);
            const auto t1 = Clock::now();
            auto result = scorer.push_day(day, ptrs);
            scoring_s += seconds_since(t1);
            if (result.scores) ++scored;
            out.alerts.insert(out.alerts.end(), result.alerts.begin(), result.alerts.end());
            latencies.push_back(std::chrono::duration<double, std::milli>(Clock::now() - run.epoch_opened[epoch - 1])
                                    .count());
            out.days.push_back(std::move(result));
        }
    }

    auto& m = out.metrics;
    m.events = run.events;
    m.duplicates = run.duplicates;
    m.late_updates = run.stats.late_updates;
    m.dropped = run.stats.dropped;
    m.days_scored = scored;
    m.alerts = out.alerts.size();
    m.stages = {{"ingest", run.events, ingest_s},
                {"features", out.days.size(), feature_s},
                {"scoring", scored, scoring_s},
                {"alerting", scored, 0.0}};
    m.latency_ms = percentiles(latencies);
    return out;
}

} // namespace riskwatch::stream
