#include "riskwatch/service.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>

#include "httplib.h"

namespace riskwatch::service {

using nlohmann::json;

namespace {

int rank(Role r) { return static_cast<int>(r); }

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::optional<std::string> param(const std::multimap<std::string, std::string>& params, const std::string& name) {
    const auto it = params.find(name);
    if (it == params.end()) return std::nullopt;
    return it->second;
}

template <class T>
T parse_integer(std::string_view text, const std::string& what) {
    T v{};
    const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || p != text.data() + text.size() || text.empty())
        throw ValidationError(what + " must be an integer, got '" + std::string(text) + "'");
    return v;
}

std::string errno_text() { return std::strerror(errno); }

void write_all(int fd, std::string_view data, const std::filesystem::path& path) {
    while (!data.empty()) {
        const ssize_t n = ::write(fd, data.data(), data.size());
        if (n < 0) {
            if (errno == EINTR) continue;
            throw IoError("write " + path.string() + ": " + errno_text());
        }
        data.remove_prefix(std::size_t(n));
    }
}

void write_file_durably(const std::filesystem::path& path, const std::string& content) {
    const auto tmp = path.string() + ".tmp";
    const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) throw IoError("open " + tmp + ": " + errno_text());
    try {
        write_all(fd, content, tmp);
        if (::fsync(fd) != 0) throw IoError("fsync " + tmp + ": " + errno_text());
    } catch (...) {
        ::close(fd);
        throw;
    }
    ::close(fd);
    std::filesystem::rename(tmp, path);
}

json series_point(Date day, double v) { return {{"date", day.iso()}, {"value", v}}; }

} // namespace

std::string_view to_string(Role r) {
    switch (r) {
    case Role::reader: return "reader";
    case Role::writer: return "writer";
    case Role::admin: return "admin";
    }
    return "?";
}

Role parse_role(std::string_view name) {
    if (name == "reader") return Role::reader;
    if (name == "writer") return Role::writer;
    if (name == "admin") return Role::admin;
    throw ValidationError("unknown role '" + std::string(name) + "'");
}

bool constant_time_equal(std::string_view a, std::string_view b) {
    const std::size_t n = std::max(a.size(), b.size());
    unsigned char diff = a.size() == b.size() ? 0 : 1;
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char x = i < a.size() ? static_cast<unsigned char>(a[i]) : 0;
        const unsigned char y = i < b.size() ? static_cast<unsigned char>(b[i]) : 0;
        diff |= static_cast<unsigned char>(x ^ y);
    }
    return diff == 0;
}

TokenTable::TokenTable(std::vector<ApiToken> tokens) {
    for (auto& t : tokens) add(std::move(t));
}

void TokenTable::add(ApiToken token) {
    if (token.secret.size() < 32) throw ValidationError("API tokens must be at least 32 characters");
    for (const auto& t : tokens_)
        if (t.secret == token.secret) throw ValidationError("duplicate API token");
    tokens_.push_back(std::move(token));
}

std::optional<Role> TokenTable::authenticate(std::string_view secret) const {
    std::optional<Role> found;
    for (const auto& t : tokens_)
        if (constant_time_equal(t.secret, secret) && !found) found = t.role;
    return found;
}

json record_to_json(const Record& r) {
    json fields = json::object();
    const auto names = kind_fields(r.kind);
    for (std::size_t i = 0; i < names.size() && i < r.values.size(); ++i)
        if (!r.missing(i)) fields[std::string(names[i])] = r.values[i];
    json j = {{"timestamp", r.timestamp.iso()},
              {"instrument", r.instrument},
              {"kind", to_string(r.kind)},
              {"fields", fields}};
    if (!r.labels.empty()) j["labels"] = r.labels.str();
    return j;
}

Record record_from_json(const json& j) {
    if (!j.is_object()) throw ParseError("record must be a JSON object");
    Record r;
    try {
        r.timestamp = Date::parse(j.at("timestamp").get<std::string>());
        r.instrument = j.at("instrument").get<std::string>();
        r.kind = parse_record_kind(j.at("kind").get<std::string>());
        if (j.contains("labels")) r.labels = RiskMask::parse(j["labels"].get<std::string>());
        const auto names = kind_fields(r.kind);
        r.values.assign(names.size(), kMissing);
        for (const auto& [name, v] : j.at("fields").items()) {
            const int i = field_index(r.kind, name);
            if (i < 0)
                throw ParseError("field '" + name + "' is not part of kind " + std::string(to_string(r.kind)));
            if (v.is_null()) continue;
            const double x = v.get<double>();
            if (!std::isfinite(x)) throw ParseError("field '" + name + "' is not finite");
            r.values[std::size_t(i)] = x;
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed record: ") + e.what());
    } catch (const ValidationError& e) {
        throw ParseError(e.what());
    }
    if (r.instrument.empty()) throw ParseError("empty instrument");
    return r;
}

RecordSet parse_record_lines(std::string_view body) {
    RecordSet out;
    std::size_t line_no = 0;
    while (!body.empty()) {
        const auto nl = body.find('\n');
        const auto line = trim(body.substr(0, nl));
        body.remove_prefix(nl == std::string_view::npos ? body.size() : nl + 1);
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(record_from_json(json::parse(line)));
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("invalid JSON: ") + e.what(), line_no);
        } catch (const ParseError& e) {
            throw ParseError(e.what(), line_no);
        }
    }
    return out;
}

std::int64_t parse_timestamp_ms(std::string_view text) {
    const auto fail = [&] { return ValidationError("not an ISO-8601 timestamp: '" + std::string(text) + "'"); };
    if (text.size() < 10) throw fail();
    Date day;
    try {
        day = Date::parse(text.substr(0, 10));
    } catch (const std::exception&) {
        throw fail();
    }
    std::int64_t ms = day.epoch_ms();
    std::string_view rest = text.substr(10);
    if (rest.empty()) return ms;
    if (rest[0] != 'T' && rest[0] != 't' && rest[0] != ' ') throw fail();
    rest.remove_prefix(1);
    auto two = [&](std::string_view s) {
        if (s.size() < 2 || !std::isdigit(static_cast<unsigned char>(s[0])) ||
            !std::isdigit(static_cast<unsigned char>(s[1])))
            throw fail();
        return (s[0] - '0') * 10 + (s[1] - '0');
    };
    const int hh = two(rest);
    if (rest.size() < 5 || rest[2] != ':') throw fail();
    const int mm = two(rest.substr(3));
    rest.remove_prefix(5);
    int ss = 0;
    if (!rest.empty() && rest[0] == ':') {
        ss = two(rest.substr(1));
        rest.remove_prefix(3);
    }
    int frac_ms = 0;
    if (!rest.empty() && rest[0] == '.') {
        rest.remove_prefix(1);
        int digits = 0;
        while (!rest.empty() && std::isdigit(static_cast<unsigned char>(rest[0]))) {
            if (digits < 3) frac_ms = frac_ms * 10 + (rest[0] - '0');
            ++digits;
            rest.remove_prefix(1);
        }
        if (digits == 0) throw fail();
        for (int d = digits; d < 3; ++d) frac_ms *= 10;
    }
    if (hh > 23 || mm > 59 || ss > 60) throw fail();
    ms += ((hh * 60 + mm) * 60 + ss) * 1000LL + frac_ms;
    if (rest.empty() || rest == "Z" || rest == "z") return ms;
    if ((rest[0] == '+' || rest[0] == '-') && rest.size() == 6 && rest[3] == ':') {
        const int offset = (two(rest.substr(1)) * 60 + two(rest.substr(4))) * 60'000;
        return rest[0] == '+' ? ms - offset : ms + offset;
    }
    throw fail();
}

// ---------------------------------------------------------------------------

RecordStore::RecordStore(std::filesystem::path dir, std::size_t snapshot_every)
    : dir_(std::move(dir)), snapshot_every_(snapshot_every) {
    if (snapshot_every_ == 0) throw ValidationError("snapshot interval must be positive");
    std::filesystem::create_directories(dir_);
    recover();
}

RecordStore::~RecordStore() {
    if (fd_ >= 0) ::close(fd_);
}

void RecordStore::recover() {
    const auto log_path = dir_ / "records.log";
    const auto index_path = dir_ / "index.json";

    if (std::filesystem::exists(index_path)) {
        std::ifstream in(index_path);
        try {
            const auto j = json::parse(in);
            if (j.at("format") != "riskwatch.store-index") throw std::runtime_error("wrong format");
            snapshot_offset_ = j.at("offset").get<std::uint64_t>();
        } catch (const std::exception& e) {
            warnings_.push_back("snapshot index unreadable, ignored: " + std::string(e.what()));
            snapshot_offset_ = 0;
        }
    }

    std::string data;
    if (std::filesystem::exists(log_path)) {
        std::ifstream in(log_path, std::ios::binary);
        if (!in) throw IoError("cannot open " + log_path.string());
        std::ostringstream ss;
        ss << in.rdbuf();
        data = std::move(ss).str();
    }
    if (data.size() < snapshot_offset_) {
        warnings_.push_back("record log is shorter than its snapshot index (" + std::to_string(data.size()) + " < " +
                            std::to_string(snapshot_offset_) + " bytes); index rebuilt");
        snapshot_offset_ = 0;
    }

    std::uint64_t pos = 0;
    std::size_t line_no = 0;
    bool snapshot_on_boundary = snapshot_offset_ == 0;
    while (pos < data.size()) {
        ++line_no;
        const auto nl = data.find('\n', pos);
        auto damaged = [&](const std::string& why) {
            const bool final_line = nl == std::string::npos || nl + 1 == data.size();
            if (pos < snapshot_offset_ && !final_line)
                throw IoError("record log corrupt at line " + std::to_string(line_no) +
                              " inside the snapshotted prefix: " + why);
            warnings_.push_back("record log truncated at line " + std::to_string(line_no) + " (offset " +
                                std::to_string(pos) + "): " + why);
        };
        if (nl == std::string::npos) {
            damaged("incomplete final record");
            break;
        }
        try {
            const auto j = json::parse(std::string_view(data).substr(pos, nl - pos));
            Entry e{j.at("batch").get<std::uint64_t>(), pos, record_from_json(j.at("record"))};
            next_batch_ = std::max(next_batch_, e.batch + 1);
            day_offsets_.try_emplace(e.record.timestamp, pos);
            entries_.push_back(std::move(e));
        } catch (const std::exception& ex) {
            damaged(ex.what());
            break;
        }
        pos = nl + 1;
        if (pos == snapshot_offset_) snapshot_on_boundary = true;
    }
    if (!snapshot_on_boundary) {
        warnings_.push_back("snapshot index offset is not on a record boundary; index rebuilt");
        snapshot_offset_ = 0;
    }
    size_ = pos;
    if (pos < data.size()) std::filesystem::resize_file(log_path, pos);

    fd_ = ::open(log_path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    if (fd_ < 0) throw IoError("open " + log_path.string() + ": " + errno_text());
    if (snapshot_offset_ != size_) snapshot();
}

std::uint64_t RecordStore::append(const RecordSet& batch) {
    const std::uint64_t id = next_batch_;
    std::string buf;
    std::vector<std::uint64_t> offsets;
    for (const auto& r : batch) {
        offsets.push_back(size_ + buf.size());
        buf += json{{"batch", id}, {"record", record_to_json(r)}}.dump();
        buf += '\n';
    }
    write_all(fd_, buf, dir_ / "records.log");
    if (::fsync(fd_) != 0) throw IoError("fsync record log: " + errno_text());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        day_offsets_.try_emplace(batch[i].timestamp, offsets[i]);
        entries_.push_back({id, offsets[i], batch[i]});
    }
    size_ += buf.size();
    ++next_batch_;
    since_snapshot_ += batch.size();
    if (since_snapshot_ >= snapshot_every_) snapshot();
    return id;
}

void RecordStore::snapshot() {
    json days = json::array();
    for (const auto& [day, offset] : day_offsets_) days.push_back({day.iso(), offset});
    const json j = {{"format", "riskwatch.store-index"},
                    {"version", 1},
                    {"offset", size_},
                    {"records", entries_.size()},
                    {"batches", next_batch_},
                    {"days", days}};
    write_file_durably(dir_ / "index.json", j.dump());
    snapshot_offset_ = size_;
    since_snapshot_ = 0;
}

std::optional<std::uint64_t> RecordStore::first_offset(Date day) const {
    const auto it = day_offsets_.find(day);
    if (it == day_offsets_.end()) return std::nullopt;
    return it->second;
}

// ---------------------------------------------------------------------------

void ServiceConfig::set(const std::string& key, const std::string& value, bool replace_tokens) {
    if (key == "bind")
        bind = value;
    else if (key == "port")
        port = parse_integer<int>(value, "port");
    else if (key == "store")
        store = value;
    else if (key == "models")
        models = value.empty() ? std::nullopt : std::optional<std::filesystem::path>(value);
    else if (key == "bayes")
        bayes = value.empty() ? std::nullopt : std::optional<std::filesystem::path>(value);
    else if (key == "max_body_bytes")
        max_body_bytes = parse_integer<std::size_t>(value, "max_body_bytes");
    else if (key == "snapshot_every")
        snapshot_every = parse_integer<std::size_t>(value, "snapshot_every");
    else if (key == "threads")
        threads = parse_integer<std::size_t>(value, "threads");
    else if (key == "token" || key == "tokens") {
        std::vector<ApiToken> parsed;
        std::stringstream ss(value);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (item.empty()) continue;
            const auto colon = item.find(':');
            if (colon == std::string::npos) throw ValidationError("token entries are <role>:<secret>");
            parsed.push_back({item.substr(colon + 1), parse_role(item.substr(0, colon))});
        }
        if (replace_tokens) tokens.clear();
        tokens.insert(tokens.end(), parsed.begin(), parsed.end());
    } else
        throw ValidationError("unknown config key '" + key + "'");
}

void ServiceConfig::apply_env(const std::map<std::string, std::string>& env) {
    static const std::map<std::string, std::string> env_keys = {
        {"RISKWATCH_BIND", "bind"},
        {"RISKWATCH_PORT", "port"},
        {"RISKWATCH_STORE", "store"},
        {"RISKWATCH_MODELS", "models"},
        {"RISKWATCH_BAYES", "bayes"},
        {"RISKWATCH_MAX_BODY_BYTES", "max_body_bytes"},
        {"RISKWATCH_SNAPSHOT_EVERY", "snapshot_every"},
        {"RISKWATCH_THREADS", "threads"},
        {"RISKWATCH_TOKENS", "tokens"}};
    for (const auto& [var, key] : env_keys)
        if (const auto it = env.find(var); it != env.end()) set(key, it->second, true);
}

ServiceConfig ServiceConfig::load(const std::optional<std::filesystem::path>& file,
                                  const std::map<std::string, std::string>& env) {
    ServiceConfig c;
    if (file) {
        std::ifstream in(*file);
        if (!in) throw IoError("cannot open config " + file->string());
        std::string line;
        std::size_t n = 0;
        while (std::getline(in, line)) {
            ++n;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ParseError("expected key = value", n);
            try {
                c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
            } catch (const ValidationError& e) {
                throw ParseError(e.what(), n);
            }
        }
    }
    c.apply_env(env);
    c.validate();
    return c;
}

std::map<std::string, std::string> ServiceConfig::environment() {
    std::map<std::string, std::string> out;
    for (const char* var : {"RISKWATCH_BIND", "RISKWATCH_PORT", "RISKWATCH_STORE", "RISKWATCH_MODELS",
                            "RISKWATCH_BAYES", "RISKWATCH_MAX_BODY_BYTES", "RISKWATCH_SNAPSHOT_EVERY",
                            "RISKWATCH_THREADS", "RISKWATCH_TOKENS"})
        if (const char* v = std::getenv(var)) out[var] = v;
    return out;
}

void ServiceConfig::validate() const {
    if (port < 0 || port > 65535) throw ValidationError("port must lie in [0, 65535]");
    if (max_body_bytes == 0) throw ValidationError("max_body_bytes must be positive");
    if (snapshot_every == 0) throw ValidationError("snapshot_every must be positive");
    if (threads == 0) throw ValidationError("threads must be positive");
    TokenTable check(tokens);
}

json to_json(const RiskAssessment& a) {
    auto vec = [](const RiskVector& v) {
        json o = json::object();
        for (auto r : kAllRiskTypes) o[std::string(to_string(r))] = v[index(r)];
        return o;
    };
    json scores = json::object();
    for (auto k : models::kAllModelKinds)
        if (const auto& s = a.scores.get(k)) scores[std::string(to_string(k))] = vec(*s);
    json j = {{"date", a.day.iso()},
              {"timestamp_ms", a.day.epoch_ms()},
              {"scores", scores},
              {"combined", vec(a.scores.combined())},
              {"posteriors", a.posteriors ? vec(*a.posteriors) : json(nullptr)},
              {"versions", a.versions},
              {"instruments", a.instruments}};
    return j;
}

// ---------------------------------------------------------------------------

AlertQuery AlertQuery::parse(const std::multimap<std::string, std::string>& params) {
    AlertQuery q;
    if (auto v = param(params, "since")) q.since_ms = parse_timestamp_ms(*v);
    if (auto v = param(params, "risk_type")) {
        q.risk = try_parse_risk_type(*v);
        if (!q.risk) throw ValidationError("unknown risk_type '" + *v + "'");
    }
    if (auto v = param(params, "limit")) {
        const auto limit = parse_integer<long long>(*v, "limit");
        if (limit < 1 || limit > 1000) throw ValidationError("limit must lie in [1, 1000]");
        q.limit = std::size_t(limit);
    }
    if (auto v = param(params, "cursor")) q.start = decode_cursor(*v);
    return q;
}

std::string encode_cursor(std::size_t seq) {
    std::ostringstream ss;
    ss << "a" << std::hex << seq;
    return ss.str();
}

std::size_t decode_cursor(std::string_view cursor) {
    if (cursor.size() < 2 || cursor[0] != 'a') throw ValidationError("invalid cursor");
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(cursor.data() + 1, cursor.data() + cursor.size(), v, 16);
    if (ec != std::errc{} || p != cursor.data() + cursor.size()) throw ValidationError("invalid cursor");
    return v;
}

AlertPage paginate_alerts(std::span<const alert::AlertEvent> alerts, const AlertQuery& q) {
    if (q.start > alerts.size()) throw ValidationError("cursor is past the end of the alert log");
    auto matches = [&](const alert::AlertEvent& a) {
        return (!q.since_ms || a.timestamp_ms >= *q.since_ms) && (!q.risk || a.risk_type == *q.risk);
    };
    AlertPage page;
    std::size_t i = q.start;
    for (; i < alerts.size() && page.alerts.size() < q.limit; ++i)
        if (matches(alerts[i])) page.alerts.push_back(alerts[i]);
    for (std::size_t j = i; j < alerts.size(); ++j)
        if (matches(alerts[j])) {
            page.next_cursor = encode_cursor(i);
            break;
        }
    return page;
}

ApiResponse error_response(int status, std::string code, std::string message, json details) {
    return {status, {{"code", std::move(code)}, {"message", std::move(message)}, {"details", std::move(details)}}};
}

namespace {

struct Route {
    std::string_view method;
    std::string_view path;
    std::optional<Role> role;
};

constexpr Route kRoutes[] = {
    {"GET", "/api/v1/health", std::nullopt},
    {"POST", "/api/v1/data", Role::writer},
    {"GET", "/api/v1/risk/latest", Role::reader},
    {"GET", "/api/v1/alerts", Role::reader},
    {"GET", "/api/v1/history", Role::reader},
    {"GET", "/api/v1/admin/status", Role::admin},
    {"POST", "/api/v1/admin/snapshot", Role::admin},
};

bool known_path(std::string_view path) {
    return std::any_of(std::begin(kRoutes), std::end(kRoutes), [&](const Route& r) { return r.path == path; });
}

} // namespace

std::optional<Role> required_role(std::string_view method, std::string_view path) {
    for (const auto& r : kRoutes)
        if (r.method == method && r.path == path) return r.role;
    throw std::out_of_range("no route " + std::string(method) + " " + std::string(path));
}

// ---------------------------------------------------------------------------

RiskService::RiskService(ServiceConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    tokens_ = TokenTable(cfg_.tokens);
    if (cfg_.models) {
        auto b = models::load_bundle(*cfg_.models);
        if (b.has_any_model()) bundle_ = std::move(b);
    }
    if (cfg_.bayes) bayes_ = alert::load_bayes(*cfg_.bayes, &cost_);
    open();
}

RiskService::RiskService(ServiceConfig cfg, std::optional<models::ModelBundle> bundle,
                         std::optional<alert::BayesModel> bayes, alert::CostSpec cost)
    : cfg_(std::move(cfg)), bundle_(std::move(bundle)), bayes_(std::move(bayes)), cost_(cost) {
    cfg_.validate();
    tokens_ = TokenTable(cfg_.tokens);
    if (bundle_ && !bundle_->has_any_model()) bundle_.reset();
    open();
}

RiskService::~RiskService() = default;

void RiskService::open() {
    cost_.validate();
    if (bundle_) scorer_ = std::make_unique<stream::DayScorer>(*bundle_, bayes_, cost_);
    store_ = std::make_unique<RecordStore>(cfg_.store, cfg_.snapshot_every);
    for (const auto& w : store_->warnings()) std::cerr << "riskwatch: " << w << '\n';
    const auto& entries = store_->entries();
    for (std::size_t i = 0; i < entries.size();) {
        RecordSet batch;
        const auto id = entries[i].batch;
        for (; i < entries.size() && entries[i].batch == id; ++i) batch.push_back(entries[i].record);
        process(batch);
    }
}

std::size_t RiskService::ingest(const RecordSet& batch) {
    std::unique_lock lock(mu_);
    store_->append(batch);
    process(batch);
    return batch.size();
}

void RiskService::process(const RecordSet& batch) {
    for (const auto& r : batch) known_instruments_.insert(r.instrument);
    if (!scorer_ || batch.empty()) return;
    Date max_day = batch.front().timestamp;
    for (const auto& r : batch) {
        max_day = std::max(max_day, r.timestamp);
        if (r.kind != RecordKind::macro && scorer_->last_day() && r.timestamp <= *scorer_->last_day()) {
            ++late_records_;
            continue;
        }
        assembler_.add(r);
    }
    for (auto& [day, records] : assembler_.take_ready(max_day)) {
        std::vector<const Record*> ptrs;
        std::vector<std::string> instruments;
        for (const auto& r : records) {
            ptrs.push_back(&r);
            if (r.kind != RecordKind::macro) instruments.push_back(r.instrument);
        }
        auto result = scorer_->push_day(day, ptrs);
        if (!result.scores) continue;
        std::sort(instruments.begin(), instruments.end());
        instruments.erase(std::unique(instruments.begin(), instruments.end()), instruments.end());
        assessments_.push_back({day, *result.scores, result.posteriors, bundle_->versions, std::move(instruments)});
        alerts_.insert(alerts_.end(), result.alerts.begin(), result.alerts.end());
    }
}

std::vector<RiskAssessment> RiskService::assessments() const {
    std::shared_lock lock(mu_);
    return assessments_;
}

std::vector<alert::AlertEvent> RiskService::alerts() const {
    std::shared_lock lock(mu_);
    return alerts_;
}

std::vector<std::string> RiskService::warnings() const {
    std::shared_lock lock(mu_);
    return store_->warnings();
}

std::size_t RiskService::record_count() const {
    std::shared_lock lock(mu_);
    return store_->entries().size();
}

ApiResponse RiskService::handle(const ApiRequest& req) {
    std::optional<Role> needed;
    try {
        needed = required_role(req.method, req.path);
    } catch (const std::out_of_range&) {
        if (known_path(req.path)) return error_response(405, "method_not_allowed", req.method + " not supported here");
        return error_response(404, "not_found", "no such endpoint: " + req.path);
    }
    if (needed) {
        constexpr std::string_view prefix = "Bearer ";
        if (req.authorization.size() <= prefix.size() || req.authorization.compare(0, prefix.size(), prefix) != 0)
            return error_response(401, "unauthorized", "missing bearer token");
        const auto role = tokens_.authenticate(std::string_view(req.authorization).substr(prefix.size()));
        if (!role) return error_response(401, "unauthorized", "invalid token");
        if (rank(*role) < rank(*needed))
            return error_response(403, "forbidden", "requires the " + std::string(to_string(*needed)) + " role",
                                  {{"role", to_string(*role)}});
    }
    try {
        if (req.path == "/api/v1/health") return {200, {{"status", "ok"}}};
        if (req.path == "/api/v1/data") return post_data(req);
        if (req.path == "/api/v1/risk/latest") return risk_latest(req);
        if (req.path == "/api/v1/alerts") return list_alerts(req);
        if (req.path == "/api/v1/history") return history(req);
        if (req.path == "/api/v1/admin/status") return status();
        if (req.path == "/api/v1/admin/snapshot") return force_snapshot();
    } catch (const ParseError& e) {
        return error_response(400, "parse_error", e.what(), {{"line", e.line()}});
    } catch (const ValidationError& e) {
        return error_response(400, "bad_request", e.what());
    } catch (const std::exception& e) {
        return error_response(500, "internal", e.what());
    }
    return error_response(404, "not_found", "no such endpoint: " + req.path);
}

ApiResponse RiskService::post_data(const ApiRequest& req) {
    if (req.body.size() > cfg_.max_body_bytes)
        return error_response(413, "payload_too_large",
                              "body exceeds " + std::to_string(cfg_.max_body_bytes) + " bytes");
    const auto records = parse_record_lines(req.body);
    if (records.empty()) return error_response(400, "bad_request", "no records in body");
    const auto n = ingest(records);
    return {202, {{"accepted_count", n}}};
}

ApiResponse RiskService::risk_latest(const ApiRequest& req) const {
    std::shared_lock lock(mu_);
    if (!bundle_) return error_response(503, "models_unavailable", "no trained models are loaded");
    const auto instrument = param(req.params, "instrument");
    if (instrument && !known_instruments_.contains(*instrument))
        return error_response(404, "not_found", "unknown instrument '" + *instrument + "'");
    for (auto it = assessments_.rbegin(); it != assessments_.rend(); ++it) {
        if (instrument && !std::binary_search(it->instruments.begin(), it->instruments.end(), *instrument)) continue;
        auto body = to_json(*it);
        body["instrument"] = instrument ? json(*instrument) : json(nullptr);
        return {200, body};
    }
    return error_response(404, "not_found", "no assessment has been computed yet");
}

ApiResponse RiskService::list_alerts(const ApiRequest& req) const {
    const auto q = AlertQuery::parse(req.params);
    std::shared_lock lock(mu_);
    const auto page = paginate_alerts(alerts_, q);
    json list = json::array();
    for (const auto& a : page.alerts) list.push_back(alert::to_json(a));
    return {200, {{"alerts", list}, {"next_cursor", page.next_cursor ? json(*page.next_cursor) : json(nullptr)}}};
}

ApiResponse RiskService::history(const ApiRequest& req) const {
    auto date_param = [&](const char* name) -> std::optional<Date> {
        const auto v = param(req.params, name);
        if (!v) return std::nullopt;
        try {
            return Date::from_epoch_ms(parse_timestamp_ms(*v));
        } catch (const ValidationError&) {
            throw ValidationError(std::string(name) + " is not an ISO-8601 date: '" + *v + "'");
        }
    };
    const auto from = date_param("from");
    const auto to = date_param("to");
    if (from && to && *from > *to) throw ValidationError("inverted range: from is after to");
    const std::string metric = param(req.params, "metric").value_or("assessments");
    auto in_range = [&](Date d) { return (!from || d >= *from) && (!to || d <= *to); };

    std::shared_lock lock(mu_);
    json out = json::array();
    if (metric == "records") {
        std::map<Date, std::pair<std::map<std::string, std::size_t>, std::set<std::string>>> days;
        for (const auto& e : store_->entries())
            if (in_range(e.record.timestamp)) {
                auto& [kinds, instruments] = days[e.record.timestamp];
                ++kinds[std::string(to_string(e.record.kind))];
                instruments.insert(e.record.instrument);
            }
        for (const auto& [day, agg] : days) {
            std::size_t total = 0;
            for (const auto& [k, n] : agg.first) total += n;
            out.push_back({{"date", day.iso()}, {"records", total}, {"by_kind", agg.first},
                           {"instruments", agg.second.size()}});
        }
        return {200, out};
    }
    if (metric == "assessments") {
        for (const auto& a : assessments_)
            if (in_range(a.day)) out.push_back(to_json(a));
        return {200, out};
    }
    // <source>.<risk_type> series: posterior, combined, or a model name.
    const auto dot = metric.rfind('.');
    const auto risk = dot == std::string::npos ? std::nullopt : try_parse_risk_type(metric.substr(dot + 1));
    if (!risk)
        throw ValidationError("unknown metric '" + metric +
                              "'; expected assessments, records, or <posterior|combined|model>.<risk_type>");
    const auto source = metric.substr(0, dot);
    std::optional<models::ModelKind> kind;
    if (source != "posterior" && source != "combined") kind = models::parse_model_kind(source);
    for (const auto& a : assessments_) {
        if (!in_range(a.day)) continue;
        if (source == "posterior") {
            if (a.posteriors) out.push_back(series_point(a.day, (*a.posteriors)[index(*risk)]));
        } else if (source == "combined") {
            out.push_back(series_point(a.day, a.scores.combined()[index(*risk)]));
        } else if (const auto& s = a.scores.get(*kind)) {
            out.push_back(series_point(a.day, (*s)[index(*risk)]));
        }
    }
    return {200, out};
}

ApiResponse RiskService::status() const {
    std::shared_lock lock(mu_);
    return {200,
            {{"records", store_->entries().size()},
             {"batches", store_->batches()},
             {"log_bytes", store_->log_size()},
             {"snapshot_offset", store_->snapshot_offset()},
             {"assessments", assessments_.size()},
             {"alerts", alerts_.size()},
             {"late_records", late_records_},
             {"models_loaded", bundle_.has_value()},
             {"calibrated", bayes_.has_value()},
             {"versions", bundle_ ? json(bundle_->versions) : json::object()},
             {"warnings", store_->warnings()}}};
}

ApiResponse RiskService::force_snapshot() {
    std::unique_lock lock(mu_);
    store_->snapshot();
    return {200, {{"snapshot_offset", store_->snapshot_offset()}}};
}

// ---------------------------------------------------------------------------

struct HttpServer::Impl {
    RiskService& service;
    httplib::Server server;
    int port = -1;

    explicit Impl(RiskService& s) : service(s) {}
};

namespace {

std::string_view status_code_name(int status) {
    switch (status) {
    case 400: return "bad_request";
    case 401: return "unauthorized";
    case 403: return "forbidden";
    case 404: return "not_found";
    case 405: return "method_not_allowed";
    case 413: return "payload_too_large";
    case 503: return "unavailable";
    default: return status >= 500 ? "internal" : "error";
    }
}

} // namespace

HttpServer::HttpServer(RiskService& service) : impl_(std::make_unique<Impl>(service)) {
    auto& svr = impl_->server;
    const auto& cfg = service.config();
    svr.new_task_queue = [n = cfg.threads] { return new httplib::ThreadPool(n); };
    svr.set_payload_max_length(cfg.max_body_bytes);
    auto handler = [this](const httplib::Request& req, httplib::Response& res) {
        ApiRequest api{req.method, req.path, {req.params.begin(), req.params.end()},
                       req.get_header_value("Authorization"), req.body};
        const auto out = impl_->service.handle(api);
        res.status = out.status;
        res.set_content(out.body.dump(), "application/json");
    };
    const std::string any = R"(/.*)";
    svr.Get(any, handler);
    svr.Post(any, handler);
    svr.Put(any, handler);
    svr.Delete(any, handler);
    svr.Patch(any, handler);
    svr.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
        const auto err = error_response(res.status, std::string(status_code_name(res.status)),
                                        httplib::status_message(res.status));
        res.set_content(err.body.dump(), "application/json");
        return httplib::Server::HandlerResponse::Handled;
    });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind() {
    const auto& cfg = impl_->service.config();
    if (cfg.port == 0) {
        impl_->port = impl_->server.bind_to_any_port(cfg.bind);
        if (impl_->port < 0) throw IoError("cannot bind " + cfg.bind);
    } else {
        if (!impl_->server.bind_to_port(cfg.bind, cfg.port))
            throw IoError("cannot bind " + cfg.bind + ":" + std::to_string(cfg.port));
        impl_->port = cfg.port;
    }
    return impl_->port;
}

void HttpServer::run() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
    if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

} // namespace riskwatch::service
