#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "riskwatch/alert.hpp"
#include "riskwatch/models.hpp"
#include "riskwatch/stream.hpp"

namespace riskwatch::service {

enum class Role { reader, writer, admin };
std::string_view to_string(Role r);
Role parse_role(std::string_view name);

struct ApiToken {
    std::string secret;
    Role role = Role::reader;
};

/// Comparison time depends only on the lengths.
bool constant_time_equal(std::string_view a, std::string_view b);

class TokenTable {
  public:
    TokenTable() = default;
    explicit TokenTable(std::vector<ApiToken> tokens);
    /// Throws ValidationError for secrets shorter than 32 characters or duplicates.
    void add(ApiToken token);
    /// Checks the secret against every entry without early exit.
    std::optional<Role> authenticate(std::string_view secret) const;
    std::size_t size() const { return tokens_.size(); }

  private:
    std::vector<ApiToken> tokens_;
};

/// `{"timestamp", "instrument", "kind", "fields": {...}, "labels"}`; missing cells are omitted.
nlohmann::json record_to_json(const Record& r);
Record record_from_json(const nlohmann::json& j);
/// JSON-lines body; throws ParseError naming the first bad line.
RecordSet parse_record_lines(std::string_view body);

/// Parses `YYYY-MM-DD` or `YYYY-MM-DDTHH:MM:SS[.fff][Z|+HH:MM|-HH:MM]` into epoch milliseconds.
std::int64_t parse_timestamp_ms(std::string_view text);

/// Append-only record log (`records.log`, one JSON line per record tagged with its batch) plus a
/// periodic snapshot index (`index.json`: validated byte offset and the first offset of each
/// day). Opening the store recovers it: a torn or corrupt final record is truncated with a
/// warning; a damaged record followed by more data inside the snapshotted prefix is an IoError.
class RecordStore {
  public:
    struct Entry {
        std::uint64_t batch = 0;
        std::uint64_t offset = 0;
        Record record;
    };

    explicit RecordStore(std::filesystem::path dir, std::size_t snapshot_every = 1000);
    ~RecordStore();
    RecordStore(const RecordStore&) = delete;
    RecordStore& operator=(const RecordStore&) = delete;

    /// Writes and fsyncs the batch; returns its batch id.
    std::uint64_t append(const RecordSet& batch);
    /// Rewrites the index at the current end of the log.
    void snapshot();

    const std::vector<Entry>& entries() const { return entries_; }
    const std::vector<std::string>& warnings() const { return warnings_; }
    std::uint64_t batches() const { return next_batch_; }
    std::uint64_t log_size() const { return size_; }
    std::uint64_t snapshot_offset() const { return snapshot_offset_; }
    /// Log offset of the first record dated `day`, from the in-memory index.
    std::optional<std::uint64_t> first_offset(Date day) const;
    const std::filesystem::path& dir() const { return dir_; }

  private:
    void recover();

    std::filesystem::path dir_;
    std::size_t snapshot_every_;
    int fd_ = -1;
    std::uint64_t size_ = 0;
    std::uint64_t snapshot_offset_ = 0;
    std::size_t since_snapshot_ = 0;
    std::uint64_t next_batch_ = 0;
    std::vector<Entry> entries_;
    std::map<Date, std::uint64_t> day_offsets_;
    std::vector<std::string> warnings_;
};

struct ServiceConfig {
    std::string bind = "127.0.0.1";
    int port = 8080;
    std::filesystem::path store = "riskwatch-store";
    std::optional<std::filesystem::path> models;
    std::optional<std::filesystem::path> bayes;
    std::vector<ApiToken> tokens;
    std::size_t max_body_bytes = 32u << 20;
    std::size_t snapshot_every = 1000;
    std::size_t threads = 8;

    /// Key-value file (`key = value`, `#` comments, repeated `token = <role>:<secret>`), then
    /// RISKWATCH_* environment overrides: env > file > default.
    static ServiceConfig load(const std::optional<std::filesystem::path>& file,
                              const std::map<std::string, std::string>& env);
    /// RISKWATCH_* variables of the current process.
    static std::map<std::string, std::string> environment();
    /// One key-value setting; `replace_tokens` drops earlier tokens instead of adding to them.
    void set(const std::string& key, const std::string& value, bool replace_tokens = false);
    void apply_env(const std::map<std::string, std::string>& env);
    void validate() const;
};

struct RiskAssessment {
    Date day;
    models::ModelScores scores;
    std::optional<RiskVector> posteriors;
    std::map<std::string, std::string> versions;
    /// Instruments that reported on this day.
    std::vector<std::string> instruments;
};

nlohmann::json to_json(const RiskAssessment& a);

/// Transport-independent request and response.
struct ApiRequest {
    std::string method;
    std::string path;
    std::multimap<std::string, std::string> params;
    /// Raw Authorization header value.
    std::string authorization;
    std::string body;
};

struct ApiResponse {
    int status = 200;
    nlohmann::json body;
};

struct AlertQuery {
    std::optional<std::int64_t> since_ms;
    std::optional<RiskType> risk;
    std::size_t limit = 100;
    /// Alert sequence number to resume from (decoded cursor).
    std::size_t start = 0;

    /// From `since`, `risk_type`, `limit` (1..1000) and `cursor`; ValidationError on bad values.
    static AlertQuery parse(const std::multimap<std::string, std::string>& params);
};

struct AlertPage {
    std::vector<alert::AlertEvent> alerts;
    std::optional<std::string> next_cursor;
};

std::string encode_cursor(std::size_t seq);
std::size_t decode_cursor(std::string_view cursor);
AlertPage paginate_alerts(std::span<const alert::AlertEvent> alerts, const AlertQuery& q);

/// Error body `{code, message, details}`.
ApiResponse error_response(int status, std::string code, std::string message,
                           nlohmann::json details = nlohmann::json::object());

/// Minimum role for an endpoint, nullopt for public endpoints. Throws std::out_of_range for
/// unknown routes.
std::optional<Role> required_role(std::string_view method, std::string_view path);

class RiskService {
  public:
    /// Loads models and calibration from the configured paths (either may be absent), then
    /// recovers the store and replays it.
    explicit RiskService(ServiceConfig cfg);
    RiskService(ServiceConfig cfg, std::optional<models::ModelBundle> bundle,
                std::optional<alert::BayesModel> bayes, alert::CostSpec cost = {});
    ~RiskService();

    ApiResponse handle(const ApiRequest& req);

    /// Appends durably, then scores every completed day up to the batch's latest date.
    std::size_t ingest(const RecordSet& batch);

    bool models_loaded() const { return bundle_.has_value(); }
    std::vector<RiskAssessment> assessments() const;
    std::vector<alert::AlertEvent> alerts() const;
    std::vector<std::string> warnings() const;
    std::size_t record_count() const;
    const ServiceConfig& config() const { return cfg_; }

  private:
    /// Builds the scorer, recovers the store and replays it batch by batch.
    void open();
    void process(const RecordSet& batch);
    ApiResponse post_data(const ApiRequest& req);
    ApiResponse risk_latest(const ApiRequest& req) const;
    ApiResponse list_alerts(const ApiRequest& req) const;
    ApiResponse history(const ApiRequest& req) const;
    ApiResponse status() const;
    ApiResponse force_snapshot();

    ServiceConfig cfg_;
    TokenTable tokens_;
    std::optional<models::ModelBundle> bundle_;
    std::optional<alert::BayesModel> bayes_;
    alert::CostSpec cost_;
    std::unique_ptr<stream::DayScorer> scorer_;
    stream::DayAssembler assembler_;
    std::unique_ptr<RecordStore> store_;
    std::vector<RiskAssessment> assessments_;
    std::vector<alert::AlertEvent> alerts_;
    std::set<std::string, std::less<>> known_instruments_;
    std::size_t late_records_ = 0;
    mutable std::shared_mutex mu_;
};

/// HTTP/1.1 front end over RiskService.
class HttpServer {
  public:
    explicit HttpServer(RiskService& service);
    ~HttpServer();
    /// Binds to the configured address; port 0 picks a free port. Returns the bound port.
    int bind();
    /// Serves until stop(); call after bind().
    void run();
    void stop();

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace riskwatch::service
