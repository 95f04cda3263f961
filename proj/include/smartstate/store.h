#pragma once

// SQLite-backed system of record for one study: audit log, messages, fast
// records, participants, event journal and outbound queue.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <absl/time/time.h>
#include <nlohmann/json.hpp>

#include "smartstate/runtime.h"
#include "smartstate/study.h"

struct sqlite3;
struct sqlite3_stmt;

namespace smartstate::store {

namespace audit_kind {
inline constexpr std::string_view kMsgIn = "MSG_IN";
inline constexpr std::string_view kMsgOut = "MSG_OUT";
inline constexpr std::string_view kTransition = "TRANSITION";
inline constexpr std::string_view kManualTransition = "MANUAL_TRANSITION";
inline constexpr std::string_view kGroupReassigned = "GROUP_REASSIGNED";
inline constexpr std::string_view kCorrection = "CORRECTION";
inline constexpr std::string_view kFault = "FAULT";
inline constexpr std::string_view kConfigChange = "CONFIG_CHANGE";
}  // namespace audit_kind

bool is_audit_kind(std::string_view kind);

inline constexpr std::string_view kSystemActor = "system";

struct AuditRecord {
  std::uint64_t seq = 0;
  absl::Time at;
  std::string actor;
  std::string kind;
  std::string participant_id;  // empty when study-wide
  std::string study_id;
  nlohmann::json payload = nlohmann::json::object();
};

struct AuditFilter {
  std::optional<std::string> participant_id;
  std::optional<std::string> kind;
  std::optional<absl::Time> from;  // inclusive
  std::optional<absl::Time> to;    // exclusive
  std::optional<std::uint64_t> after_seq;
  std::optional<std::size_t> limit;
};

struct StoredMessage {
  std::int64_t id = 0;
  std::string direction;  // "in" | "out"
  std::string participant_id;
  std::string handle;
  std::string body;
  absl::Time at;
  std::string intent;           // inbound
  std::string idempotency_key;  // outbound
  std::string template_id;      // outbound
  std::string reply_class;      // outbound
  std::string provider_sid;     // inbound, optional
  std::uint64_t audit_seq = 0;
};

struct Participant {
  std::string participant_id;
  std::string handle;
  std::string study_id;
  absl::Time enrolled_at;
  std::string group_id;
  std::string status = "active";  // active | paused | completed
};

bool is_participant_status(std::string_view status);

struct AssignmentRow {
  std::string participant_id;
  std::string group_id;
  study::CycleDate effective_from;
  std::string assigned_by;
  bool forced = false;
  absl::Time at;
};

enum class JournalState { Pending = 0, Applied = 1, Parked = 2 };

struct JournalEntry {
  std::string participant_id;
  runtime::EngineEvent event;
  JournalState state = JournalState::Pending;
};

struct OutboxItem {
  std::string idempotency_key;
  std::string participant_id;
  std::string handle;
  std::string body;
  std::string template_id;
  std::string reply_class;
  std::string trigger;
  int attempts = 0;
  absl::Time next_attempt_at;
  std::string status = "pending";  // pending | delivered | failed
  std::string last_error;
  std::int64_t order = 0;  // insertion order
};

enum class Durability { Full, Fast };

// Thrown by the fault hook to simulate a transient storage failure.
class StorageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Store {
 public:
  Store(const std::filesystem::path& path, std::string study_id, Durability durability = Durability::Full);
  ~Store();
  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  const std::string& study_id() const { return study_id_; }
  const std::filesystem::path& path() const { return path_; }

  // RAII write transaction; rolls back unless committed. Not reentrant.
  class Transaction {
   public:
    explicit Transaction(Store& store);
    ~Transaction();
    Transaction(const Transaction&) = delete;
    Transaction& operator=(const Transaction&) = delete;
    void commit();

   private:
    Store& store_;
    bool done_ = false;
  };

  // Called with an operation name before each write; may throw StorageError.
  std::function<void(std::string_view)> fault_hook;

  // audit
  std::uint64_t append_audit(AuditRecord record);
  std::vector<AuditRecord> query_audit(const AuditFilter& filter = {}) const;
  std::uint64_t last_audit_seq() const;
  std::int64_t count_audit(std::string_view kind) const;

  // messages
  std::int64_t insert_message(const StoredMessage& m);
  std::vector<StoredMessage> messages(const std::optional<std::string>& participant_id = std::nullopt) const;
  bool has_inbound_sid(std::string_view provider_sid) const;

  // fast records
  void upsert_fast(const study::FastRecord& r);
  std::vector<study::FastRecord> fasts(const std::optional<std::string>& participant_id = std::nullopt) const;

  // participants and assignments
  void insert_participant(const Participant& p);
  std::optional<Participant> participant(std::string_view participant_id) const;
  std::optional<Participant> participant_by_handle(std::string_view handle) const;
  std::vector<Participant> participants() const;
  void update_participant_group(std::string_view participant_id, std::string_view group_id);
  void update_participant_status(std::string_view participant_id, std::string_view status);
  void insert_assignment(const AssignmentRow& a);
  std::vector<AssignmentRow> assignments(std::string_view participant_id) const;
  void archive_instance(const runtime::MachineInstance& instance, absl::Time at);
  std::int64_t count_archived(std::string_view participant_id) const;

  // event journal
  void append_journal(std::string_view participant_id, const runtime::EngineEvent& event);
  void set_journal_state(std::string_view participant_id, std::uint64_t seq, JournalState state);
  // Entries with seq > the participant's watermark (0 when absent), ordered by (participant, seq).
  std::vector<JournalEntry> journal_after(const std::function<std::uint64_t(const std::string&)>& watermark) const;

  // outbound queue
  bool enqueue_outbox(const OutboxItem& item);  // false when the key already exists
  std::vector<OutboxItem> due_outbox(absl::Time now) const;
  std::optional<OutboxItem> outbox_item(std::string_view key) const;
  void update_outbox(const OutboxItem& item);
  std::int64_t pending_outbox(const std::optional<std::string>& participant_id = std::nullopt) const;
  std::optional<absl::Time> next_outbox_due() const;

  // Consistent copy of the database via the online backup API.
  void backup_to(const std::filesystem::path& destination) const;

 private:
  friend class Transaction;
  class Stmt;

  void exec(const char* sql) const;
  void check_fault(std::string_view op);
  void require_txn(const char* op) const;

  std::filesystem::path path_;
  std::string study_id_;
  sqlite3* db_ = nullptr;
  bool in_txn_ = false;
};

}  // namespace smartstate::store
