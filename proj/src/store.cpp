#include "smartstate/store.h"

#include <sqlite3.h>

#include <algorithm>
#include <array>

#include "smartstate/error.h"
#include "smartstate/instant.h"

namespace smartstate::store {

namespace {

constexpr std::array<std::string_view, 8> kAuditKinds = {
    audit_kind::kMsgIn,           audit_kind::kMsgOut,          audit_kind::kTransition, audit_kind::kManualTransition,
    audit_kind::kGroupReassigned, audit_kind::kCorrection,      audit_kind::kFault,      audit_kind::kConfigChange};

constexpr const char* kSchema = R"sql(
CREATE TABLE IF NOT EXISTS audit (
  seq INTEGER PRIMARY KEY,
  at TEXT NOT NULL,
  actor TEXT NOT NULL,
  kind TEXT NOT NULL,
  participant_id TEXT NOT NULL DEFAULT '',
  study_id TEXT NOT NULL,
  payload TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS audit_participant ON audit(participant_id, seq);
CREATE INDEX IF NOT EXISTS audit_kind ON audit(kind, seq);
CREATE TABLE IF NOT EXISTS messages (
  id INTEGER PRIMARY KEY,
  direction TEXT NOT NULL,
  participant_id TEXT NOT NULL,
  handle TEXT NOT NULL,
  body TEXT NOT NULL,
  at TEXT NOT NULL,
  intent TEXT NOT NULL DEFAULT '',
  idempotency_key TEXT UNIQUE,
  template_id TEXT NOT NULL DEFAULT '',
  reply_class TEXT NOT NULL DEFAULT '',
  provider_sid TEXT UNIQUE,
  audit_seq INTEGER NOT NULL DEFAULT 0
);
CREATE INDEX IF NOT EXISTS messages_participant ON messages(participant_id, id);
CREATE TABLE IF NOT EXISTS fasts (
  participant_id TEXT NOT NULL,
  cycle_date TEXT NOT NULL,
  start TEXT,
  end TEXT,
  duration_minutes INTEGER,
  outcome TEXT NOT NULL,
  group_id TEXT NOT NULL,
  PRIMARY KEY (participant_id, cycle_date)
);
CREATE TABLE IF NOT EXISTS participants (
  participant_id TEXT PRIMARY KEY,
  handle TEXT NOT NULL UNIQUE,
  enrolled_at TEXT NOT NULL,
  group_id TEXT NOT NULL,
  status TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS assignments (
  id INTEGER PRIMARY KEY,
  participant_id TEXT NOT NULL,
  group_id TEXT NOT NULL,
  effective_from TEXT NOT NULL,
  assigned_by TEXT NOT NULL,
  forced INTEGER NOT NULL,
  at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS archived_instances (
  id INTEGER PRIMARY KEY,
  participant_id TEXT NOT NULL,
  at TEXT NOT NULL,
  instance TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS journal (
  participant_id TEXT NOT NULL,
  seq INTEGER NOT NULL,
  event TEXT NOT NULL,
  state INTEGER NOT NULL DEFAULT 0,
  PRIMARY KEY (participant_id, seq)
);
CREATE TABLE IF NOT EXISTS outbox (
  idempotency_key TEXT PRIMARY KEY,
  ord INTEGER NOT NULL,
  participant_id TEXT NOT NULL,
  handle TEXT NOT NULL,
  body TEXT NOT NULL,
  template_id TEXT NOT NULL,
  reply_class TEXT NOT NULL,
  trigger TEXT NOT NULL,
  attempts INTEGER NOT NULL,
  next_attempt_at TEXT NOT NULL,
  status TEXT NOT NULL,
  last_error TEXT NOT NULL DEFAULT ''
);
CREATE INDEX IF NOT EXISTS outbox_due ON outbox(status, next_attempt_at, ord);
)sql";

absl::Time to_time(const std::string& s) {
  auto t = parse_instant(s);
  if (!t) throw Error("CORRUPT_STORE", "bad timestamp '" + s + "'");
  return *t;
}

}  // namespace

bool is_audit_kind(std::string_view kind) {
  return std::find(kAuditKinds.begin(), kAuditKinds.end(), kind) != kAuditKinds.end();
}

bool is_participant_status(std::string_view status) {
  return status == "active" || status == "paused" || status == "completed";
}

// Prepared statement with positional binding.
class Store::Stmt {
 public:
  Stmt(sqlite3* db, const char* sql) : db_(db) {
    if (sqlite3_prepare_v2(db, sql, -1, &stmt_, nullptr) != SQLITE_OK) fail("prepare");
  }
  ~Stmt() { sqlite3_finalize(stmt_); }

  Stmt& bind(std::string_view v) {
    sqlite3_bind_text(stmt_, ++index_, v.data(), static_cast<int>(v.size()), SQLITE_TRANSIENT);
    return *this;
  }
  Stmt& bind(const char* v) { return bind(std::string_view(v)); }
  Stmt& bind(const std::string& v) { return bind(std::string_view(v)); }
  Stmt& bind(std::int64_t v) {
    sqlite3_bind_int64(stmt_, ++index_, v);
    return *this;
  }
  Stmt& bind(std::uint64_t v) { return bind(static_cast<std::int64_t>(v)); }
  Stmt& bind(int v) { return bind(static_cast<std::int64_t>(v)); }
  Stmt& bind_null() {
    sqlite3_bind_null(stmt_, ++index_);
    return *this;
  }
  Stmt& bind_opt(const std::optional<std::string>& v) { return v ? bind(*v) : bind_null(); }

  bool step() {
    const int rc = sqlite3_step(stmt_);
    if (rc == SQLITE_ROW) return true;
    if (rc == SQLITE_DONE) return false;
    fail("step");
  }
  void run() {
    while (step()) {
    }
  }

  std::string text(int col) const {
    const auto* p = sqlite3_column_text(stmt_, col);
    return p ? std::string(reinterpret_cast<const char*>(p), sqlite3_column_bytes(stmt_, col)) : std::string();
  }
  std::int64_t integer(int col) const { return sqlite3_column_int64(stmt_, col); }
  bool is_null(int col) const { return sqlite3_column_type(stmt_, col) == SQLITE_NULL; }

 private:
  [[noreturn]] void fail(const char* what) const {
    const int code = sqlite3_extended_errcode(db_);
    const bool busy = (code & 0xFF) == SQLITE_BUSY || (code & 0xFF) == SQLITE_LOCKED;
    if ((code & 0xFF) == SQLITE_CONSTRAINT) throw Error("CONSTRAINT", std::string(what) + ": " + sqlite3_errmsg(db_));
    if (busy) throw StorageError(std::string(what) + ": " + sqlite3_errmsg(db_));
    throw Error("STORAGE", std::string(what) + ": " + sqlite3_errmsg(db_));
  }

  sqlite3* db_;
  sqlite3_stmt* stmt_ = nullptr;
  int index_ = 0;
};

Store::Store(const std::filesystem::path& path, std::string study_id, Durability durability)
    : path_(path), study_id_(std::move(study_id)) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (sqlite3_open(path.string().c_str(), &db_) != SQLITE_OK) {
    const std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
    sqlite3_close(db_);
    throw Error("STORAGE", "cannot open " + path.string() + ": " + msg);
  }
  sqlite3_busy_timeout(db_, 2000);
  exec("PRAGMA journal_mode=WAL");
  exec(durability == Durability::Full ? "PRAGMA synchronous=FULL" : "PRAGMA synchronous=OFF");
  exec("PRAGMA foreign_keys=ON");
  exec(kSchema);
}

Store::~Store() { sqlite3_close(db_); }

void Store::exec(const char* sql) const {
  char* err = nullptr;
  if (sqlite3_exec(db_, sql, nullptr, nullptr, &err) != SQLITE_OK) {
    const std::string msg = err ? err : "unknown error";
    sqlite3_free(err);
    throw Error("STORAGE", msg);
  }
}

void Store::check_fault(std::string_view op) {
  if (fault_hook) fault_hook(op);
}

void Store::require_txn(const char* op) const {
  if (!in_txn_) throw Error("NO_TRANSACTION", std::string(op) + " requires an open transaction");
}

Store::Transaction::Transaction(Store& store) : store_(store) {
  if (store_.in_txn_) throw Error("NESTED_TRANSACTION", "transaction already open");
  store_.check_fault("begin");
  store_.exec("BEGIN IMMEDIATE");
  store_.in_txn_ = true;
}

Store::Transaction::~Transaction() {
  if (!done_) {
    sqlite3_exec(store_.db_, "ROLLBACK", nullptr, nullptr, nullptr);
    store_.in_txn_ = false;
  }
}

void Store::Transaction::commit() {
  store_.check_fault("commit");
  store_.exec("COMMIT");
  store_.in_txn_ = false;
  done_ = true;
}

std::uint64_t Store::append_audit(AuditRecord r) {
  require_txn("append_audit");
  check_fault("append_audit");
  if (!is_audit_kind(r.kind)) throw Error("BAD_AUDIT_KIND", "unknown audit kind '" + r.kind + "'");
  Stmt next(db_, "SELECT COALESCE(MAX(seq), 0) + 1 FROM audit");
  next.step();
  r.seq = static_cast<std::uint64_t>(next.integer(0));
  if (r.study_id.empty()) r.study_id = study_id_;
  Stmt(db_, "INSERT INTO audit(seq, at, actor, kind, participant_id, study_id, payload) VALUES (?,?,?,?,?,?,?)")
      .bind(r.seq)
      .bind(format_instant(r.at))
      .bind(r.actor)
      .bind(r.kind)
      .bind(r.participant_id)
      .bind(r.study_id)
      .bind(r.payload.dump())
      .run();
  return r.seq;
}

std::vector<AuditRecord> Store::query_audit(const AuditFilter& f) const {
  std::string sql = "SELECT seq, at, actor, kind, participant_id, study_id, payload FROM audit WHERE study_id = ?";
  if (f.participant_id) sql += " AND participant_id = ?";
  if (f.kind) sql += " AND kind = ?";
  if (f.from) sql += " AND at >= ?";
  if (f.to) sql += " AND at < ?";
  if (f.after_seq) sql += " AND seq > ?";
  sql += " ORDER BY seq";
  if (f.limit) sql += " LIMIT ?";
  Stmt q(db_, sql.c_str());
  q.bind(study_id_);
  if (f.participant_id) q.bind(*f.participant_id);
  if (f.kind) q.bind(*f.kind);
  if (f.from) q.bind(format_instant(*f.from));
  if (f.to) q.bind(format_instant(*f.to));
  if (f.after_seq) q.bind(*f.after_seq);
  if (f.limit) q.bind(static_cast<std::int64_t>(*f.limit));
  std::vector<AuditRecord> out;
  while (q.step()) {
    AuditRecord r;
    r.seq = static_cast<std::uint64_t>(q.integer(0));
    r.at = to_time(q.text(1));
    r.actor = q.text(2);
    r.kind = q.text(3);
    r.participant_id = q.text(4);
    r.study_id = q.text(5);
    r.payload = nlohmann::json::parse(q.text(6));
    out.push_back(std::move(r));
  }
  return out;
}

std::uint64_t Store::last_audit_seq() const {
  Stmt q(db_, "SELECT COALESCE(MAX(seq), 0) FROM audit");
  q.step();
  return static_cast<std::uint64_t>(q.integer(0));
}

std::int64_t Store::count_audit(std::string_view kind) const {
  Stmt q(db_, "SELECT COUNT(*) FROM audit WHERE kind = ?");
  q.bind(kind);
  q.step();
  return q.integer(0);
}

std::int64_t Store::insert_message(const StoredMessage& m) {
  require_txn("insert_message");
  check_fault("insert_message");
  Stmt s(db_,
         "INSERT INTO messages(direction, participant_id, handle, body, at, intent, idempotency_key, template_id, "
         "reply_class, provider_sid, audit_seq) VALUES (?,?,?,?,?,?,?,?,?,?,?)");
  s.bind(m.direction).bind(m.participant_id).bind(m.handle).bind(m.body).bind(format_instant(m.at)).bind(m.intent);
  s.bind_opt(m.idempotency_key.empty() ? std::nullopt : std::optional<std::string>(m.idempotency_key));
  s.bind(m.template_id).bind(m.reply_class);
  s.bind_opt(m.provider_sid.empty() ? std::nullopt : std::optional<std::string>(m.provider_sid));
  s.bind(m.audit_seq);
  s.run();
  return sqlite3_last_insert_rowid(db_);
}

std::vector<StoredMessage> Store::messages(const std::optional<std::string>& participant_id) const {
  std::string sql =
      "SELECT id, direction, participant_id, handle, body, at, intent, COALESCE(idempotency_key, ''), template_id, "
      "reply_class, COALESCE(provider_sid, ''), audit_seq FROM messages";
  if (participant_id) sql += " WHERE participant_id = ?";
  sql += " ORDER BY id";
  Stmt q(db_, sql.c_str());
  if (participant_id) q.bind(*participant_id);
  std::vector<StoredMessage> out;
  while (q.step()) {
    StoredMessage m;
    m.id = q.integer(0);
    m.direction = q.text(1);
    m.participant_id = q.text(2);
    m.handle = q.text(3);
    m.body = q.text(4);
    m.at = to_time(q.text(5));
    m.intent = q.text(6);
    m.idempotency_key = q.text(7);
    m.template_id = q.text(8);
    m.reply_class = q.text(9);
    m.provider_sid = q.text(10);
    m.audit_seq = static_cast<std::uint64_t>(q.integer(11));
    out.push_back(std::move(m));
  }
  return out;
}

bool Store::has_inbound_sid(std::string_view provider_sid) const {
  Stmt q(db_, "SELECT 1 FROM messages WHERE provider_sid = ?");
  q.bind(provider_sid);
  return q.step();
}

void Store::upsert_fast(const study::FastRecord& r) {
  require_txn("upsert_fast");
  check_fault("upsert_fast");
  Stmt s(db_,
         "INSERT INTO fasts(participant_id, cycle_date, start, end, duration_minutes, outcome, group_id) "
         "VALUES (?,?,?,?,?,?,?) ON CONFLICT(participant_id, cycle_date) DO UPDATE SET start=excluded.start, "
         "end=excluded.end, duration_minutes=excluded.duration_minutes, outcome=excluded.outcome, "
         "group_id=excluded.group_id");
  s.bind(r.participant_id).bind(study::format_date(r.cycle_date));
  s.bind_opt(r.start ? std::optional<std::string>(format_hhmm(*r.start)) : std::nullopt);
  s.bind_opt(r.end ? std::optional<std::string>(format_hhmm(*r.end)) : std::nullopt);
  if (r.duration_minutes) {
    s.bind(*r.duration_minutes);
  } else {
    s.bind_null();
  }
  s.bind(study::to_string(r.outcome)).bind(r.group_id);
  s.run();
}

std::vector<study::FastRecord> Store::fasts(const std::optional<std::string>& participant_id) const {
  std::string sql = "SELECT participant_id, cycle_date, start, end, duration_minutes, outcome, group_id FROM fasts";
  if (participant_id) sql += " WHERE participant_id = ?";
  sql += " ORDER BY participant_id, cycle_date";
  Stmt q(db_, sql.c_str());
  if (participant_id) q.bind(*participant_id);
  std::vector<study::FastRecord> out;
  while (q.step()) {
    study::FastRecord r;
    r.participant_id = q.text(0);
    r.cycle_date = *study::parse_date(q.text(1));
    if (!q.is_null(2)) r.start = parse_hhmm(q.text(2));
    if (!q.is_null(3)) r.end = parse_hhmm(q.text(3));
    if (!q.is_null(4)) r.duration_minutes = static_cast<int>(q.integer(4));
    r.outcome = study::parse_outcome(q.text(5)).value_or(study::FastOutcome::Incomplete);
    r.group_id = q.text(6);
    out.push_back(std::move(r));
  }
  return out;
}

void Store::insert_participant(const Participant& p) {
  require_txn("insert_participant");
  check_fault("insert_participant");
  Stmt(db_, "INSERT INTO participants(participant_id, handle, enrolled_at, group_id, status) VALUES (?,?,?,?,?)")
      .bind(p.participant_id)
      .bind(p.handle)
      .bind(format_instant(p.enrolled_at))
      .bind(p.group_id)
      .bind(p.status)
      .run();
}

namespace {

constexpr const char* kParticipantCols = "SELECT participant_id, handle, enrolled_at, group_id, status FROM participants";

}  // namespace

std::optional<Participant> Store::participant(std::string_view participant_id) const {
  Stmt q(db_, (std::string(kParticipantCols) + " WHERE participant_id = ?").c_str());
  q.bind(participant_id);
  if (!q.step()) return std::nullopt;
  return Participant{q.text(0), q.text(1), study_id_, to_time(q.text(2)), q.text(3), q.text(4)};
}

std::optional<Participant> Store::participant_by_handle(std::string_view handle) const {
  Stmt q(db_, (std::string(kParticipantCols) + " WHERE handle = ?").c_str());
  q.bind(handle);
  if (!q.step()) return std::nullopt;
  return Participant{q.text(0), q.text(1), study_id_, to_time(q.text(2)), q.text(3), q.text(4)};
}

std::vector<Participant> Store::participants() const {
  Stmt q(db_, (std::string(kParticipantCols) + " ORDER BY participant_id").c_str());
  std::vector<Participant> out;
  while (q.step()) out.push_back({q.text(0), q.text(1), study_id_, to_time(q.text(2)), q.text(3), q.text(4)});
  return out;
}

void Store::update_participant_group(std::string_view participant_id, std::string_view group_id) {
  require_txn("update_participant_group");
  check_fault("update_participant_group");
  Stmt(db_, "UPDATE participants SET group_id = ? WHERE participant_id = ?").bind(group_id).bind(participant_id).run();
}

void Store::update_participant_status(std::string_view participant_id, std::string_view status) {
  require_txn("update_participant_status");
  check_fault("update_participant_status");
  Stmt(db_, "UPDATE participants SET status = ? WHERE participant_id = ?").bind(status).bind(participant_id).run();
}

void Store::insert_assignment(const AssignmentRow& a) {
  require_txn("insert_assignment");
  check_fault("insert_assignment");
  Stmt(db_,
       "INSERT INTO assignments(participant_id, group_id, effective_from, assigned_by, forced, at) VALUES "
       "(?,?,?,?,?,?)")
      .bind(a.participant_id)
      .bind(a.group_id)
      .bind(study::format_date(a.effective_from))
      .bind(a.assigned_by)
      .bind(a.forced ? 1 : 0)
      .bind(format_instant(a.at))
      .run();
}

std::vector<AssignmentRow> Store::assignments(std::string_view participant_id) const {
  Stmt q(db_,
         "SELECT participant_id, group_id, effective_from, assigned_by, forced, at FROM assignments WHERE "
         "participant_id = ? ORDER BY id");
  q.bind(participant_id);
  std::vector<AssignmentRow> out;
  while (q.step()) {
    out.push_back({q.text(0), q.text(1), *study::parse_date(q.text(2)), q.text(3), q.integer(4) != 0,
                   to_time(q.text(5))});
  }
  return out;
}

void Store::archive_instance(const runtime::MachineInstance& instance, absl::Time at) {
  require_txn("archive_instance");
  check_fault("archive_instance");
  Stmt(db_, "INSERT INTO archived_instances(participant_id, at, instance) VALUES (?,?,?)")
      .bind(instance.participant_id)
      .bind(format_instant(at))
      .bind(runtime::to_json(instance).dump())
      .run();
}

std::int64_t Store::count_archived(std::string_view participant_id) const {
  Stmt q(db_, "SELECT COUNT(*) FROM archived_instances WHERE participant_id = ?");
  q.bind(participant_id);
  q.step();
  return q.integer(0);
}

void Store::append_journal(std::string_view participant_id, const runtime::EngineEvent& event) {
  require_txn("append_journal");
  check_fault("append_journal");
  Stmt(db_, "INSERT INTO journal(participant_id, seq, event, state) VALUES (?,?,?,0)")
      .bind(participant_id)
      .bind(event.seq)
      .bind(runtime::to_json(event).dump())
      .run();
}

void Store::set_journal_state(std::string_view participant_id, std::uint64_t seq, JournalState state) {
  require_txn("set_journal_state");
  check_fault("set_journal_state");
  Stmt(db_, "UPDATE journal SET state = ? WHERE participant_id = ? AND seq = ?")
      .bind(static_cast<int>(state))
      .bind(participant_id)
      .bind(seq)
      .run();
}

std::vector<JournalEntry> Store::journal_after(
    const std::function<std::uint64_t(const std::string&)>& watermark) const {
  Stmt q(db_, "SELECT participant_id, seq, event, state FROM journal ORDER BY participant_id, seq");
  std::vector<JournalEntry> out;
  std::string current;
  std::uint64_t mark = 0;
  while (q.step()) {
    const std::string pid = q.text(0);
    if (pid != current || out.empty()) {
      current = pid;
      mark = watermark(pid);
    }
    if (static_cast<std::uint64_t>(q.integer(1)) <= mark) continue;
    JournalEntry e;
    e.participant_id = pid;
    e.event = runtime::event_from_json(nlohmann::json::parse(q.text(2)));
    e.state = static_cast<JournalState>(q.integer(3));
    out.push_back(std::move(e));
  }
  return out;
}

bool Store::enqueue_outbox(const OutboxItem& item) {
  require_txn("enqueue_outbox");
  check_fault("enqueue_outbox");
  Stmt s(db_,
         "INSERT OR IGNORE INTO outbox(idempotency_key, ord, participant_id, handle, body, template_id, reply_class, "
         "trigger, attempts, next_attempt_at, status, last_error) VALUES (?, (SELECT COALESCE(MAX(ord), 0) + 1 FROM "
         "outbox), ?,?,?,?,?,?,?,?,?,?)");
  s.bind(item.idempotency_key)
      .bind(item.participant_id)
      .bind(item.handle)
      .bind(item.body)
      .bind(item.template_id)
      .bind(item.reply_class)
      .bind(item.trigger)
      .bind(item.attempts)
      .bind(format_instant(item.next_attempt_at))
      .bind(item.status)
      .bind(item.last_error);
  s.run();
  return sqlite3_changes(db_) > 0;
}

namespace {

constexpr const char* kOutboxCols =
    "SELECT idempotency_key, participant_id, handle, body, template_id, reply_class, trigger, attempts, "
    "next_attempt_at, status, last_error, ord FROM outbox";

}  // namespace

std::vector<OutboxItem> Store::due_outbox(absl::Time now) const {
  Stmt q(db_, (std::string(kOutboxCols) + " WHERE status = 'pending' AND next_attempt_at <= ? ORDER BY ord").c_str());
  q.bind(format_instant(now));
  std::vector<OutboxItem> out;
  while (q.step()) {
    out.push_back({q.text(0), q.text(1), q.text(2), q.text(3), q.text(4), q.text(5), q.text(6),
                   static_cast<int>(q.integer(7)), to_time(q.text(8)), q.text(9), q.text(10), q.integer(11)});
  }
  return out;
}

std::optional<OutboxItem> Store::outbox_item(std::string_view key) const {
  Stmt q(db_, (std::string(kOutboxCols) + " WHERE idempotency_key = ?").c_str());
  q.bind(key);
  if (!q.step()) return std::nullopt;
  return OutboxItem{q.text(0), q.text(1), q.text(2), q.text(3), q.text(4), q.text(5), q.text(6),
                    static_cast<int>(q.integer(7)), to_time(q.text(8)), q.text(9), q.text(10), q.integer(11)};
}

void Store::update_outbox(const OutboxItem& item) {
  require_txn("update_outbox");
  check_fault("update_outbox");
  Stmt(db_, "UPDATE outbox SET attempts = ?, next_attempt_at = ?, status = ?, last_error = ? WHERE idempotency_key = ?")
      .bind(item.attempts)
      .bind(format_instant(item.next_attempt_at))
      .bind(item.status)
      .bind(item.last_error)
      .bind(item.idempotency_key)
      .run();
}

std::int64_t Store::pending_outbox(const std::optional<std::string>& participant_id) const {
  std::string sql = "SELECT COUNT(*) FROM outbox WHERE status = 'pending'";
  if (participant_id) sql += " AND participant_id = ?";
  Stmt q(db_, sql.c_str());
  if (participant_id) q.bind(*participant_id);
  q.step();
  return q.integer(0);
}

std::optional<absl::Time> Store::next_outbox_due() const {
  Stmt q(db_, "SELECT MIN(next_attempt_at) FROM outbox WHERE status = 'pending'");
  if (!q.step() || q.is_null(0)) return std::nullopt;
  return to_time(q.text(0));
}

void Store::backup_to(const std::filesystem::path& destination) const {
  if (destination.has_parent_path()) std::filesystem::create_directories(destination.parent_path());
  sqlite3* dest = nullptr;
  if (sqlite3_open(destination.string().c_str(), &dest) != SQLITE_OK) {
    sqlite3_close(dest);
    throw Error("STORAGE", "cannot open backup target " + destination.string());
  }
  sqlite3_backup* b = sqlite3_backup_init(dest, "main", db_, "main");
  if (!b) {
    const std::string msg = sqlite3_errmsg(dest);
    sqlite3_close(dest);
    throw Error("STORAGE", "backup failed: " + msg);
  }
  sqlite3_backup_step(b, -1);
  const int rc = sqlite3_backup_finish(b);
  sqlite3_close(dest);
  if (rc != SQLITE_OK) throw Error("STORAGE", "backup failed with code " + std::to_string(rc));
}

}  // namespace smartstate::store
