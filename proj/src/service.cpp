#include "smartstate/service.h"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "smartstate/error.h"
#include "smartstate/export.h"
#include "smartstate/instant.h"

namespace smartstate::service {

namespace {

std::filesystem::path study_dir(const std::filesystem::path& root, const std::string& study_id) {
  auto dir = root / study_id;
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

StudyService::StudyService(config::StudyDescriptor study, gateway::Provider& provider, ServiceOptions options)
    : study_(std::move(study)),
      provider_(provider),
      options_(std::move(options)),
      dir_(study_dir(options_.data_dir, study_.study_id)),
      store_(dir_ / "store.db", study_.study_id, options_.durability),
      runtime_(study_.config, study_.protocols) {
  restore();
}

std::filesystem::path StudyService::checkpoint_path() const { return dir_ / "checkpoint.json"; }

void StudyService::crash_point(std::string_view point) const {
  if (options_.crash) options_.crash(point);
}

store::AuditRecord StudyService::record(std::string_view kind, const std::string& actor,
                                        const std::string& participant_id, nlohmann::json payload,
                                        absl::Time now) const {
  store::AuditRecord r;
  r.at = now;
  r.actor = actor;
  r.kind = std::string(kind);
  r.participant_id = participant_id;
  r.payload = std::move(payload);
  return r;
}

// ---------------------------------------------------------------------------
// Recovery
// ---------------------------------------------------------------------------

void StudyService::restore() {
  runtime_ = runtime::Runtime(study_.config, study_.protocols);
  handles_.clear();
  status_.clear();
  last_checkpoint_.reset();

  if (std::filesystem::exists(checkpoint_path())) {
    std::ifstream in(checkpoint_path(), std::ios::binary);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw Error("CORRUPT_CHECKPOINT", checkpoint_path().string() + ": " + e.what());
    }
    const auto cp = runtime::checkpoint_from_json(j);
    runtime_ = runtime::Runtime::restore(cp, study_.config, study_.protocols);
    last_checkpoint_ = cp.taken_at;
  }

  for (const auto& p : store_.participants()) {
    handles_[p.participant_id] = p.handle;
    status_[p.participant_id] = p.status;
    if (runtime_.contains(p.participant_id)) continue;
    // Enrolled after the checkpoint: rebuild from the first assignment and
    // replay the whole journal.
    const auto assignments = store_.assignments(p.participant_id);
    const auto& group = assignments.empty() ? p.group_id : assignments.front().group_id;
    runtime_.instantiate(p.participant_id, group, p.enrolled_at);
  }

  const auto entries = store_.journal_after([this](const std::string& pid) -> std::uint64_t {
    return runtime_.contains(pid) ? runtime_.instance(pid).last_event_seq : 0;
  });
  for (const auto& entry : entries) {
    if (!runtime_.contains(entry.participant_id)) {
      throw Error("CORRUPT_JOURNAL", "journal entry for unknown participant " + entry.participant_id);
    }
    runtime_.enqueue(entry.participant_id, entry.event);
    switch (entry.state) {
      case store::JournalState::Applied: {
        auto r = runtime_.prepare(entry.participant_id);
        runtime_.commit(entry.participant_id, std::move(*r));
        break;
      }
      case store::JournalState::Parked:
        runtime_.skip(entry.participant_id);
        break;
      case store::JournalState::Pending:
        break;
    }
  }
}

void StudyService::reload() {
  std::lock_guard lock(mu_);
  restore();
}

// ---------------------------------------------------------------------------
// Event processing
// ---------------------------------------------------------------------------

void StudyService::journal(const std::vector<std::pair<std::string, runtime::EngineEvent>>& events) {
  if (events.empty()) return;
  try {
    retry_transient(
        [&] {
          store::Store::Transaction txn(store_);
          for (const auto& [pid, event] : events) store_.append_journal(pid, event);
          crash_point("journal.before_commit");
          txn.commit();
          return 0;
        },
        options_.retry, options_.sleep);
  } catch (const gateway::SimulatedCrash&) {
    throw;
  } catch (...) {
    // The events are queued in memory but not on disk.
    restore();
    throw;
  }
  crash_point("journal.after_commit");
}

const std::string& StudyService::handle_of(const std::string& participant_id) {
  auto it = handles_.find(participant_id);
  if (it == handles_.end()) throw Error("UNKNOWN_PARTICIPANT", "no participant " + participant_id);
  return it->second;
}

void StudyService::apply(const std::string& participant_id, const runtime::EngineEvent& event,
                         const runtime::DispatchResult& r, absl::Time now) {
  store::Store::Transaction txn(store_);
  store_.set_journal_state(participant_id, event.seq, store::JournalState::Applied);
  const std::string actor = event.actor.empty() ? std::string(store::kSystemActor) : event.actor;
  for (const auto& note : r.notes) store_.append_audit(record(note.kind, actor, participant_id, note.payload, now));
  for (const auto& effect : r.effects) {
    switch (effect.kind) {
      case runtime::EffectKind::FastRecordData:
        store_.upsert_fast(effect.record);
        break;
      case runtime::EffectKind::OutboundMessage:
        gateway::enqueue_outbound(store_, effect, handle_of(participant_id), now);
        break;
      default:
        break;
    }
  }
  if (r.archived) {
    store_.archive_instance(*r.archived, now);
    auto forced = reassign_forced_.find(participant_id);
    store_.insert_assignment({participant_id, event.group_id, r.instance.cycle_date, actor,
                              forced != reassign_forced_.end() && forced->second, now});
    store_.update_participant_group(participant_id, event.group_id);
  }
  crash_point("apply.before_commit");
  txn.commit();
  crash_point("apply.after_commit");
}

void StudyService::park(const std::string& participant_id, const runtime::EngineEvent& event, const std::string& code,
                        const std::string& detail, absl::Time now) {
  store::Store::Transaction txn(store_);
  store_.set_journal_state(participant_id, event.seq, store::JournalState::Parked);
  store_.append_audit(record(store::audit_kind::kFault, std::string(store::kSystemActor), participant_id,
                             {{"error", code}, {"detail", detail}, {"seq", event.seq}, {"event", to_string(event.kind)}},
                             now));
  txn.commit();
  runtime_.skip(participant_id);
}

bool StudyService::process_one(const std::string& participant_id, absl::Time now) {
  const auto* head = runtime_.peek(participant_id);
  if (!head) return false;
  const runtime::EngineEvent event = *head;
  std::optional<runtime::DispatchResult> result;
  try {
    result = runtime_.prepare(participant_id);
  } catch (const Error& e) {
    park(participant_id, event, e.code(), e.what(), now);
    return true;
  }
  try {
    retry_transient(
        [&] {
          apply(participant_id, event, *result, now);
          return 0;
        },
        options_.retry, options_.sleep);
  } catch (const gateway::SimulatedCrash&) {
    throw;
  } catch (const std::exception& e) {
    if (!is_transient(e)) throw;
    park(participant_id, event, "STORAGE_FAILURE", e.what(), now);
    return true;
  }
  runtime_.commit(participant_id, std::move(*result));
  return true;
}

void StudyService::drain(const std::string& participant_id, absl::Time now) {
  while (process_one(participant_id, now)) {
  }
}

int StudyService::tick(absl::Time now) {
  std::lock_guard lock(mu_);
  auto events = runtime_.tick(now, [this](const std::string& pid) {
    auto it = status_.find(pid);
    return it != status_.end() && it->second == "active";
  });
  journal(events);
  return static_cast<int>(events.size());
}

int StudyService::process(absl::Time now) {
  std::lock_guard lock(mu_);
  int n = 0;
  for (const auto& pid : runtime_.participant_ids()) {
    while (process_one(pid, now)) ++n;
  }
  return n;
}

gateway::PumpStats StudyService::pump(absl::Time now) {
  std::lock_guard lock(mu_);
  return gateway::pump(store_, provider_, now, options_.crash);
}

void StudyService::checkpoint(absl::Time now) {
  std::lock_guard lock(mu_);
  const auto cp = runtime_.save_checkpoint(now, store_.last_audit_seq());
  const auto tmp = dir_ / "checkpoint.json.tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << runtime::to_json(cp).dump(1) << '\n';
    out.flush();
    if (!out) throw Error("STORAGE", "cannot write " + tmp.string(), true);
  }
  crash_point("checkpoint.before_rename");
  std::filesystem::rename(tmp, checkpoint_path());
  last_checkpoint_ = now;
}

bool StudyService::maybe_checkpoint(absl::Time now) {
  std::lock_guard lock(mu_);
  if (last_checkpoint_ && now - *last_checkpoint_ < options_.checkpoint_interval) return false;
  checkpoint(now);
  return true;
}

void StudyService::step(absl::Time now) {
  std::lock_guard lock(mu_);
  tick(now);
  process(now);
  pump(now);
  maybe_checkpoint(now);
}

// ---------------------------------------------------------------------------
// Inbound
// ---------------------------------------------------------------------------

InboundResult StudyService::handle_inbound(const std::optional<std::string>& from,
                                           const std::optional<std::string>& body, const std::string& provider_sid,
                                           absl::Time now) {
  std::lock_guard lock(mu_);
  if (!from || from->empty() || !body) {
    nlohmann::json missing = nlohmann::json::array();
    if (!from || from->empty()) missing.push_back("From");
    if (!body) missing.push_back("Body");
    store::Store::Transaction txn(store_);
    store_.append_audit(record(store::audit_kind::kFault, std::string(store::kSystemActor), "",
                               {{"error", "MALFORMED_REQUEST"}, {"missing", missing}}, now));
    txn.commit();
    return {400, "MALFORMED", ""};
  }
  if (!provider_sid.empty() && store_.has_inbound_sid(provider_sid)) return {204, "DUPLICATE", ""};

  const auto participant = store_.participant_by_handle(*from);
  if (!participant) {
    store::Store::Transaction txn(store_);
    store_.append_audit(record(store::audit_kind::kMsgIn, std::string(store::kSystemActor), "",
                               {{"status", "UNKNOWN_SENDER"}, {"handle", *from}, {"body", *body}}, now));
    txn.commit();
    return {204, "UNKNOWN_SENDER", ""};
  }
  const auto& pid = participant->participant_id;
  const bool active = participant->status == "active";
  const auto intent = intake::classify(intake::sanitize(*body));

  store::StoredMessage msg;
  msg.direction = "in";
  msg.participant_id = pid;
  msg.handle = *from;
  msg.body = *body;
  msg.at = now;
  msg.intent = intake::to_string(intent.kind);
  msg.provider_sid = provider_sid;

  nlohmann::json payload = {{"intent", msg.intent}, {"sid", provider_sid}};
  if (intent.extra_time_tokens) payload["warnings"] = {"EXTRA_TIME_TOKENS"};
  if (!active) payload["status"] = "INACTIVE_PARTICIPANT";

  runtime::EngineEvent event;
  retry_transient(
      [&] {
        store::Store::Transaction txn(store_);
        const auto id = store_.insert_message(msg);
        payload["message_id"] = id;
        const auto seq = store_.append_audit(record(store::audit_kind::kMsgIn, pid, pid, payload, now));
        (void)seq;
        if (active) {
          event = runtime::EngineEvent::intent_event(intent, now, id);
          event.seq = runtime_.next_seq(pid);
          store_.append_journal(pid, event);
        }
        crash_point("inbound.before_commit");
        txn.commit();
        return 0;
      },
      options_.retry, options_.sleep);
  crash_point("inbound.after_commit");
  if (!active) return {204, "INACTIVE_PARTICIPANT", pid};
  runtime_.enqueue(pid, event);
  return {204, "", pid};
}

// ---------------------------------------------------------------------------
// Researcher operations
// ---------------------------------------------------------------------------

std::string StudyService::next_participant_id() const {
  const auto existing = store_.participants();
  for (std::size_t n = existing.size() + 1;; ++n) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%03zu", n);
    auto id = study_.study_id + "-" + buf;
    if (!store_.participant(id)) return id;
  }
}

store::Participant StudyService::create_participant(const std::string& handle, const std::string& group,
                                                    const std::string& actor, absl::Time now) {
  std::lock_guard lock(mu_);
  if (handle.empty()) throw Error("BAD_REQUEST", "handle is required");
  if (!runtime_.has_group(group)) throw Error("UNKNOWN_GROUP", "study " + study_id() + " has no group '" + group + "'");
  if (store_.participant_by_handle(handle)) {
    throw Error("DUPLICATE_HANDLE", "handle " + handle + " is already enrolled in " + study_id());
  }
  store::Participant p;
  p.participant_id = next_participant_id();
  p.handle = handle;
  p.study_id = study_id();
  p.enrolled_at = now;
  p.group_id = group;
  p.status = "active";
  {
    store::Store::Transaction txn(store_);
    store_.insert_participant(p);
    store_.insert_assignment({p.participant_id, group, study::cycle_of(now, study_.config), actor, false, now});
    store_.append_audit(record(store::audit_kind::kConfigChange, actor, p.participant_id,
                               {{"action", "create_participant"}, {"handle", handle}, {"group", group}}, now));
    crash_point("create.before_commit");
    txn.commit();
  }
  runtime_.instantiate(p.participant_id, group, now);
  handles_[p.participant_id] = handle;
  status_[p.participant_id] = p.status;
  return p;
}

ReassignResult StudyService::reassign(const std::string& participant_id, const std::string& group,
                                      const std::string& actor, absl::Time now, bool randomize, bool force) {
  std::lock_guard lock(mu_);
  if (!store_.participant(participant_id)) {
    throw Error("UNKNOWN_PARTICIPANT", "no participant " + participant_id + " in " + study_id());
  }
  // Earlier events, including an unapplied reassignment, settle first.
  drain(participant_id, now);
  auto p = store_.participant(participant_id);
  if (p->status != "active") {
    throw Error("PARTICIPANT_INACTIVE", "participant " + participant_id + " is " + p->status);
  }
  std::string target = group;
  if (randomize) {
    const auto history = store_.assignments(participant_id);
    study::GroupAssignment current{participant_id, p->group_id,
                                   history.empty() ? study::cycle_of(p->enrolled_at, study_.config)
                                                   : history.back().effective_from,
                                   history.empty() ? actor : history.back().assigned_by, false};
    target = study::randomize_group(current, study::cycle_of(now, study_.config), study_.config,
                                    study_.randomization_seed, actor, force)
                 .group_id;
  }
  if (!runtime_.has_group(target)) {
    throw Error("UNKNOWN_GROUP", "study " + study_id() + " has no group '" + target + "'");
  }

  ReassignResult result;
  result.participant_id = participant_id;
  result.old_group = p->group_id;
  result.new_group = target;
  result.forced = force;
  if (target == p->group_id) {
    store::Store::Transaction txn(store_);
    store_.append_audit(record(store::audit_kind::kConfigChange, actor, participant_id,
                               {{"action", "reassign"}, {"group", target}, {"noop", true}}, now));
    txn.commit();
    result.effective_cycle = runtime_.instance(participant_id).cycle_date;
    return result;
  }

  // In-flight messages must be delivered before the swap.
  gateway::pump(store_, provider_, now, options_.crash);
  if (runtime_.queued(participant_id) > 0 || store_.pending_outbox(participant_id) > 0) {
    throw Error("PENDING_FLUSH", "participant " + participant_id + " has undelivered messages; retry shortly", true);
  }
  checkpoint(now);

  auto event = runtime::EngineEvent::reassign_event(target, actor, now);
  event.seq = runtime_.next_seq(participant_id);
  reassign_forced_[participant_id] = force;
  journal({{participant_id, event}});
  runtime_.enqueue(participant_id, event);
  drain(participant_id, now);
  reassign_forced_.erase(participant_id);

  const auto& inst = runtime_.instance(participant_id);
  if (inst.group_id != target) {
    throw Error("REASSIGN_FAILED", "reassignment of " + participant_id + " was parked; see FAULT records");
  }
  result.effective_cycle = inst.cycle_date;
  result.changed = true;
  return result;
}

ParticipantView StudyService::manual_transition(const std::string& participant_id, const std::string& target_state,
                                                const std::string& actor, absl::Time now) {
  std::lock_guard lock(mu_);
  auto p = store_.participant(participant_id);
  if (!p) throw Error("UNKNOWN_PARTICIPANT", "no participant " + participant_id + " in " + study_id());
  drain(participant_id, now);
  const auto& inst = runtime_.instance(participant_id);
  const auto& def = runtime_.protocol(inst.protocol_id);
  if (!def.find_state(target_state)) {
    throw Error("UNKNOWN_STATE", "protocol '" + def.protocol_id + "' has no state '" + target_state + "'");
  }
  auto event = runtime::EngineEvent::manual_event(target_state, actor, now);
  event.seq = runtime_.next_seq(participant_id);
  journal({{participant_id, event}});
  runtime_.enqueue(participant_id, event);
  drain(participant_id, now);
  return view(*store_.participant(participant_id));
}

store::Participant StudyService::set_status(const std::string& participant_id, const std::string& status,
                                            const std::string& actor, absl::Time now) {
  std::lock_guard lock(mu_);
  if (!store::is_participant_status(status)) {
    throw Error("BAD_REQUEST", "status must be active, paused or completed");
  }
  auto p = store_.participant(participant_id);
  if (!p) throw Error("UNKNOWN_PARTICIPANT", "no participant " + participant_id + " in " + study_id());
  {
    store::Store::Transaction txn(store_);
    store_.update_participant_status(participant_id, status);
    store_.append_audit(record(store::audit_kind::kConfigChange, actor, participant_id,
                               {{"action", "set_status"}, {"from", p->status}, {"to", status}}, now));
    txn.commit();
  }
  status_[participant_id] = status;
  p->status = status;
  return *p;
}

// ---------------------------------------------------------------------------
// Reads
// ---------------------------------------------------------------------------

ParticipantView StudyService::view(const store::Participant& p) const {
  ParticipantView v;
  v.participant = p;
  if (runtime_.contains(p.participant_id)) {
    const auto& m = runtime_.instance(p.participant_id);
    v.current_state = m.current_state;
    v.cycle_date = m.cycle_date;
    v.cycles_enrolled = m.cycles_enrolled;
    v.successes = m.successes;
    // An open cycle without an outcome does not count yet.
    v.success_rate = study::success_rate(m.successes, m.cycles_enrolled - (m.vars.outcome ? 0 : 1));
  }
  return v;
}

std::vector<ParticipantView> StudyService::participants() const {
  std::lock_guard lock(mu_);
  std::vector<ParticipantView> out;
  for (const auto& p : store_.participants()) out.push_back(view(p));
  return out;
}

std::optional<ParticipantView> StudyService::participant(const std::string& participant_id) const {
  std::lock_guard lock(mu_);
  auto p = store_.participant(participant_id);
  if (!p) return std::nullopt;
  return view(*p);
}

std::vector<store::AuditRecord> StudyService::audit(const store::AuditFilter& filter) const {
  std::lock_guard lock(mu_);
  return store_.query_audit(filter);
}

std::vector<store::StoredMessage> StudyService::messages(const std::string& participant_id) const {
  std::lock_guard lock(mu_);
  return store_.messages(participant_id);
}

std::string StudyService::export_zip() const {
  std::lock_guard lock(mu_);
  return exporter::zip_archive(exporter::export_csv(store_));
}

std::string StudyService::diagram(const std::string& group, const std::string& highlight_state) const {
  std::lock_guard lock(mu_);
  const auto& def = runtime_.protocol_for_group(group);
  protocol::DotOptions options;
  options.highlight_state = highlight_state;
  return protocol::render_dot(def, options);
}

std::optional<runtime::MachineInstance> StudyService::instance(const std::string& participant_id) const {
  std::lock_guard lock(mu_);
  if (!runtime_.contains(participant_id)) return std::nullopt;
  return runtime_.instance(participant_id);
}

std::vector<runtime::MachineInstance> StudyService::instances() const {
  std::lock_guard lock(mu_);
  std::vector<runtime::MachineInstance> out;
  for (const auto& pid : runtime_.participant_ids()) out.push_back(runtime_.instance(pid));
  return out;
}

std::size_t StudyService::queued_events() const {
  std::lock_guard lock(mu_);
  std::size_t n = 0;
  for (const auto& pid : runtime_.participant_ids()) n += runtime_.queued(pid);
  return n;
}

}  // namespace smartstate::service
