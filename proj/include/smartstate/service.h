#pragma once

// One study's engine wired to its store and a delivery provider: write-ahead
// journaling, apply transactions, checkpoints and restart recovery.
//
// Every durable step follows the same order: the event is journaled, the
// dispatch result is written in one transaction (journal state, audit,
// fasts, outbox), then the in-memory instance advances. Outbound messages
// leave only through the outbox pump.

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <absl/time/time.h>

#include "smartstate/config.h"
#include "smartstate/gateway.h"
#include "smartstate/provider.h"
#include "smartstate/retry.h"
#include "smartstate/runtime.h"
#include "smartstate/store.h"

namespace smartstate::service {

struct ServiceOptions {
  std::filesystem::path data_dir = "data";  // the study lives in data_dir/<study_id>/
  store::Durability durability = store::Durability::Full;
  absl::Duration checkpoint_interval = absl::Minutes(15);
  RetryPolicy retry;
  Sleeper sleep = real_sleep;
  gateway::CrashHook crash;
};

struct InboundResult {
  int status = 204;  // 204 accepted, 400 malformed
  std::string code;  // UNKNOWN_SENDER, DUPLICATE, PAUSED, MALFORMED or empty
  std::string participant_id;
};

struct ReassignResult {
  std::string participant_id;
  std::string old_group;
  std::string new_group;
  study::CycleDate effective_cycle;
  bool changed = false;
  bool forced = false;
};

struct ParticipantView {
  store::Participant participant;
  std::string current_state;
  study::CycleDate cycle_date;
  int cycles_enrolled = 0;
  int successes = 0;
  double success_rate = 1.0;
};

class StudyService {
 public:
  // Opens (or creates) the study's store and restores the engine from the
  // latest checkpoint plus the journal suffix.
  StudyService(config::StudyDescriptor study, gateway::Provider& provider, ServiceOptions options = {});

  StudyService(const StudyService&) = delete;
  StudyService& operator=(const StudyService&) = delete;

  const config::StudyDescriptor& descriptor() const { return study_; }
  const std::string& study_id() const { return study_.study_id; }

  // Researcher operations. Each successful call writes exactly one audit record.
  // Errors: UNKNOWN_GROUP, DUPLICATE_HANDLE, BAD_REQUEST.
  store::Participant create_participant(const std::string& handle, const std::string& group, const std::string& actor,
                                        absl::Time now);
  // `group` empty with `randomize` set draws control/restricted. Errors:
  // UNKNOWN_PARTICIPANT, UNKNOWN_GROUP, PARTICIPANT_INACTIVE, PENDING_FLUSH (retryable),
  // GROUP_PRECONDITION, BASELINE_INCOMPLETE.
  ReassignResult reassign(const std::string& participant_id, const std::string& group, const std::string& actor,
                          absl::Time now, bool randomize = false, bool force = false);
  // Errors: UNKNOWN_PARTICIPANT, UNKNOWN_STATE.
  ParticipantView manual_transition(const std::string& participant_id, const std::string& target_state,
                                    const std::string& actor, absl::Time now);
  store::Participant set_status(const std::string& participant_id, const std::string& status, const std::string& actor,
                                absl::Time now);

  // Webhook ingestion: persists the message and its MSG_IN record, then queues
  // the event without dispatching it. A missing sender or body is rejected
  // with 400 and a FAULT record.
  InboundResult handle_inbound(const std::optional<std::string>& from, const std::optional<std::string>& body,
                               const std::string& provider_sid, absl::Time now);

  // Enqueues due timers and rollovers for active participants (journaled).
  int tick(absl::Time now);
  // Dispatches every queued event; returns the number applied or parked.
  int process(absl::Time now);
  gateway::PumpStats pump(absl::Time now);
  void checkpoint(absl::Time now);
  bool maybe_checkpoint(absl::Time now);
  // tick, process, pump, maybe_checkpoint.
  void step(absl::Time now);

  // Reads.
  std::vector<ParticipantView> participants() const;
  std::optional<ParticipantView> participant(const std::string& participant_id) const;
  std::vector<store::AuditRecord> audit(const store::AuditFilter& filter) const;
  std::vector<store::StoredMessage> messages(const std::string& participant_id) const;
  std::string export_zip() const;
  // Errors: UNKNOWN_GROUP.
  std::string diagram(const std::string& group, const std::string& highlight_state) const;
  std::optional<runtime::MachineInstance> instance(const std::string& participant_id) const;
  std::vector<runtime::MachineInstance> instances() const;
  std::size_t queued_events() const;

  const store::Store& store() const { return store_; }
  store::Store& store() { return store_; }
  std::filesystem::path checkpoint_path() const;

  // Serializes every public operation; HTTP handlers and the background loop
  // share one service.
  std::recursive_mutex& mutex() const { return mu_; }

 private:
  void restore();
  // Rebuilds the in-memory engine from disk after a failed durable step.
  void reload();
  void journal(const std::vector<std::pair<std::string, runtime::EngineEvent>>& events);
  bool process_one(const std::string& participant_id, absl::Time now);
  void apply(const std::string& participant_id, const runtime::EngineEvent& event, const runtime::DispatchResult& r,
             absl::Time now);
  void park(const std::string& participant_id, const runtime::EngineEvent& event, const std::string& code,
            const std::string& detail, absl::Time now);
  void drain(const std::string& participant_id, absl::Time now);
  void crash_point(std::string_view point) const;
  const std::string& handle_of(const std::string& participant_id);
  ParticipantView view(const store::Participant& p) const;
  std::string next_participant_id() const;
  store::AuditRecord record(std::string_view kind, const std::string& actor, const std::string& participant_id,
                            nlohmann::json payload, absl::Time now) const;

  config::StudyDescriptor study_;
  gateway::Provider& provider_;
  ServiceOptions options_;
  std::filesystem::path dir_;
  store::Store store_;
  runtime::Runtime runtime_;
  std::map<std::string, std::string> handles_;
  std::map<std::string, std::string> status_;
  std::map<std::string, bool> reassign_forced_;
  std::optional<absl::Time> last_checkpoint_;
  mutable std::recursive_mutex mu_;
};

}  // namespace smartstate::service
