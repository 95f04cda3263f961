#pragma once

// Per-participant protocol execution: event dispatch, timers, manual moves,
// protocol reassignment and checkpoints.

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <absl/time/time.h>
#include <nlohmann/json.hpp>

#include "smartstate/intake.h"
#include "smartstate/protocol.h"
#include "smartstate/study.h"

namespace smartstate::runtime {

struct CycleVars {
  std::optional<ClockTime> start_time;
  std::optional<ClockTime> end_time;
  std::optional<study::EatingWindow> window;
  std::optional<study::FastOutcome> outcome;  // set once the cycle was evaluated

  friend bool operator==(const CycleVars&, const CycleVars&) = default;
};

struct PendingTimer {
  std::string name;
  absl::Time fire_at;

  friend bool operator==(const PendingTimer&, const PendingTimer&) = default;
};

struct MachineInstance {
  std::string participant_id;
  std::string group_id;
  std::string protocol_id;
  int protocol_version = 0;
  std::string current_state;
  study::CycleDate cycle_date;
  CycleVars vars;
  std::vector<PendingTimer> pending_timers;  // ordered by (fire_at, name)
  std::vector<std::string> fired_timers;     // fired during cycle_date, sorted
  std::uint64_t last_event_seq = 0;
  int cycles_enrolled = 1;
  int successes = 0;
  absl::Time enrolled_at;

  // Start of the next cycle; the instance rolls over at this instant.
  absl::Time next_rollover(const study::StudyConfig& config) const;

  friend bool operator==(const MachineInstance&, const MachineInstance&) = default;
};

enum class EventKind { Intent, Timer, Rollover, Manual, Reassign };

struct EngineEvent {
  EventKind kind = EventKind::Intent;
  std::uint64_t seq = 0;
  absl::Time occurred_at;
  intake::Intent intent;        // Intent
  std::string timer;            // Timer
  absl::Time fire_at;           // Timer: the scheduled occurrence being fired
  study::CycleDate cycle;       // Rollover: the cycle being entered
  std::string target_state;     // Manual
  std::string group_id;         // Reassign
  std::string actor;            // Manual, Reassign
  std::int64_t message_id = 0;  // Intent: stored inbound message, 0 if none

  static EngineEvent intent_event(intake::Intent intent, absl::Time at, std::int64_t message_id = 0);
  static EngineEvent manual_event(std::string target_state, std::string actor, absl::Time at);
  static EngineEvent reassign_event(std::string group_id, std::string actor, absl::Time at);
};

enum class EffectKind { OutboundMessage, FastRecordData, TimerSchedule, TimerCancel };

// Classification of outbound messages, used for adherence metrics.
enum class ReplyClass { Response, Reminder, Error, Info };

struct ActionEffect {
  EffectKind kind = EffectKind::OutboundMessage;
  std::string idempotency_key;
  std::string participant_id;
  study::CycleDate cycle_date;
  std::uint64_t seq = 0;
  std::string trigger;  // event name (or intent) that produced the effect

  std::string template_id;  // OutboundMessage
  std::string body;
  ReplyClass reply_class = ReplyClass::Response;

  study::FastRecord record;  // FastRecordData

  PendingTimer timer;  // TimerSchedule / TimerCancel
};

// Audit-worthy facts produced while dispatching; persisted by the caller.
struct AuditNote {
  std::string kind;  // TRANSITION, MANUAL_TRANSITION, GROUP_REASSIGNED, CORRECTION, FAULT
  nlohmann::json payload;
};

struct DispatchResult {
  MachineInstance instance;
  std::vector<ActionEffect> effects;
  std::vector<AuditNote> notes;
  std::optional<MachineInstance> archived;  // previous instance after a reassignment
};

// idempotency key: stable hash of (participant, cycle, effect kind, seq, ordinal).
std::string effect_key(std::string_view participant_id, study::CycleDate cycle, EffectKind kind, std::uint64_t seq,
                       int ordinal);

// New instance in the protocol's initial state with that state's timers
// scheduled for the current cycle. Throws Error("INVALID_PROTOCOL").
MachineInstance instantiate(const protocol::ProtocolDef& def, const std::string& participant_id,
                            const std::string& group_id, absl::Time now, const study::StudyConfig& config);

// Pure transition function. Requires event.seq == instance.last_event_seq + 1,
// otherwise throws Error("STALE_EVENT", retryable). Reassign events are
// handled by reassign_protocol, not here.
DispatchResult dispatch(const MachineInstance& instance, const protocol::ProtocolDef& def, const EngineEvent& event,
                        const study::StudyConfig& config);

// Silent researcher move: cycle vars kept, timers rescheduled, no messages.
// Throws Error("UNKNOWN_STATE") / Error("UNAUTHENTICATED").
DispatchResult manual_transition(const MachineInstance& instance, const protocol::ProtocolDef& def,
                                 std::string_view target_state, std::string_view actor, absl::Time now,
                                 const study::StudyConfig& config);

// Fresh instance of `def` for the same participant; the old one is returned
// in `archived`. The per-participant seq continues.
DispatchResult reassign_protocol(const MachineInstance& instance, const protocol::ProtocolDef& def,
                                 const std::string& group_id, const EngineEvent& event,
                                 const study::StudyConfig& config);

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  int format_version = kCheckpointFormatVersion;
  absl::Time taken_at;
  std::vector<MachineInstance> instances;
  std::map<std::string, std::uint64_t> seq_watermarks;  // last enqueued seq per participant
  std::uint64_t audit_seq = 0;
};

nlohmann::json to_json(const Checkpoint& checkpoint);
// Throws Error("VERSION_MISMATCH") / Error("CORRUPT_CHECKPOINT").
Checkpoint checkpoint_from_json(const nlohmann::json& j);

nlohmann::json to_json(const MachineInstance& instance);
MachineInstance instance_from_json(const nlohmann::json& j);

nlohmann::json to_json(const EngineEvent& event);
EngineEvent event_from_json(const nlohmann::json& j);

const char* to_string(EventKind kind);
const char* to_string(ReplyClass cls);
const char* to_string(EffectKind kind);

// Owns the live instances of one study and their event queues. Not
// thread-safe; callers serialize access.
class Runtime {
 public:
  Runtime(study::StudyConfig config, std::vector<protocol::ProtocolDef> protocols);

  const study::StudyConfig& config() const { return config_; }
  const protocol::ProtocolDef& protocol_for_group(std::string_view group_id) const;
  const protocol::ProtocolDef& protocol(std::string_view protocol_id) const;
  bool has_group(std::string_view group_id) const;

  // Throws Error("DUPLICATE_INSTANCE").
  const MachineInstance& instantiate(const std::string& participant_id, const std::string& group_id,
                                     absl::Time now);

  bool contains(std::string_view participant_id) const;
  const MachineInstance& instance(std::string_view participant_id) const;
  std::vector<std::string> participant_ids() const;

  // Assigns the next seq unless `event.seq` is already set, in which case it
  // must be exactly the next one (journal replay).
  EngineEvent enqueue(const std::string& participant_id, EngineEvent event);

  // Enqueues timer and rollover events that are due at `now` for instances
  // accepted by `filter` (all when empty) and returns them.
  std::vector<std::pair<std::string, EngineEvent>> tick(absl::Time now,
                                                        const std::function<bool(const std::string&)>& filter = {});

  // Seq the next enqueued event for this participant will get.
  std::uint64_t next_seq(std::string_view participant_id) const;
  std::size_t queued(std::string_view participant_id) const;
  const EngineEvent* peek(std::string_view participant_id) const;

  // Dispatches the head of the participant's queue without applying it.
  std::optional<DispatchResult> prepare(const std::string& participant_id) const;
  // Applies a result produced by prepare() and pops the queue head.
  void commit(const std::string& participant_id, DispatchResult result);
  // Drops the queue head without dispatching it (a parked event). The
  // instance's seq advances past it; a skipped timer does not fire again.
  void skip(const std::string& participant_id);

  Checkpoint save_checkpoint(absl::Time now, std::uint64_t audit_seq) const;
  // Throws Error("VERSION_MISMATCH") / Error("MISSING_PROTOCOL").
  static Runtime restore(const Checkpoint& checkpoint, study::StudyConfig config,
                         std::vector<protocol::ProtocolDef> protocols);

 private:
  struct Slot {
    MachineInstance instance;
    std::deque<EngineEvent> queue;
    std::uint64_t next_seq = 0;  // last assigned seq
    std::vector<PendingTimer> timers_enqueued;
    std::optional<study::CycleDate> rollover_enqueued;
  };

  Slot& slot(std::string_view participant_id);
  const Slot& slot(std::string_view participant_id) const;

  study::StudyConfig config_;
  std::map<std::string, protocol::ProtocolDef, std::less<>> protocols_;
  std::map<std::string, Slot, std::less<>> slots_;
};

}  // namespace smartstate::runtime
