#include "smartstate/runtime.h"

#include <algorithm>
#include <cstdio>

#include "smartstate/error.h"
#include "smartstate/hash.h"
#include "smartstate/instant.h"

namespace smartstate::runtime {

namespace {

using protocol::ActionKind;
using protocol::ActionSpec;
using protocol::ProtocolDef;
using protocol::TransitionDef;

absl::Time timer_instant(const protocol::TimerDef& t, study::CycleDate cycle, const study::StudyConfig& config) {
  const study::CycleDate date = t.fire_at >= config.cycle_start ? cycle : cycle + 1;
  return study::local_instant(date, t.fire_at, config);
}

bool active_in(const protocol::TimerDef& t, std::string_view state) {
  return std::find(t.active_in.begin(), t.active_in.end(), state) != t.active_in.end();
}

void sort_timers(std::vector<PendingTimer>& timers) {
  std::sort(timers.begin(), timers.end(), [](const PendingTimer& a, const PendingTimer& b) {
    return std::tie(a.fire_at, a.name) < std::tie(b.fire_at, b.name);
  });
}

std::string percent_string(double fraction) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.0f%%", fraction * 100.0);
  return buf;
}

bool uses_window_placeholder(std::string_view text) {
  for (const auto& p : protocol::template_placeholders(text)) {
    if (p == "window_end" || p == "ok_from" || p == "ok_to") return true;
  }
  return false;
}

// Mutable state threaded through one dispatch.
class Dispatcher {
 public:
  Dispatcher(const MachineInstance& instance, const ProtocolDef& def, const EngineEvent& event,
             const study::StudyConfig& config)
      : def_(def), event_(event), config_(config) {
    result_.instance = instance;
  }

  MachineInstance& inst() { return result_.instance; }
  DispatchResult take() { return std::move(result_); }

  void note(std::string kind, nlohmann::json payload) {
    result_.notes.push_back({std::move(kind), std::move(payload)});
  }

  void run_transition(const TransitionDef& tr, ReplyClass cls, bool schedule) {
    const std::string from = inst().current_state;
    trigger_ = tr.event;
    reply_class_ = cls;
    for (const auto& a : tr.actions) execute(a);
    inst().current_state = tr.target;
    if (const auto* target = def_.find_state(tr.target)) {
      for (const auto& a : target->entry_actions) execute(a);
    }
    note("TRANSITION", {{"from", from}, {"event", tr.event}, {"to", tr.target}});
    if (schedule) reschedule(event_.occurred_at);
  }

  void send(std::string_view template_id, ReplyClass cls) {
    const auto* tmpl = def_.find_template(template_id);
    if (!tmpl) {
      note("FAULT", {{"error", "MISSING_TEMPLATE"}, {"template", template_id}});
      return;
    }
    if (window_rejected_ && uses_window_placeholder(tmpl->text)) return;
    ActionEffect e = make_effect(EffectKind::OutboundMessage);
    e.template_id = std::string(template_id);
    e.body = render(tmpl->text);
    e.reply_class = cls;
    result_.effects.push_back(std::move(e));
  }

  // Reply for input that the current state does not accept.
  void reply_error(std::string_view preferred) {
    trigger_ = intake::describe(event_.intent);
    const bool have = !preferred.empty() && def_.find_template(preferred);
    send(have ? preferred : protocol::kUnrecognizedTemplate, ReplyClass::Error);
  }

  // Keeps timers still active in the current state, schedules newly active
  // ones that have not fired this cycle and are not already in the past.
  void reschedule(absl::Time now) {
    auto& m = inst();
    std::vector<PendingTimer> next;
    for (const auto& t : def_.timers) {
      if (!active_in(t, m.current_state)) continue;
      auto existing = std::find_if(m.pending_timers.begin(), m.pending_timers.end(),
                                   [&](const PendingTimer& p) { return p.name == t.name; });
      if (existing != m.pending_timers.end()) {
        next.push_back(*existing);
        continue;
      }
      if (std::binary_search(m.fired_timers.begin(), m.fired_timers.end(), t.name)) continue;
      const absl::Time at = timer_instant(t, m.cycle_date, config_);
      if (at < now) continue;
      next.push_back({t.name, at});
      ActionEffect e = make_effect(EffectKind::TimerSchedule);
      e.timer = next.back();
      result_.effects.push_back(std::move(e));
    }
    for (const auto& p : m.pending_timers) {
      if (std::none_of(next.begin(), next.end(), [&](const PendingTimer& n) { return n.name == p.name; })) {
        ActionEffect e = make_effect(EffectKind::TimerCancel);
        e.timer = p;
        result_.effects.push_back(std::move(e));
      }
    }
    sort_timers(next);
    m.pending_timers = std::move(next);
  }

  ActionEffect make_effect(EffectKind kind) {
    ActionEffect e;
    e.kind = kind;
    e.participant_id = inst().participant_id;
    e.cycle_date = inst().cycle_date;
    e.seq = event_.seq;
    e.trigger = trigger_;
    e.idempotency_key = effect_key(e.participant_id, e.cycle_date, kind, event_.seq, ordinal_++);
    return e;
  }

  void emit_record(const study::FastRecord& record) {
    ActionEffect e = make_effect(EffectKind::FastRecordData);
    e.record = record;
    e.record.group_id = inst().group_id;
    result_.effects.push_back(std::move(e));
  }

  void set_trigger(std::string t) { trigger_ = std::move(t); }

 private:
  std::optional<ClockTime> reported_time(const char* action) {
    if (event_.kind == EventKind::Intent &&
        (event_.intent.kind == intake::IntentKind::StartCal || event_.intent.kind == intake::IntentKind::EndCal)) {
      return event_.intent.time;
    }
    note("FAULT", {{"error", "NO_REPORTED_TIME"}, {"action", action}});
    return std::nullopt;
  }

  void correction(const char* field, const std::optional<ClockTime>& old, ClockTime now_value) {
    if (old && *old != now_value) {
      note("CORRECTION", {{"field", field}, {"old", format_hhmm(*old)}, {"new", format_hhmm(now_value)}});
    } else if (old) {
      note("CORRECTION", {{"field", field}, {"old", format_hhmm(*old)}, {"new", format_hhmm(now_value)},
                          {"unchanged", true}});
    }
  }

  void execute(const ActionSpec& a) {
    auto& m = inst();
    switch (a.kind) {
      case ActionKind::SendTemplate:
        send(a.template_id, reply_class_);
        break;
      case ActionKind::RecordStart:
        if (auto t = reported_time("record_start")) {
          correction("start", m.vars.start_time, *t);
          m.vars.start_time = *t;
          m.vars.window.reset();
        }
        break;
      case ActionKind::RecordEnd:
        if (auto t = reported_time("record_end")) {
          correction("end", m.vars.end_time, *t);
          m.vars.end_time = *t;
        }
        break;
      case ActionKind::ComputeWindow:
        window_rejected_ = false;
        if (!m.vars.start_time) {
          note("FAULT", {{"error", "NO_START_TIME"}, {"action", "compute_window"}});
          break;
        }
        try {
          m.vars.window = study::compute_window(*m.vars.start_time, config_);
        } catch (const Error& err) {
          m.vars.window.reset();
          window_rejected_ = true;
          rejection_ = err.code();
          send(protocol::kLateStartTemplate, reply_class_);
        }
        break;
      case ActionKind::EvaluateCycle: {
        if (!m.vars.start_time || !m.vars.end_time) {
          note("FAULT", {{"error", "INCOMPLETE_CYCLE"}, {"action", "evaluate_cycle"}});
          break;
        }
        if (m.vars.outcome == study::FastOutcome::Success) --m.successes;
        auto record = study::make_fast_record(m.participant_id, m.cycle_date, m.vars.start_time, m.vars.end_time,
                                              config_);
        m.vars.outcome = record.outcome;
        if (record.outcome == study::FastOutcome::Success) ++m.successes;
        emit_record(record);
        send(study::feedback_for(record.outcome, a.feedback), reply_class_);
        break;
      }
      case ActionKind::SendSuccessRate:
        send(protocol::kSuccessRateTemplate, reply_class_);
        break;
      case ActionKind::ResetCycle:
        m.vars.start_time.reset();
        m.vars.end_time.reset();
        m.vars.window.reset();
        break;
    }
  }

  std::string render(std::string_view text) const {
    const auto& m = result_.instance;
    std::string out;
    std::size_t pos = 0;
    while (pos < text.size()) {
      const auto open = text.find('{', pos);
      if (open == std::string_view::npos) break;
      const auto close = text.find('}', open + 1);
      if (close == std::string_view::npos) break;
      out.append(text.substr(pos, open - pos));
      const std::string name(text.substr(open + 1, close - open - 1));
      std::optional<std::string> value;
      if (name == "start" && m.vars.start_time) value = format_12h(*m.vars.start_time);
      if (name == "end" && m.vars.end_time) value = format_12h(*m.vars.end_time);
      if (m.vars.window) {
        if (name == "window_end") value = format_12h(m.vars.window->target_end);
        if (name == "ok_from") value = format_12h(m.vars.window->earliest_ok);
        if (name == "ok_to") value = format_12h(m.vars.window->latest_ok);
      }
      if (name == "duration" && m.vars.start_time && m.vars.end_time) {
        const int d = study::window_minutes(*m.vars.start_time, *m.vars.end_time, config_);
        if (d > 0) value = study::format_duration(d);
      }
      if (name == "success_rate") value = percent_string(study::success_rate(m.successes, m.cycles_enrolled));
      if (name == "latest_end") value = format_12h(config_.latest_end);
      if (value) {
        out += *value;
      } else {
        out.append(text.substr(open, close - open + 1));
      }
      pos = close + 1;
    }
    out.append(text.substr(pos));
    return out;
  }

  const ProtocolDef& def_;
  const EngineEvent& event_;
  const study::StudyConfig& config_;
  DispatchResult result_;
  std::string trigger_;
  ReplyClass reply_class_ = ReplyClass::Response;
  bool window_rejected_ = false;
  std::string rejection_;
  int ordinal_ = 0;
};

void check_seq(const MachineInstance& instance, const EngineEvent& event) {
  if (event.seq != instance.last_event_seq + 1) {
    throw Error("STALE_EVENT",
                "event seq " + std::to_string(event.seq) + " does not follow " +
                    std::to_string(instance.last_event_seq) + " for " + instance.participant_id,
                true);
  }
}

void dispatch_intent(Dispatcher& d, const ProtocolDef& def, const EngineEvent& event,
                     const study::StudyConfig& config) {
  const auto& intent = event.intent;
  const std::string kw = to_string(intent.keyword);
  switch (intent.kind) {
    case intake::IntentKind::StartCal:
    case intake::IntentKind::EndCal: {
      auto& m = d.inst();
      // An end that does not follow the recorded start is invalid input, not a report.
      if (intent.kind == intake::IntentKind::EndCal && m.vars.start_time &&
          study::window_minutes(*m.vars.start_time, intent.time, config) <= 0) {
        d.reply_error("invalid_endcal");
        return;
      }
      if (const auto* tr = def.find_transition(m.current_state, kw)) {
        d.run_transition(*tr, ReplyClass::Response, true);
      } else {
        d.reply_error("unhandled_" + kw);
      }
      return;
    }
    case intake::IntentKind::AmbiguousTime:
      d.reply_error("ambiguous_" + kw);
      return;
    case intake::IntentKind::InvalidTime:
      d.reply_error("invalid_" + kw);
      return;
    case intake::IntentKind::Unknown:
      d.reply_error(protocol::kUnrecognizedTemplate);
      return;
  }
}

void dispatch_timer(Dispatcher& d, const ProtocolDef& def, const EngineEvent& event) {
  auto& m = d.inst();
  auto it = std::find_if(m.pending_timers.begin(), m.pending_timers.end(), [&](const PendingTimer& p) {
    return p.name == event.timer && p.fire_at == event.fire_at;
  });
  if (it == m.pending_timers.end()) return;  // stale occurrence
  m.pending_timers.erase(it);
  m.fired_timers.insert(std::upper_bound(m.fired_timers.begin(), m.fired_timers.end(), event.timer), event.timer);
  const auto* timer = def.find_timer(event.timer);
  if (!timer) return;
  d.set_trigger(timer->emits);
  if (const auto* tr = def.find_transition(m.current_state, timer->emits)) {
    d.run_transition(*tr, ReplyClass::Reminder, true);
  }
}

void dispatch_rollover(Dispatcher& d, const ProtocolDef& def, const EngineEvent& event,
                       const study::StudyConfig& config) {
  auto& m = d.inst();
  if (event.cycle <= m.cycle_date) return;
  if (!m.vars.outcome) {
    d.set_trigger(std::string(protocol::kCycleEndEvent));
    const bool ordered = m.vars.start_time && m.vars.end_time &&
                         study::window_minutes(*m.vars.start_time, *m.vars.end_time, config) > 0;
    auto record = study::make_fast_record(m.participant_id, m.cycle_date, m.vars.start_time,
                                          ordered ? m.vars.end_time : std::nullopt, config);
    if (record.outcome == study::FastOutcome::Success) ++m.successes;
    d.emit_record(record);
  }
  if (const auto* tr = def.find_transition(m.current_state, protocol::kCycleEndEvent)) {
    d.run_transition(*tr, ReplyClass::Info, false);
  }
  m.cycle_date = event.cycle;
  m.vars = {};
  m.fired_timers.clear();
  m.cycles_enrolled += 1;
  m.pending_timers.clear();
  d.reschedule(event.occurred_at);
}

}  // namespace

absl::Time MachineInstance::next_rollover(const study::StudyConfig& config) const {
  return study::cycle_start_instant(cycle_date + 1, config);
}

EngineEvent EngineEvent::intent_event(intake::Intent intent, absl::Time at, std::int64_t message_id) {
  EngineEvent e;
  e.kind = EventKind::Intent;
  e.intent = intent;
  e.occurred_at = at;
  e.message_id = message_id;
  return e;
}

EngineEvent EngineEvent::manual_event(std::string target_state, std::string actor, absl::Time at) {
  EngineEvent e;
  e.kind = EventKind::Manual;
  e.target_state = std::move(target_state);
  e.actor = std::move(actor);
  e.occurred_at = at;
  return e;
}

EngineEvent EngineEvent::reassign_event(std::string group_id, std::string actor, absl::Time at) {
  EngineEvent e;
  e.kind = EventKind::Reassign;
  e.group_id = std::move(group_id);
  e.actor = std::move(actor);
  e.occurred_at = at;
  return e;
}

std::string effect_key(std::string_view participant_id, study::CycleDate cycle, EffectKind kind, std::uint64_t seq,
                       int ordinal) {
  std::string material(participant_id);
  material += '\x1f';
  material += study::format_date(cycle);
  material += '\x1f';
  material += to_string(kind);
  material += '\x1f';
  material += std::to_string(seq);
  material += '\x1f';
  material += std::to_string(ordinal);
  return to_hex(fnv1a64(material));
}

MachineInstance instantiate(const ProtocolDef& def, const std::string& participant_id, const std::string& group_id,
                            absl::Time now, const study::StudyConfig& config) {
  if (!def.find_state(def.initial_state)) {
    throw Error("INVALID_PROTOCOL", "protocol '" + def.protocol_id + "' has no usable initial state");
  }
  MachineInstance m;
  m.participant_id = participant_id;
  m.group_id = group_id;
  m.protocol_id = def.protocol_id;
  m.protocol_version = def.version;
  m.current_state = def.initial_state;
  m.cycle_date = study::cycle_of(now, config);
  m.enrolled_at = now;
  for (const auto& t : def.timers) {
    if (!active_in(t, m.current_state)) continue;
    const absl::Time at = timer_instant(t, m.cycle_date, config);
    if (at >= now) m.pending_timers.push_back({t.name, at});
  }
  sort_timers(m.pending_timers);
  return m;
}

DispatchResult dispatch(const MachineInstance& instance, const ProtocolDef& def, const EngineEvent& event,
                        const study::StudyConfig& config) {
  check_seq(instance, event);
  if (event.kind == EventKind::Manual) {
    auto r = manual_transition(instance, def, event.target_state, event.actor, event.occurred_at, config);
    r.instance.last_event_seq = event.seq;
    return r;
  }
  if (event.kind == EventKind::Reassign) {
    throw Error("BAD_EVENT", "reassign events are applied with reassign_protocol");
  }
  Dispatcher d(instance, def, event, config);
  d.inst().last_event_seq = event.seq;
  switch (event.kind) {
    case EventKind::Intent:
      dispatch_intent(d, def, event, config);
      break;
    case EventKind::Timer:
      dispatch_timer(d, def, event);
      break;
    case EventKind::Rollover:
      dispatch_rollover(d, def, event, config);
      break;
    default:
      break;
  }
  return d.take();
}

DispatchResult manual_transition(const MachineInstance& instance, const ProtocolDef& def,
                                 std::string_view target_state, std::string_view actor, absl::Time now,
                                 const study::StudyConfig& config) {
  if (actor.empty()) throw Error("UNAUTHENTICATED", "manual transitions require an authenticated researcher");
  if (!def.find_state(target_state)) {
    throw Error("UNKNOWN_STATE", "protocol '" + def.protocol_id + "' has no state '" + std::string(target_state) + "'");
  }
  EngineEvent event;
  event.kind = EventKind::Manual;
  event.seq = instance.last_event_seq;
  event.occurred_at = now;
  Dispatcher d(instance, def, event, config);
  const std::string from = instance.current_state;
  d.inst().current_state = std::string(target_state);
  d.set_trigger("manual");
  d.reschedule(now);
  d.note("MANUAL_TRANSITION", {{"actor", actor}, {"from", from}, {"to", target_state}});
  return d.take();
}

DispatchResult reassign_protocol(const MachineInstance& instance, const ProtocolDef& def,
                                 const std::string& group_id, const EngineEvent& event,
                                 const study::StudyConfig& config) {
  check_seq(instance, event);
  DispatchResult r;
  r.archived = instance;
  r.instance = instantiate(def, instance.participant_id, group_id, event.occurred_at, config);
  r.instance.last_event_seq = event.seq;
  r.notes.push_back({"GROUP_REASSIGNED",
                     {{"actor", event.actor},
                      {"old_group", instance.group_id},
                      {"new_group", group_id},
                      {"old_protocol", instance.protocol_id},
                      {"new_protocol", def.protocol_id},
                      {"old_state", instance.current_state},
                      {"effective_cycle", study::format_date(r.instance.cycle_date)}}});
  return r;
}

const char* to_string(EventKind kind) {
  switch (kind) {
    case EventKind::Intent: return "intent";
    case EventKind::Timer: return "timer";
    case EventKind::Rollover: return "rollover";
    case EventKind::Manual: return "manual";
    case EventKind::Reassign: return "reassign";
  }
  return "?";
}

const char* to_string(ReplyClass cls) {
  switch (cls) {
    case ReplyClass::Response: return "response";
    case ReplyClass::Reminder: return "reminder";
    case ReplyClass::Error: return "error";
    case ReplyClass::Info: return "info";
  }
  return "?";
}

const char* to_string(EffectKind kind) {
  switch (kind) {
    case EffectKind::OutboundMessage: return "outbound";
    case EffectKind::FastRecordData: return "fast_record";
    case EffectKind::TimerSchedule: return "timer_schedule";
    case EffectKind::TimerCancel: return "timer_cancel";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Runtime
// ---------------------------------------------------------------------------

Runtime::Runtime(study::StudyConfig config, std::vector<protocol::ProtocolDef> protocols)
    : config_(std::move(config)) {
  for (auto& p : protocols) {
    const std::string id = p.protocol_id;
    protocols_.insert_or_assign(id, std::move(p));
  }
}

const protocol::ProtocolDef& Runtime::protocol(std::string_view protocol_id) const {
  auto it = protocols_.find(protocol_id);
  if (it == protocols_.end()) throw Error("MISSING_PROTOCOL", "protocol '" + std::string(protocol_id) + "' is not loaded");
  return it->second;
}

bool Runtime::has_group(std::string_view group_id) const {
  return std::any_of(config_.groups.begin(), config_.groups.end(),
                     [&](const study::GroupProtocol& g) { return g.group_id == group_id; });
}

const protocol::ProtocolDef& Runtime::protocol_for_group(std::string_view group_id) const {
  for (const auto& g : config_.groups) {
    if (g.group_id == group_id) return protocol(g.protocol_id);
  }
  throw Error("UNKNOWN_GROUP", "study has no group '" + std::string(group_id) + "'");
}

const MachineInstance& Runtime::instantiate(const std::string& participant_id, const std::string& group_id,
                                            absl::Time now) {
  if (slots_.count(participant_id)) {
    throw Error("DUPLICATE_INSTANCE", "participant " + participant_id + " already has a running instance");
  }
  const auto& def = protocol_for_group(group_id);
  Slot s;
  s.instance = runtime::instantiate(def, participant_id, group_id, now, config_);
  return slots_.emplace(participant_id, std::move(s)).first->second.instance;
}

bool Runtime::contains(std::string_view participant_id) const { return slots_.find(participant_id) != slots_.end(); }

Runtime::Slot& Runtime::slot(std::string_view participant_id) {
  auto it = slots_.find(participant_id);
  if (it == slots_.end()) throw Error("UNKNOWN_PARTICIPANT", "no instance for " + std::string(participant_id));
  return it->second;
}

const Runtime::Slot& Runtime::slot(std::string_view participant_id) const {
  auto it = slots_.find(participant_id);
  if (it == slots_.end()) throw Error("UNKNOWN_PARTICIPANT", "no instance for " + std::string(participant_id));
  return it->second;
}

const MachineInstance& Runtime::instance(std::string_view participant_id) const {
  return slot(participant_id).instance;
}

std::vector<std::string> Runtime::participant_ids() const {
  std::vector<std::string> out;
  for (const auto& [id, _] : slots_) out.push_back(id);
  return out;
}

EngineEvent Runtime::enqueue(const std::string& participant_id, EngineEvent event) {
  Slot& s = slot(participant_id);
  const std::uint64_t last = std::max(s.next_seq, s.instance.last_event_seq);
  if (event.seq == 0) {
    event.seq = last + 1;
  } else if (event.seq != last + 1) {
    throw Error("STALE_EVENT", "replayed seq " + std::to_string(event.seq) + " does not follow " + std::to_string(last),
                true);
  }
  s.next_seq = event.seq;
  if (event.kind == EventKind::Timer) s.timers_enqueued.push_back({event.timer, event.fire_at});
  if (event.kind == EventKind::Rollover) s.rollover_enqueued = event.cycle;
  s.queue.push_back(event);
  return event;
}

std::vector<std::pair<std::string, EngineEvent>> Runtime::tick(absl::Time now,
                                                               const std::function<bool(const std::string&)>& filter) {
  std::vector<std::pair<std::string, EngineEvent>> out;
  for (auto& [id, s] : slots_) {
    if (filter && !filter(id)) continue;
    const auto& m = s.instance;
    const study::CycleDate next_cycle = m.cycle_date + 1;
    if (now >= m.next_rollover(config_)) {
      if (!s.rollover_enqueued || *s.rollover_enqueued < next_cycle) {
        EngineEvent e;
        e.kind = EventKind::Rollover;
        e.cycle = next_cycle;
        e.occurred_at = now;
        out.emplace_back(id, enqueue(id, e));
      }
      continue;  // timers of a finished cycle never fire
    }
    for (const auto& p : m.pending_timers) {
      if (p.fire_at > now) break;
      if (std::find(s.timers_enqueued.begin(), s.timers_enqueued.end(), p) != s.timers_enqueued.end()) continue;
      EngineEvent e;
      e.kind = EventKind::Timer;
      e.timer = p.name;
      e.fire_at = p.fire_at;
      e.occurred_at = now;
      out.emplace_back(id, enqueue(id, e));
    }
  }
  return out;
}

std::uint64_t Runtime::next_seq(std::string_view participant_id) const {
  const Slot& s = slot(participant_id);
  return std::max(s.next_seq, s.instance.last_event_seq) + 1;
}

std::size_t Runtime::queued(std::string_view participant_id) const { return slot(participant_id).queue.size(); }

const EngineEvent* Runtime::peek(std::string_view participant_id) const {
  const Slot& s = slot(participant_id);
  return s.queue.empty() ? nullptr : &s.queue.front();
}

std::optional<DispatchResult> Runtime::prepare(const std::string& participant_id) const {
  const Slot& s = slot(participant_id);
  if (s.queue.empty()) return std::nullopt;
  const EngineEvent& e = s.queue.front();
  if (e.kind == EventKind::Reassign) {
    return reassign_protocol(s.instance, protocol_for_group(e.group_id), e.group_id, e, config_);
  }
  return dispatch(s.instance, protocol(s.instance.protocol_id), e, config_);
}

void Runtime::commit(const std::string& participant_id, DispatchResult result) {
  Slot& s = slot(participant_id);
  if (s.queue.empty() || s.queue.front().seq != result.instance.last_event_seq) {
    throw Error("STALE_EVENT", "commit does not match the queue head for " + participant_id, true);
  }
  const EngineEvent head = s.queue.front();
  s.queue.pop_front();
  if (head.kind == EventKind::Timer) {
    const PendingTimer key{head.timer, head.fire_at};
    s.timers_enqueued.erase(std::remove(s.timers_enqueued.begin(), s.timers_enqueued.end(), key),
                            s.timers_enqueued.end());
  }
  if (head.kind == EventKind::Reassign) {
    s.timers_enqueued.clear();
    s.rollover_enqueued.reset();
  }
  s.instance = std::move(result.instance);
}

void Runtime::skip(const std::string& participant_id) {
  Slot& s = slot(participant_id);
  if (s.queue.empty()) throw Error("EMPTY_QUEUE", "nothing queued for " + participant_id);
  const EngineEvent head = s.queue.front();
  s.queue.pop_front();
  s.instance.last_event_seq = head.seq;
  if (head.kind == EventKind::Rollover) s.rollover_enqueued.reset();
}

Checkpoint Runtime::save_checkpoint(absl::Time now, std::uint64_t audit_seq) const {
  Checkpoint c;
  c.taken_at = now;
  c.audit_seq = audit_seq;
  for (const auto& [id, s] : slots_) {
    c.instances.push_back(s.instance);
    c.seq_watermarks[id] = std::max(s.next_seq, s.instance.last_event_seq);
  }
  return c;
}

Runtime Runtime::restore(const Checkpoint& checkpoint, study::StudyConfig config,
                         std::vector<protocol::ProtocolDef> protocols) {
  if (checkpoint.format_version != kCheckpointFormatVersion) {
    throw Error("VERSION_MISMATCH", "checkpoint format " + std::to_string(checkpoint.format_version) +
                                        " is not supported (expected " + std::to_string(kCheckpointFormatVersion) +
                                        ")");
  }
  Runtime rt(std::move(config), std::move(protocols));
  for (const auto& m : checkpoint.instances) {
    auto it = rt.protocols_.find(m.protocol_id);
    if (it == rt.protocols_.end()) {
      throw Error("MISSING_PROTOCOL", "checkpoint references protocol '" + m.protocol_id + "' which is not loaded");
    }
    if (it->second.version != m.protocol_version) {
      throw Error("MISSING_PROTOCOL", "checkpoint references protocol '" + m.protocol_id + "' version " +
                                          std::to_string(m.protocol_version) + " but version " +
                                          std::to_string(it->second.version) + " is loaded");
    }
    if (!it->second.find_state(m.current_state)) {
      throw Error("CORRUPT_CHECKPOINT", "state '" + m.current_state + "' is not in protocol '" + m.protocol_id + "'");
    }
    Slot s;
    s.instance = m;
    // Events past the applied watermark are replayed from the journal.
    s.next_seq = m.last_event_seq;
    rt.slots_.emplace(m.participant_id, std::move(s));
  }
  return rt;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

namespace {

using nlohmann::json;

[[noreturn]] void corrupt(const std::string& what) { throw Error("CORRUPT_CHECKPOINT", what); }

json opt_time(const std::optional<ClockTime>& t) { return t ? json(format_hhmm(*t)) : json(nullptr); }

std::optional<ClockTime> read_time(const json& j) {
  if (j.is_null()) return std::nullopt;
  auto t = parse_hhmm(j.get<std::string>());
  if (!t) corrupt("bad clock time " + j.dump());
  return t;
}

ClockTime require_time(const json& j) {
  auto t = read_time(j);
  if (!t) corrupt("missing clock time");
  return *t;
}

absl::Time read_instant(const json& j) {
  auto t = parse_instant(j.get<std::string>());
  if (!t) corrupt("bad instant " + j.dump());
  return *t;
}

study::CycleDate read_date(const json& j) {
  auto d = study::parse_date(j.get<std::string>());
  if (!d) corrupt("bad date " + j.dump());
  return *d;
}

template <typename E>
E read_enum(const json& j, std::initializer_list<E> values) {
  const auto s = j.get<std::string>();
  for (E v : values) {
    if (s == to_string(v)) return v;
  }
  corrupt("unknown value '" + s + "'");
}

}  // namespace

json to_json(const MachineInstance& m) {
  json vars = {{"start_time", opt_time(m.vars.start_time)}, {"end_time", opt_time(m.vars.end_time)}};
  if (m.vars.window) {
    const auto& w = *m.vars.window;
    vars["window"] = {{"start", format_hhmm(w.start)},
                      {"target_end", format_hhmm(w.target_end)},
                      {"earliest_ok", format_hhmm(w.earliest_ok)},
                      {"latest_ok", format_hhmm(w.latest_ok)}};
  } else {
    vars["window"] = nullptr;
  }
  vars["outcome"] = m.vars.outcome ? json(study::to_string(*m.vars.outcome)) : json(nullptr);
  json timers = json::array();
  for (const auto& t : m.pending_timers) timers.push_back({{"name", t.name}, {"fire_at", format_instant(t.fire_at)}});
  return {{"participant_id", m.participant_id},
          {"group_id", m.group_id},
          {"protocol_id", m.protocol_id},
          {"protocol_version", m.protocol_version},
          {"current_state", m.current_state},
          {"cycle_date", study::format_date(m.cycle_date)},
          {"vars", vars},
          {"pending_timers", timers},
          {"fired_timers", m.fired_timers},
          {"last_event_seq", m.last_event_seq},
          {"cycles_enrolled", m.cycles_enrolled},
          {"successes", m.successes},
          {"enrolled_at", format_instant(m.enrolled_at)}};
}

MachineInstance instance_from_json(const json& j) {
  try {
    MachineInstance m;
    m.participant_id = j.at("participant_id").get<std::string>();
    m.group_id = j.at("group_id").get<std::string>();
    m.protocol_id = j.at("protocol_id").get<std::string>();
    m.protocol_version = j.at("protocol_version").get<int>();
    m.current_state = j.at("current_state").get<std::string>();
    m.cycle_date = read_date(j.at("cycle_date"));
    const auto& v = j.at("vars");
    m.vars.start_time = read_time(v.at("start_time"));
    m.vars.end_time = read_time(v.at("end_time"));
    if (!v.at("window").is_null()) {
      const auto& w = v.at("window");
      m.vars.window = study::EatingWindow{require_time(w.at("start")), require_time(w.at("target_end")),
                                          require_time(w.at("earliest_ok")), require_time(w.at("latest_ok"))};
    }
    if (!v.at("outcome").is_null()) {
      auto o = study::parse_outcome(v.at("outcome").get<std::string>());
      if (!o) corrupt("bad outcome " + v.at("outcome").dump());
      m.vars.outcome = o;
    }
    for (const auto& t : j.at("pending_timers")) {
      m.pending_timers.push_back({t.at("name").get<std::string>(), read_instant(t.at("fire_at"))});
    }
    sort_timers(m.pending_timers);
    m.fired_timers = j.at("fired_timers").get<std::vector<std::string>>();
    std::sort(m.fired_timers.begin(), m.fired_timers.end());
    m.last_event_seq = j.at("last_event_seq").get<std::uint64_t>();
    m.cycles_enrolled = j.at("cycles_enrolled").get<int>();
    m.successes = j.at("successes").get<int>();
    m.enrolled_at = read_instant(j.at("enrolled_at"));
    return m;
  } catch (const json::exception& e) {
    corrupt(std::string("malformed instance: ") + e.what());
  }
}

json to_json(const EngineEvent& e) {
  json j = {{"kind", to_string(e.kind)}, {"seq", e.seq}, {"occurred_at", format_instant(e.occurred_at)}};
  switch (e.kind) {
    case EventKind::Intent:
      j["intent"] = {{"kind", intake::to_string(e.intent.kind)},
                     {"keyword", intake::to_string(e.intent.keyword)},
                     {"time", format_hhmm(e.intent.time)},
                     {"extra_time_tokens", e.intent.extra_time_tokens}};
      j["message_id"] = e.message_id;
      break;
    case EventKind::Timer:
      j["timer"] = e.timer;
      j["fire_at"] = format_instant(e.fire_at);
      break;
    case EventKind::Rollover:
      j["cycle"] = study::format_date(e.cycle);
      break;
    case EventKind::Manual:
      j["target_state"] = e.target_state;
      j["actor"] = e.actor;
      break;
    case EventKind::Reassign:
      j["group_id"] = e.group_id;
      j["actor"] = e.actor;
      break;
  }
  return j;
}

EngineEvent event_from_json(const json& j) {
  try {
    EngineEvent e;
    e.kind = read_enum(j.at("kind"), {EventKind::Intent, EventKind::Timer, EventKind::Rollover, EventKind::Manual,
                                      EventKind::Reassign});
    e.seq = j.at("seq").get<std::uint64_t>();
    e.occurred_at = read_instant(j.at("occurred_at"));
    switch (e.kind) {
      case EventKind::Intent: {
        const auto& i = j.at("intent");
        e.intent.kind = read_enum(i.at("kind"), {intake::IntentKind::StartCal, intake::IntentKind::EndCal,
                                                 intake::IntentKind::AmbiguousTime, intake::IntentKind::InvalidTime,
                                                 intake::IntentKind::Unknown});
        e.intent.keyword = read_enum(i.at("keyword"), {intake::Keyword::StartCal, intake::Keyword::EndCal});
        e.intent.time = require_time(i.at("time"));
        e.intent.extra_time_tokens = i.at("extra_time_tokens").get<bool>();
        e.message_id = j.value("message_id", std::int64_t{0});
        break;
      }
      case EventKind::Timer:
        e.timer = j.at("timer").get<std::string>();
        e.fire_at = read_instant(j.at("fire_at"));
        break;
      case EventKind::Rollover:
        e.cycle = read_date(j.at("cycle"));
        break;
      case EventKind::Manual:
        e.target_state = j.at("target_state").get<std::string>();
        e.actor = j.at("actor").get<std::string>();
        break;
      case EventKind::Reassign:
        e.group_id = j.at("group_id").get<std::string>();
        e.actor = j.at("actor").get<std::string>();
        break;
    }
    return e;
  } catch (const json::exception& ex) {
    corrupt(std::string("malformed event: ") + ex.what());
  }
}

json to_json(const Checkpoint& c) {
  json instances = json::array();
  for (const auto& m : c.instances) instances.push_back(to_json(m));
  return {{"format_version", c.format_version},
          {"taken_at", format_instant(c.taken_at)},
          {"audit_seq", c.audit_seq},
          {"seq_watermarks", c.seq_watermarks},
          {"instances", instances}};
}

Checkpoint checkpoint_from_json(const json& j) {
  if (!j.is_object() || !j.contains("format_version") || !j["format_version"].is_number_integer()) {
    corrupt("checkpoint has no format version");
  }
  Checkpoint c;
  c.format_version = j["format_version"].get<int>();
  if (c.format_version != kCheckpointFormatVersion) {
    throw Error("VERSION_MISMATCH", "checkpoint format " + std::to_string(c.format_version) +
                                        " is not supported (expected " + std::to_string(kCheckpointFormatVersion) +
                                        ")");
  }
  try {
    c.taken_at = read_instant(j.at("taken_at"));
    c.audit_seq = j.at("audit_seq").get<std::uint64_t>();
    c.seq_watermarks = j.at("seq_watermarks").get<std::map<std::string, std::uint64_t>>();
    for (const auto& m : j.at("instances")) c.instances.push_back(instance_from_json(m));
  } catch (const json::exception& e) {
    corrupt(std::string("malformed checkpoint: ") + e.what());
  }
  return c;
}

}  // namespace smartstate::runtime
