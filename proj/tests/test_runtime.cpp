#include <doctest.h>

#include <map>
#include <random>
#include <set>

#include "smartstate/error.h"
#include "smartstate/runtime.h"
#include "test_support.h"

using namespace smartstate;
using namespace smartstate::runtime;
using testing_support::load_fixture;

namespace {

study::StudyConfig config() {
  study::StudyConfig c;
  c.study_id = "tre";
  c.timezone_name = "America/Chicago";
  c.groups = {{"baseline", "baseline"}, {"control", "control"}, {"restricted", "restricted"}};
  c.finalize();
  return c;
}

std::vector<protocol::ProtocolDef> fixtures() {
  return {load_fixture("baseline"), load_fixture("control"), load_fixture("restricted")};
}

absl::Time at(int day, int h, int m) {
  static const auto tz = config().timezone;
  return absl::FromCivil(absl::CivilMinute(2021, 9, day, h, m), tz);
}

intake::Intent intent(const char* text) { return intake::classify(intake::sanitize(text)); }

EngineEvent next_intent(const MachineInstance& m, const char* text, absl::Time when) {
  auto e = EngineEvent::intent_event(intent(text), when);
  e.seq = m.last_event_seq + 1;
  return e;
}

std::vector<ActionEffect> outbound(const DispatchResult& r) {
  std::vector<ActionEffect> out;
  for (const auto& e : r.effects) {
    if (e.kind == EffectKind::OutboundMessage) out.push_back(e);
  }
  return out;
}

bool has_note(const DispatchResult& r, const std::string& kind) {
  for (const auto& n : r.notes) {
    if (n.kind == kind) return true;
  }
  return false;
}

bool contains(const std::string& hay, const std::string& needle) { return hay.find(needle) != std::string::npos; }

struct Drained {
  std::vector<ActionEffect> effects;
  std::vector<AuditNote> notes;
};

Drained drain(Runtime& rt, const std::string& pid) {
  Drained d;
  while (auto r = rt.prepare(pid)) {
    d.effects.insert(d.effects.end(), r->effects.begin(), r->effects.end());
    d.notes.insert(d.notes.end(), r->notes.begin(), r->notes.end());
    rt.commit(pid, std::move(*r));
  }
  return d;
}

}  // namespace

TEST_CASE("instantiate") {
  const auto c = config();
  const auto def = load_fixture("control");
  auto m = instantiate(def, "p1", "control", at(9, 8, 0), c);
  CHECK(m.current_state == "initial");
  CHECK(m.cycle_date == study::CycleDate(2021, 9, 9));
  REQUIRE(m.pending_timers.size() == 1);
  CHECK(m.pending_timers[0].name == "startcal_reminder");
  CHECK(m.pending_timers[0].fire_at == at(9, 12, 0));
  CHECK(m.next_rollover(c) == at(10, 4, 0));

  auto early = instantiate(def, "p2", "control", at(9, 3, 0), c);
  CHECK(early.cycle_date == study::CycleDate(2021, 9, 8));
  CHECK(early.pending_timers.empty());

  Runtime rt(c, fixtures());
  rt.instantiate("p1", "control", at(9, 8, 0));
  try {
    rt.instantiate("p1", "control", at(9, 8, 0));
    FAIL("expected DUPLICATE_INSTANCE");
  } catch (const Error& e) {
    CHECK(e.code() == "DUPLICATE_INSTANCE");
  }
  CHECK_THROWS_AS(rt.instantiate("p3", "ctrl", at(9, 8, 0)), Error);
}

TEST_CASE("restricted walkthrough: start, end, rollover") {
  const auto c = config();
  const auto def = load_fixture("restricted");
  auto m = instantiate(def, "p1", "restricted", at(9, 6, 0), c);

  auto r = dispatch(m, def, next_intent(m, "STARTCAL 7:00 AM", at(9, 7, 2)), c);
  CHECK(r.instance.current_state == "start_calories");
  CHECK(r.instance.vars.start_time == ClockTime{7, 0});
  REQUIRE(r.instance.vars.window);
  CHECK(r.instance.vars.window->earliest_ok == ClockTime{16, 0});
  CHECK(r.instance.vars.window->latest_ok == ClockTime{18, 0});
  auto msgs = outbound(r);
  REQUIRE(msgs.size() == 1);
  CHECK(msgs[0].template_id == "startcal_window");
  CHECK(msgs[0].reply_class == ReplyClass::Response);
  CHECK(contains(msgs[0].body, "5:00 PM"));
  CHECK(contains(msgs[0].body, "4:00 PM to 6:00 PM"));
  CHECK(has_note(r, "TRANSITION"));
  // startcal reminder cancelled, endcal reminder scheduled at 21:00.
  REQUIRE(r.instance.pending_timers.size() == 1);
  CHECK(r.instance.pending_timers[0].name == "endcal_reminder");
  CHECK(r.instance.pending_timers[0].fire_at == at(9, 21, 0));
  m = r.instance;

  r = dispatch(m, def, next_intent(m, "ENDCAL 4:30 PM", at(9, 16, 35)), c);
  CHECK(r.instance.current_state == "end_calories");
  CHECK(r.instance.vars.outcome == study::FastOutcome::Success);
  CHECK(r.instance.successes == 1);
  msgs = outbound(r);
  REQUIRE(msgs.size() == 1);
  CHECK(msgs[0].template_id == "good_window");
  CHECK(contains(msgs[0].body, "9 hours 30 minutes"));
  CHECK(contains(msgs[0].body, "100%"));
  bool record = false;
  for (const auto& e : r.effects) {
    if (e.kind == EffectKind::FastRecordData) {
      record = true;
      CHECK(e.record.outcome == study::FastOutcome::Success);
      CHECK(e.record.duration_minutes == 570);
      CHECK(e.record.group_id == "restricted");
    }
  }
  CHECK(record);
  CHECK(r.instance.pending_timers.empty());
  m = r.instance;

  EngineEvent roll;
  roll.kind = EventKind::Rollover;
  roll.seq = m.last_event_seq + 1;
  roll.cycle = study::CycleDate(2021, 9, 10);
  roll.occurred_at = at(10, 4, 0);
  r = dispatch(m, def, roll, c);
  CHECK(r.instance.current_state == "initial");
  CHECK(r.instance.vars == CycleVars{});
  CHECK(r.instance.cycle_date == study::CycleDate(2021, 9, 10));
  CHECK(r.instance.cycles_enrolled == 2);
  CHECK(outbound(r).empty());
  REQUIRE(r.instance.pending_timers.size() == 1);
  CHECK(r.instance.pending_timers[0].fire_at == at(10, 12, 0));
}

TEST_CASE("rollover records an incomplete cycle") {
  const auto c = config();
  const auto def = load_fixture("control");
  auto m = instantiate(def, "p1", "control", at(9, 6, 0), c);
  m = dispatch(m, def, next_intent(m, "startcal 8 am", at(9, 8, 0)), c).instance;
  EngineEvent roll;
  roll.kind = EventKind::Rollover;
  roll.seq = m.last_event_seq + 1;
  roll.cycle = study::CycleDate(2021, 9, 10);
  roll.occurred_at = at(10, 4, 0);
  auto r = dispatch(m, def, roll, c);
  int records = 0;
  for (const auto& e : r.effects) {
    if (e.kind != EffectKind::FastRecordData) continue;
    ++records;
    CHECK(e.record.outcome == study::FastOutcome::Incomplete);
    CHECK(e.record.start == ClockTime{8, 0});
    CHECK(e.record.cycle_date == study::CycleDate(2021, 9, 9));
  }
  CHECK(records == 1);
  CHECK(r.instance.current_state == "initial");
}

TEST_CASE("input the current state does not accept") {
  const auto c = config();
  const auto def = load_fixture("control");
  auto m = instantiate(def, "p1", "control", at(9, 6, 0), c);

  SUBCASE("endcal before startcal") {
    auto r = dispatch(m, def, next_intent(m, "endcal 4:30 pm", at(9, 17, 0)), c);
    CHECK(r.instance.current_state == "initial");
    auto msgs = outbound(r);
    REQUIRE(msgs.size() == 1);
    CHECK(msgs[0].template_id == "unhandled_endcal");
    CHECK(msgs[0].reply_class == ReplyClass::Error);
    CHECK_FALSE(has_note(r, "TRANSITION"));
  }
  SUBCASE("ambiguous time") {
    auto r = dispatch(m, def, next_intent(m, "startcal 7", at(9, 7, 0)), c);
    auto msgs = outbound(r);
    REQUIRE(msgs.size() == 1);
    CHECK(msgs[0].body ==
          "Your STARTCAL time was not understood. Please send 'STARTCAL' again with your starting time including 'am' "
          "or 'pm'.");
    CHECK(r.instance.current_state == "initial");
    CHECK(r.instance.last_event_seq == m.last_event_seq + 1);
  }
  SUBCASE("unknown text") {
    auto r = dispatch(m, def, next_intent(m, "hello there", at(9, 7, 0)), c);
    auto msgs = outbound(r);
    REQUIRE(msgs.size() == 1);
    CHECK(msgs[0].template_id == "unrecognized");
  }
  SUBCASE("end before start") {
    m = dispatch(m, def, next_intent(m, "startcal 9 am", at(9, 9, 0)), c).instance;
    auto r = dispatch(m, def, next_intent(m, "endcal 8 am", at(9, 9, 5)), c);
    CHECK(r.instance.current_state == "start_calories");
    REQUIRE(outbound(r).size() == 1);
    CHECK(outbound(r)[0].template_id == "invalid_endcal");
  }
}

TEST_CASE("late start in the restricted group") {
  const auto c = config();
  const auto def = load_fixture("restricted");
  auto m = instantiate(def, "p1", "restricted", at(9, 6, 0), c);
  auto r = dispatch(m, def, next_intent(m, "startcal 9 pm", at(9, 21, 0)), c);
  CHECK(r.instance.current_state == "start_calories");
  CHECK_FALSE(r.instance.vars.window);
  auto msgs = outbound(r);
  REQUIRE(msgs.size() == 1);
  CHECK(msgs[0].template_id == "late_start");
  CHECK(contains(msgs[0].body, "9:00 PM"));
  CHECK(contains(msgs[0].body, "8:00 PM"));
}

TEST_CASE("corrections overwrite and are noted") {
  const auto c = config();
  const auto def = load_fixture("restricted");
  auto m = instantiate(def, "p1", "restricted", at(9, 6, 0), c);
  m = dispatch(m, def, next_intent(m, "startcal 7 am", at(9, 7, 0)), c).instance;
  auto r = dispatch(m, def, next_intent(m, "startcal 8 am", at(9, 8, 0)), c);
  CHECK(r.instance.vars.start_time == ClockTime{8, 0});
  CHECK(r.instance.vars.window->target_end == ClockTime{18, 0});
  REQUIRE(has_note(r, "CORRECTION"));
  CHECK(outbound(r).size() == 1);
  m = r.instance;
  m = dispatch(m, def, next_intent(m, "endcal 6 pm", at(9, 18, 0)), c).instance;
  CHECK(m.successes == 1);
  r = dispatch(m, def, next_intent(m, "endcal 4 pm", at(9, 18, 30)), c);
  CHECK(r.instance.vars.outcome == study::FastOutcome::TooShort);
  CHECK(r.instance.successes == 0);
  CHECK(outbound(r)[0].template_id == "too_short_info");
}

TEST_CASE("stale sequence numbers are rejected") {
  const auto c = config();
  const auto def = load_fixture("control");
  auto m = instantiate(def, "p1", "control", at(9, 6, 0), c);
  auto e = next_intent(m, "startcal 7 am", at(9, 7, 0));
  e.seq = 5;
  try {
    dispatch(m, def, e, c);
    FAIL("expected STALE_EVENT");
  } catch (const Error& err) {
    CHECK(err.code() == "STALE_EVENT");
    CHECK(err.retryable());
  }
}

TEST_CASE("dispatch is deterministic and keys are unique") {
  const auto c = config();
  const auto def = load_fixture("restricted");
  auto m = instantiate(def, "p1", "restricted", at(9, 6, 0), c);
  const auto e = next_intent(m, "startcal 7 am", at(9, 7, 0));
  const auto a = dispatch(m, def, e, c);
  const auto b = dispatch(m, def, e, c);
  CHECK(a.instance == b.instance);
  REQUIRE(a.effects.size() == b.effects.size());
  std::set<std::string> keys;
  for (std::size_t i = 0; i < a.effects.size(); ++i) {
    CHECK(a.effects[i].idempotency_key == b.effects[i].idempotency_key);
    CHECK(a.effects[i].body == b.effects[i].body);
    CHECK(keys.insert(a.effects[i].idempotency_key).second);
  }
  CHECK(effect_key("p1", m.cycle_date, EffectKind::OutboundMessage, 1, 0) ==
        effect_key("p1", m.cycle_date, EffectKind::OutboundMessage, 1, 0));
  CHECK(effect_key("p1", m.cycle_date, EffectKind::OutboundMessage, 1, 0) !=
        effect_key("p1", m.cycle_date, EffectKind::OutboundMessage, 2, 0));
}

TEST_CASE("tick fires reminders once and only in active states") {
  const auto c = config();
  Runtime rt(c, fixtures());
  rt.instantiate("a", "control", at(9, 6, 0));
  rt.instantiate("b", "control", at(9, 6, 0));
  rt.enqueue("b", EngineEvent::intent_event(intent("startcal 8 am"), at(9, 8, 0)));
  drain(rt, "b");

  CHECK(rt.tick(at(9, 11, 59)).empty());
  auto due = rt.tick(at(9, 12, 0));
  REQUIRE(due.size() == 1);
  CHECK(due[0].first == "a");
  CHECK(due[0].second.kind == EventKind::Timer);
  CHECK(due[0].second.timer == "startcal_reminder");
  CHECK(rt.tick(at(9, 12, 0)).empty());
  auto d = drain(rt, "a");
  REQUIRE(d.effects.size() == 1);
  CHECK(d.effects[0].template_id == "startcal_reminder");
  CHECK(d.effects[0].reply_class == ReplyClass::Reminder);
  CHECK(rt.tick(at(9, 12, 1)).empty());

  due = rt.tick(at(9, 21, 0));
  REQUIRE(due.size() == 1);
  CHECK(due[0].first == "b");
  drain(rt, "b");

  due = rt.tick(at(10, 4, 0));
  CHECK(due.size() == 2);
  for (const auto& [pid, e] : due) CHECK(e.kind == EventKind::Rollover);
  CHECK(rt.tick(at(10, 4, 0)).empty());
}

TEST_CASE("tick after a long outage rolls over once per cycle and skips stale reminders") {
  const auto c = config();
  Runtime rt(c, fixtures());
  rt.instantiate("a", "control", at(9, 6, 0));
  auto due = rt.tick(at(11, 13, 0));
  REQUIRE(due.size() == 1);
  CHECK(due[0].second.kind == EventKind::Rollover);
  CHECK(due[0].second.cycle == study::CycleDate(2021, 9, 10));
  drain(rt, "a");
  due = rt.tick(at(11, 13, 0));
  REQUIRE(due.size() == 1);
  CHECK(due[0].second.cycle == study::CycleDate(2021, 9, 11));
  drain(rt, "a");
  CHECK(rt.instance("a").cycle_date == study::CycleDate(2021, 9, 11));
  CHECK(rt.instance("a").pending_timers.empty());
  CHECK(rt.tick(at(11, 13, 0)).empty());
}

TEST_CASE("manual transitions are silent") {
  const auto c = config();
  const auto def = load_fixture("control");
  auto m = instantiate(def, "p1", "control", at(9, 6, 0), c);
  m = dispatch(m, def, next_intent(m, "startcal 7 am", at(9, 7, 0)), c).instance;
  auto r = manual_transition(m, def, "initial", "dr-lee", at(9, 13, 0), c);
  CHECK(r.instance.current_state == "initial");
  CHECK(r.instance.vars.start_time == ClockTime{7, 0});
  CHECK(outbound(r).empty());
  REQUIRE(r.notes.size() == 1);
  CHECK(r.notes[0].kind == "MANUAL_TRANSITION");
  CHECK(r.notes[0].payload["actor"] == "dr-lee");
  CHECK(r.notes[0].payload["from"] == "start_calories");
  CHECK(r.notes[0].payload["to"] == "initial");
  // 12:00 already passed, so the start reminder is not rescheduled.
  CHECK(r.instance.pending_timers.empty());

  auto code_of = [&](auto fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    return std::string();
  };
  CHECK(code_of([&] { manual_transition(m, def, "no_such_state", "dr-lee", at(9, 13, 0), c); }) == "UNKNOWN_STATE");
  CHECK(code_of([&] { manual_transition(m, def, "initial", "", at(9, 13, 0), c); }) == "UNAUTHENTICATED");

  Runtime rt(c, fixtures());
  rt.instantiate("p1", "control", at(9, 6, 0));
  rt.enqueue("p1", EngineEvent::manual_event("end_calories", "dr-lee", at(9, 7, 0)));
  auto d = drain(rt, "p1");
  CHECK(rt.instance("p1").current_state == "end_calories");
  CHECK(rt.instance("p1").last_event_seq == 1);
  for (const auto& e : d.effects) CHECK(e.kind != EffectKind::OutboundMessage);
}

TEST_CASE("protocol reassignment") {
  const auto c = config();
  Runtime rt(c, fixtures());
  rt.instantiate("p1", "baseline", at(9, 6, 0));
  rt.enqueue("p1", EngineEvent::intent_event(intent("startcal 7 am"), at(9, 7, 0)));
  drain(rt, "p1");
  rt.enqueue("p1", EngineEvent::reassign_event("restricted", "dr-lee", at(9, 9, 0)));
  auto r = rt.prepare("p1");
  REQUIRE(r);
  REQUIRE(r->archived);
  CHECK(r->archived->protocol_id == "baseline");
  CHECK(r->instance.protocol_id == "restricted");
  CHECK(r->instance.current_state == "initial");
  CHECK(r->instance.last_event_seq == 2);
  int notes = 0;
  for (const auto& n : r->notes) notes += n.kind == "GROUP_REASSIGNED";
  CHECK(notes == 1);
  rt.commit("p1", std::move(*r));
  CHECK(rt.instance("p1").group_id == "restricted");
  rt.enqueue("p1", EngineEvent::intent_event(intent("startcal 9 am"), at(9, 9, 5)));
  auto d = drain(rt, "p1");
  CHECK(rt.instance("p1").current_state == "start_calories");
  REQUIRE_FALSE(d.effects.empty());
}

TEST_CASE("checkpoint round trip") {
  const auto c = config();
  Runtime rt(c, fixtures());
  rt.instantiate("a", "restricted", at(9, 6, 0));
  rt.instantiate("b", "control", at(9, 6, 0));
  rt.enqueue("a", EngineEvent::intent_event(intent("startcal 7 am"), at(9, 7, 0)));
  drain(rt, "a");
  rt.enqueue("b", EngineEvent::intent_event(intent("startcal 7:15 am"), at(9, 7, 15)));
  rt.enqueue("b", EngineEvent::intent_event(intent("endcal 4:00 pm"), at(9, 16, 0)));
  drain(rt, "b");

  const auto cp = rt.save_checkpoint(at(9, 17, 0), 12);
  const auto text = to_json(cp).dump();
  const auto back = checkpoint_from_json(nlohmann::json::parse(text));
  CHECK(to_json(back).dump() == text);
  auto restored = Runtime::restore(back, c, fixtures());
  for (const auto& pid : rt.participant_ids()) CHECK(restored.instance(pid) == rt.instance(pid));
  CHECK(back.audit_seq == 12);
  CHECK(back.seq_watermarks.at("b") == 2);

  auto j = to_json(cp);
  j["format_version"] = 99;
  try {
    checkpoint_from_json(j);
    FAIL("expected VERSION_MISMATCH");
  } catch (const Error& e) {
    CHECK(e.code() == "VERSION_MISMATCH");
  }
  try {
    Runtime::restore(back, c, {load_fixture("control")});
    FAIL("expected MISSING_PROTOCOL");
  } catch (const Error& e) {
    CHECK(e.code() == "MISSING_PROTOCOL");
  }
  CHECK_THROWS_AS(checkpoint_from_json(nlohmann::json::parse(R"({"format_version":1})")), Error);

  EngineEvent ev = EngineEvent::intent_event(intent("endcal 4:30 pm"), at(9, 16, 30), 17);
  ev.seq = 3;
  const auto ev2 = event_from_json(to_json(ev));
  CHECK(ev2.intent == ev.intent);
  CHECK(ev2.seq == 3);
  CHECK(ev2.message_id == 17);
  CHECK(ev2.occurred_at == ev.occurred_at);
}

TEST_CASE("property: random event streams keep runtime invariants") {
  const auto c = config();
  const auto defs = fixtures();
  const char* texts[] = {"startcal 7 am", "startcal 7",    "endcal 5:30 pm", "endcal 9 pm", "hello",
                         "startcal 10 pm", "endcal 6 am", "startcal 19:00", "endcal 25:00"};
  std::mt19937_64 rng(5);
  for (int run = 0; run < 60; ++run) {
    const char* group = run % 3 == 0 ? "baseline" : run % 3 == 1 ? "control" : "restricted";
    Runtime rt(c, defs);
    rt.instantiate("p", group, at(1, 5, 0));
    const auto& def = rt.protocol_for_group(group);
    std::map<std::pair<std::string, std::string>, int> reminders;  // (cycle, template)
    absl::Time now = at(1, 5, 0);
    for (int step = 0; step < 400; ++step) {
      now += absl::Minutes(10 + static_cast<int>(rng() % 120));
      rt.tick(now);
      if (rng() % 3 == 0) rt.enqueue("p", EngineEvent::intent_event(intent(texts[rng() % std::size(texts)]), now));
      while (auto r = rt.prepare("p")) {
        for (const auto& n : r->notes) {
          if (n.kind != "TRANSITION") continue;
          const auto* t = def.find_transition(n.payload["from"].get<std::string>(), n.payload["event"].get<std::string>());
          REQUIRE(t);
          CHECK(t->target == n.payload["to"].get<std::string>());
        }
        for (const auto& e : r->effects) {
          if (e.kind == EffectKind::OutboundMessage && e.reply_class == ReplyClass::Reminder) {
            CHECK(++reminders[{study::format_date(e.cycle_date), e.template_id}] == 1);
          }
        }
        rt.commit("p", std::move(*r));
        const auto& m = rt.instance("p");
        REQUIRE(def.find_state(m.current_state));
        for (const auto& p : m.pending_timers) {
          const auto* timer = def.find_timer(p.name);
          REQUIRE(timer);
          CHECK(std::count(timer->active_in.begin(), timer->active_in.end(), m.current_state) == 1);
        }
        CHECK(m.successes <= m.cycles_enrolled);
      }
    }
  }
}
