#include "smartstate/simulate.h"

#include <algorithm>
#include <cstdio>
#include <random>
#include <set>

#include "smartstate/error.h"
#include "smartstate/export.h"
#include "smartstate/provider.h"
#include "smartstate/service.h"

namespace smartstate::simulate {

namespace {

using nlohmann::json;

[[noreturn]] void bad(const std::string& what) { throw Error("BAD_SCENARIO", what); }

double probability(const json& j, const char* key, double fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_number()) bad(std::string(key) + " must be a number");
  const double p = j.at(key).get<double>();
  if (p < 0.0 || p > 1.0) bad(std::string(key) + " must be within [0, 1]");
  return p;
}

// Portable draws: the standard distributions differ between library vendors.
double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
int between(std::mt19937_64& rng, int lo, int hi) {  // inclusive
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

std::string spoken_time(int minute_of_day, bool with_marker, bool compact) {
  const int h24 = minute_of_day / 60;
  const int m = minute_of_day % 60;
  const int h12 = h24 % 12 == 0 ? 12 : h24 % 12;
  char buf[32];
  if (m == 0 && compact) {
    std::snprintf(buf, sizeof buf, "%d", h12);
  } else {
    std::snprintf(buf, sizeof buf, "%d:%02d", h12, m);
  }
  std::string out = buf;
  if (with_marker) out += compact ? (h24 < 12 ? "am" : "pm") : (h24 < 12 ? " am" : " pm");
  return out;
}

struct Planned {
  int offset = 0;  // minutes since the start of the simulation
  std::string handle;
  std::string body;
};

struct Enrolled {
  std::string participant_id;
  std::string handle;
  const CohortSpec* cohort = nullptr;
  std::mt19937_64 rng;
};

// One report message, preceded by an ambiguous attempt when drawn.
void plan_report(std::vector<Planned>& out, Enrolled& p, const char* keyword, int day_offset, int minute_of_day) {
  const int sent = std::min(minute_of_day + between(p.rng, 0, 20), 27 * 60 + 50);
  const int at = day_offset + (sent - 4 * 60);
  const bool compact = unit(p.rng) < 0.5;
  if (unit(p.rng) < p.cohort->ambiguity && minute_of_day / 60 % 12 != 0) {
    out.push_back({at, p.handle, std::string(keyword) + " " + spoken_time(minute_of_day, false, compact)});
    out.push_back({at + 3, p.handle, std::string(keyword) + " " + spoken_time(minute_of_day, true, compact)});
  } else {
    out.push_back({at, p.handle, std::string(keyword) + " " + spoken_time(minute_of_day, true, compact)});
  }
}

void plan_day(std::vector<Planned>& out, Enrolled& p, int day, const study::StudyConfig& config) {
  const int day_offset = day * 1440;
  const auto& c = *p.cohort;
  if (unit(p.rng) < c.unknown) {
    static const char* kChatter[] = {"hello?", "what do I send", "ok thanks", "STOP", "startcal", "i ate at noon"};
    out.push_back({day_offset + between(p.rng, 4 * 60, 18 * 60), p.handle, kChatter[between(p.rng, 0, 5)]});
  }
  if (unit(p.rng) < c.silence) return;

  const int latest = config.latest_end.minutes();
  const int target = static_cast<int>(absl::ToInt64Minutes(config.window_target));
  const int tol = static_cast<int>(absl::ToInt64Minutes(config.window_tolerance));
  int start = 0;
  int end = 0;
  if (unit(p.rng) < c.compliance) {
    start = between(p.rng, 6 * 60 + 30, 10 * 60);
    const int lo = target - tol + 5;
    const int hi = std::min(target + tol - 5, latest - 5 - start);
    end = start + between(p.rng, lo, std::max(lo, hi));
  } else {
    start = between(p.rng, 6 * 60, 12 * 60);
    switch (between(p.rng, 0, 2)) {
      case 0:
        end = start + between(p.rng, 4 * 60, target - tol - 10);
        break;
      case 1:
        end = start + between(p.rng, target + tol + 10, 14 * 60);
        break;
      default:
        end = between(p.rng, latest + 5, 23 * 60);
        break;
    }
    end = std::min(end, 23 * 60 + 30);
  }
  plan_report(out, p, "startcal", day_offset, start);
  plan_report(out, p, "endcal", day_offset, end);
}

}  // namespace

Scenario parse_scenario(const json& j) {
  if (!j.is_object()) bad("scenario must be a JSON object");
  Scenario s;
  try {
    if (j.contains("start_date")) {
      auto d = study::parse_date(j.at("start_date").get<std::string>());
      if (!d) bad("start_date must be YYYY-MM-DD");
      s.start_date = *d;
    }
    s.days = j.value("days", s.days);
    s.seed = j.value("seed", s.seed);
    s.randomize_after_baseline = j.value("randomize_after_baseline", s.randomize_after_baseline);
    if (!j.contains("cohorts") || !j.at("cohorts").is_array() || j.at("cohorts").empty()) {
      bad("cohorts must be a non-empty array");
    }
    std::set<std::string> names;
    for (const auto& cj : j.at("cohorts")) {
      CohortSpec c;
      c.name = cj.value("name", "cohort" + std::to_string(s.cohorts.size() + 1));
      if (!names.insert(c.name).second) bad("duplicate cohort name " + c.name);
      c.count = cj.value("count", 1);
      c.group = cj.value("group", c.group);
      c.compliance = probability(cj, "compliance", c.compliance);
      c.ambiguity = probability(cj, "ambiguity", c.ambiguity);
      c.silence = probability(cj, "silence", c.silence);
      c.unknown = probability(cj, "unknown", c.unknown);
      if (c.count < 0 || c.count > 10000) bad("cohort count must be within [0, 10000]");
      s.cohorts.push_back(std::move(c));
    }
  } catch (const json::exception& e) {
    bad(e.what());
  }
  if (s.days < 1 || s.days > 3660) bad("days must be within [1, 3660]");
  return s;
}

json to_json(const Scenario& s) {
  json cohorts = json::array();
  for (const auto& c : s.cohorts) {
    cohorts.push_back({{"name", c.name},
                       {"count", c.count},
                       {"group", c.group},
                       {"compliance", c.compliance},
                       {"ambiguity", c.ambiguity},
                       {"silence", c.silence},
                       {"unknown", c.unknown}});
  }
  return {{"start_date", study::format_date(s.start_date)},
          {"days", s.days},
          {"seed", s.seed},
          {"randomize_after_baseline", s.randomize_after_baseline},
          {"cohorts", cohorts}};
}

double SimulationReport::pooled_success_rate() const { return study::success_rate(static_cast<int>(successes), static_cast<int>(days_enrolled)); }

double SimulationReport::mean_success_rate() const {
  if (participants.empty()) return 1.0;
  double sum = 0.0;
  for (const auto& p : participants) sum += study::success_rate(p.successes, p.days_enrolled);
  return sum / static_cast<double>(participants.size());
}

study::ErrorRate SimulationReport::error_rate() const { return study::error_rate(error_replies, outbound_total); }

json SimulationReport::to_json() const {
  const auto er = error_rate();
  json per = json::array();
  for (const auto& p : participants) {
    per.push_back({{"participant_id", p.participant_id},
                   {"cohort", p.cohort},
                   {"final_group", p.final_group},
                   {"days_enrolled", p.days_enrolled},
                   {"successes", p.successes},
                   {"success_rate", study::success_rate(p.successes, p.days_enrolled)},
                   {"inbound", p.inbound},
                   {"outbound", p.outbound},
                   {"error_replies", p.error_replies},
                   {"reminders", p.reminders}});
  }
  return {{"scenario", simulate::to_json(scenario)},
          {"success_rate", {{"pooled", pooled_success_rate()}, {"mean_per_participant", mean_success_rate()}}},
          {"error_rate",
           {{"fraction", er.fraction},
            {"defined", er.defined},
            {"percent", er.percent()},
            {"error_replies", error_replies},
            {"outbound", outbound_total}}},
          {"messages",
           {{"inbound", inbound_total},
            {"outbound", outbound_total},
            {"unrecognized_inbound", unrecognized_inbound},
            {"outbound_by_template", outbound_by_template}}},
          {"reminders", {{"startcal", startcal_reminders}, {"endcal", endcal_reminders}}},
          {"fasts", {{"recorded", fasts_recorded}, {"successes", successes}, {"days_enrolled", days_enrolled}}},
          {"transitions", transitions},
          {"faults", faults},
          {"participants", per}};
}

std::string SimulationReport::to_csv() const {
  std::string out = exporter::csv_row({"participant_id", "cohort", "final_group", "days_enrolled", "successes",
                                       "success_rate", "inbound", "outbound", "error_replies", "reminders"});
  for (const auto& p : participants) {
    char rate[32];
    std::snprintf(rate, sizeof rate, "%.4f", study::success_rate(p.successes, p.days_enrolled));
    out += exporter::csv_row({p.participant_id, p.cohort, p.final_group, std::to_string(p.days_enrolled),
                              std::to_string(p.successes), rate, std::to_string(p.inbound), std::to_string(p.outbound),
                              std::to_string(p.error_replies), std::to_string(p.reminders)});
  }
  return out;
}

SimulationReport run_simulation(const config::StudyDescriptor& study, const Scenario& scenario,
                                const SimOptions& options) {
  gateway::SimProvider provider;
  service::ServiceOptions so;
  so.data_dir = options.work_dir;
  so.durability = store::Durability::Fast;
  so.crash = options.crash;
  so.sleep = [](std::chrono::milliseconds) {};
  std::filesystem::remove_all(options.work_dir / study.study_id);
  service::StudyService svc(study, provider, so);

  const auto& config = study.config;
  const absl::Time t0 = study::local_instant(scenario.start_date, config.cycle_start, config);

  std::vector<Enrolled> people;
  std::map<std::string, std::string> cohort_of;
  int index = 0;
  for (const auto& c : scenario.cohorts) {
    for (int i = 0; i < c.count; ++i, ++index) {
      char handle[32];
      std::snprintf(handle, sizeof handle, "+1555%07d", index + 1);
      const auto p = svc.create_participant(handle, c.group, "simulator", t0);
      std::seed_seq seq{static_cast<std::uint32_t>(scenario.seed), static_cast<std::uint32_t>(scenario.seed >> 32),
                        static_cast<std::uint32_t>(index)};
      people.push_back({p.participant_id, handle, &c, std::mt19937_64(seq)});
      cohort_of[p.participant_id] = c.name;
    }
  }

  std::set<std::string> awaiting_randomization;
  if (scenario.randomize_after_baseline) {
    for (const auto& p : people) {
      if (p.cohort->group == study::kBaselineGroup) awaiting_randomization.insert(p.participant_id);
    }
  }

  std::vector<Planned> plan;
  std::size_t next = 0;
  std::uint64_t sid = 0;
  const int total = scenario.days * 1440;
  for (int minute = 0; minute < total; ++minute) {
    const absl::Time now = t0 + absl::Minutes(minute);
    if (minute % 1440 == 0) {
      plan.erase(plan.begin(), plan.begin() + static_cast<std::ptrdiff_t>(next));
      next = 0;
      for (auto& p : people) plan_day(plan, p, minute / 1440, config);
      std::stable_sort(plan.begin(), plan.end(), [](const Planned& a, const Planned& b) { return a.offset < b.offset; });
    }
    while (next < plan.size() && plan[next].offset <= minute) {
      const auto& m = plan[next++];
      char buf[32];
      std::snprintf(buf, sizeof buf, "SIM%010llu", static_cast<unsigned long long>(++sid));
      svc.handle_inbound(m.handle, m.body, buf, now);
    }
    svc.step(now);
    if (!awaiting_randomization.empty() && minute % 1440 == 5) {
      for (auto it = awaiting_randomization.begin(); it != awaiting_randomization.end();) {
        try {
          svc.reassign(*it, "", "simulator", now, true);
          it = awaiting_randomization.erase(it);
        } catch (const Error& e) {
          if (e.code() != "BASELINE_INCOMPLETE" && e.code() != "PENDING_FLUSH") throw;
          ++it;
        }
      }
    }
  }
  const absl::Time end = t0 + absl::Minutes(total);
  svc.step(end);

  SimulationReport r;
  r.scenario = scenario;
  const auto& store = svc.store();
  std::map<std::string, ParticipantSummary> per;
  for (const auto& v : svc.participants()) {
    auto& s = per[v.participant.participant_id];
    s.participant_id = v.participant.participant_id;
    s.cohort = cohort_of[s.participant_id];
    s.final_group = v.participant.group_id;
    s.days_enrolled = scenario.days;
  }
  for (const auto& f : store.fasts()) {
    ++r.fasts_recorded;
    if (f.outcome == study::FastOutcome::Success) ++per[f.participant_id].successes;
  }
  for (const auto& m : store.messages()) {
    auto& s = per[m.participant_id];
    if (m.direction == "in") {
      ++r.inbound_total;
      ++s.inbound;
      if (m.intent != intake::to_string(intake::IntentKind::StartCal) &&
          m.intent != intake::to_string(intake::IntentKind::EndCal)) {
        ++r.unrecognized_inbound;
      }
      continue;
    }
    ++r.outbound_total;
    ++s.outbound;
    ++r.outbound_by_template[m.template_id];
    if (m.reply_class == runtime::to_string(runtime::ReplyClass::Error)) {
      ++r.error_replies;
      ++s.error_replies;
    }
    if (m.reply_class == runtime::to_string(runtime::ReplyClass::Reminder)) {
      ++s.reminders;
      if (m.template_id.rfind("startcal", 0) == 0) ++r.startcal_reminders;
      if (m.template_id.rfind("endcal", 0) == 0) ++r.endcal_reminders;
    }
  }
  for (auto& [_, s] : per) {
    r.successes += s.successes;
    r.days_enrolled += s.days_enrolled;
    r.participants.push_back(s);
  }
  r.transitions = store.count_audit(store::audit_kind::kTransition);
  r.faults = store.count_audit(store::audit_kind::kFault);
  return r;
}

}  // namespace smartstate::simulate
