#include <doctest.h>

#include "scenario_harness.h"
#include "sim_checks.h"
#include "smartstate/error.h"
#include "smartstate/simulate.h"
#include "temp_dir.h"

using namespace smartstate;
using testing_support::TempDir;

namespace {

simulate::Scenario small_scenario(std::uint64_t seed, int days = 6) {
  simulate::Scenario s;
  s.days = days;
  s.seed = seed;
  s.cohorts.push_back({"steady", 4, "restricted", 0.85, 0.15, 0.05, 0.1});
  s.cohorts.push_back({"erratic", 3, "control", 0.5, 0.3, 0.2, 0.3});
  return s;
}

std::vector<store::AuditRecord> stored_audit(const std::filesystem::path& work, const std::string& study) {
  store::Store s(work / study / "store.db", study);
  return s.query_audit();
}

}  // namespace

TEST_CASE("same seed gives byte-identical reports") {
  const auto study = scenario::tre_study();
  TempDir a, b;
  const auto sc = small_scenario(7);
  const auto r1 = simulate::run_simulation(study, sc, {a.path(), {}});
  const auto r2 = simulate::run_simulation(study, sc, {b.path(), {}});
  CHECK(r1.to_json().dump(2) == r2.to_json().dump(2));
  CHECK(r1.to_csv() == r2.to_csv());
  CHECK(r1.participants.size() == 7);
  CHECK(r1.inbound_total > 0);

  // Re-running in the same work directory starts from a fresh store.
  const auto r3 = simulate::run_simulation(study, sc, {a.path(), {}});
  CHECK(r3.to_csv() == r1.to_csv());

  TempDir c;
  const auto other = simulate::run_simulation(study, small_scenario(8), {c.path(), {}});
  CHECK(other.to_csv() != r1.to_csv());
}

TEST_CASE("reported error rate matches a recount over the audit log") {
  const auto study = scenario::tre_study();
  TempDir dir;
  const auto r = simulate::run_simulation(study, small_scenario(11), {dir.path(), {}});
  const auto [errors, total] = sim_checks::recount_errors(stored_audit(dir.path(), study.study_id));
  CHECK(total == r.outbound_total);
  CHECK(errors == r.error_replies);
  CHECK(errors > 0);
  CHECK(r.error_rate().percent() == study::error_rate(errors, total).percent());
  CHECK(r.to_json()["error_rate"]["percent"] == r.error_rate().percent());
}

TEST_CASE("a fully compliant cohort succeeds every day without errors") {
  const auto study = scenario::tre_study();
  TempDir dir;
  simulate::Scenario sc;
  sc.days = 5;
  sc.seed = 3;
  sc.cohorts.push_back({"ideal", 3, "restricted", 1.0, 0.0, 0.0, 0.0});
  const auto r = simulate::run_simulation(study, sc, {dir.path(), {}});
  CHECK(r.pooled_success_rate() == 1.0);
  CHECK(r.mean_success_rate() == 1.0);
  CHECK(r.error_replies == 0);
  CHECK(r.error_rate().fraction == 0.0);
  CHECK(r.startcal_reminders == 0);
  CHECK(r.endcal_reminders == 0);
  CHECK(r.fasts_recorded == 15);
  CHECK(r.faults == 0);
  CHECK(r.outbound_total == 2 * 15);  // window plus feedback each day
}

TEST_CASE("a silent cohort gets exactly one start reminder per cycle") {
  const auto study = scenario::tre_study();
  TempDir dir;
  simulate::Scenario sc;
  sc.days = 4;
  sc.cohorts.push_back({"quiet", 2, "control", 1.0, 0.0, 1.0, 0.0});
  const auto r = simulate::run_simulation(study, sc, {dir.path(), {}});
  CHECK(r.inbound_total == 0);
  CHECK(r.startcal_reminders == 8);
  CHECK(r.endcal_reminders == 0);
  CHECK(r.pooled_success_rate() == 0.0);
}

TEST_CASE("simulated audit replays legally through randomization") {
  const auto study = scenario::tre_study();
  TempDir dir;
  simulate::Scenario sc;
  sc.days = 17;
  sc.seed = 5;
  sc.randomize_after_baseline = true;
  sc.cohorts.push_back({"baseline", 6, "baseline", 0.8, 0.15, 0.1, 0.15});
  const auto r = simulate::run_simulation(study, sc, {dir.path(), {}});
  const auto audit = stored_audit(dir.path(), study.study_id);
  CHECK(scenario::gap_free(audit));

  const auto replay = sim_checks::replay_transitions(study, audit);
  CHECK(replay.violations.empty());
  CHECK(replay.transitions > 100);
  CHECK(replay.reassignments == 6);
  for (const auto& p : r.participants) CHECK(p.final_group != "baseline");

  const auto cadence = sim_checks::check_cadence(study, audit);
  CHECK(cadence.violations.empty());
  CHECK(cadence.max_outbound_per_cycle >= 3);

  // Every outbound message has exactly one MSG_OUT record and a distinct key.
  store::Store s(dir.path() / study.study_id / "store.db", study.study_id);
  std::set<std::string> keys;
  int out = 0;
  for (const auto& m : s.messages()) {
    if (m.direction != "out") continue;
    ++out;
    keys.insert(m.idempotency_key);
  }
  CHECK(out == s.count_audit("MSG_OUT"));
  CHECK(keys.size() == static_cast<std::size_t>(out));
  CHECK(out == r.outbound_total);
}

TEST_CASE("the replay catches a forged transition") {
  const auto study = scenario::tre_study();
  std::vector<store::AuditRecord> audit(2);
  audit[0].seq = 1;
  audit[0].kind = "CONFIG_CHANGE";
  audit[0].participant_id = "tre-001";
  audit[0].payload = {{"action", "create_participant"}, {"group", "control"}};
  audit[1].seq = 2;
  audit[1].kind = "TRANSITION";
  audit[1].participant_id = "tre-001";
  audit[1].payload = {{"from", "initial"}, {"event", "endcal"}, {"to", "end_calories"}};
  CHECK(sim_checks::replay_transitions(study, audit).violations.size() == 1);
}

TEST_CASE("scenario files") {
  const auto j = nlohmann::json::parse(testing_support::read_file(testing_support::source_path("config/scenario.json")));
  const auto sc = simulate::parse_scenario(j);
  int n = 0;
  for (const auto& c : sc.cohorts) n += c.count;
  CHECK(n == 50);
  CHECK(sc.days == 30);
  CHECK(simulate::parse_scenario(simulate::to_json(sc)).cohorts.size() == sc.cohorts.size());

  auto bad = [](nlohmann::json j) {
    try {
      simulate::parse_scenario(j);
    } catch (const Error& e) {
      return e.code();
    }
    return std::string();
  };
  CHECK(bad({{"days", 0}, {"cohorts", {{{"count", 1}}}}}) == "BAD_SCENARIO");
  CHECK(bad({{"days", 3}, {"cohorts", nlohmann::json::array()}}) == "BAD_SCENARIO");
  CHECK(bad({{"days", 3}, {"cohorts", {{{"count", 1}, {"compliance", 1.5}}}}}) == "BAD_SCENARIO");
  CHECK(bad({{"days", 3}, {"start_date", "2021-13-01"}, {"cohorts", {{{"count", 1}}}}}) == "BAD_SCENARIO");
}
