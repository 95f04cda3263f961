#pragma once

// Seeded discrete-event simulation of a cohort of participants texting the
// engine through the simulated provider, one simulated minute at a time.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "smartstate/config.h"
#include "smartstate/gateway.h"
#include "smartstate/study.h"

namespace smartstate::simulate {

struct CohortSpec {
  std::string name;
  int count = 1;
  std::string group = "baseline";
  double compliance = 1.0;  // probability a day's window meets the rules
  double ambiguity = 0.0;   // probability a report first omits am/pm
  double silence = 0.0;     // probability of no reports in a day
  double unknown = 0.0;     // probability of an extra off-topic message
};

struct Scenario {
  study::CycleDate start_date = absl::CivilDay(2021, 9, 9);
  int days = 30;
  std::uint64_t seed = 1;
  bool randomize_after_baseline = false;
  std::vector<CohortSpec> cohorts;
};

// Throws Error("BAD_SCENARIO").
Scenario parse_scenario(const nlohmann::json& j);
nlohmann::json to_json(const Scenario& s);

struct ParticipantSummary {
  std::string participant_id;
  std::string cohort;
  std::string final_group;
  int days_enrolled = 0;
  int successes = 0;
  int inbound = 0;
  int outbound = 0;
  int error_replies = 0;
  int reminders = 0;
};

struct SimulationReport {
  Scenario scenario;
  std::vector<ParticipantSummary> participants;
  std::int64_t inbound_total = 0;
  std::int64_t outbound_total = 0;
  std::int64_t error_replies = 0;
  std::int64_t unrecognized_inbound = 0;
  std::map<std::string, std::int64_t> outbound_by_template;
  std::int64_t startcal_reminders = 0;
  std::int64_t endcal_reminders = 0;
  std::int64_t transitions = 0;
  std::int64_t faults = 0;
  std::int64_t fasts_recorded = 0;
  std::int64_t successes = 0;
  std::int64_t days_enrolled = 0;

  double pooled_success_rate() const;
  double mean_success_rate() const;
  // Error-class replies over delivered outbound messages.
  study::ErrorRate error_rate() const;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

struct SimOptions {
  std::filesystem::path work_dir;  // the study store is written under this directory
  gateway::CrashHook crash;        // forwarded to the service; tests only
};

// Runs the scenario against a fresh store in `options.work_dir`.
SimulationReport run_simulation(const config::StudyDescriptor& study, const Scenario& scenario,
                                const SimOptions& options);

}  // namespace smartstate::simulate
