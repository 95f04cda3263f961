#pragma once

// Time-restricted-eating domain rules: cycle boundaries, eating windows,
// fast outcomes, adherence metrics and group randomization.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <absl/time/civil_time.h>
#include <absl/time/time.h>

#include "smartstate/clock_time.h"
#include "smartstate/protocol.h"

namespace smartstate::study {

using CycleDate = absl::CivilDay;

inline constexpr std::string_view kBaselineGroup = "baseline";
inline constexpr std::string_view kControlGroup = "control";
inline constexpr std::string_view kRestrictedGroup = "restricted";

struct GroupProtocol {
  std::string group_id;
  std::string protocol_id;
};

struct StudyConfig {
  std::string study_id;
  std::string timezone_name = "UTC";
  absl::TimeZone timezone = absl::UTCTimeZone();
  std::vector<GroupProtocol> groups;
  int baseline_days = 14;
  absl::Duration window_target = absl::Hours(10);
  absl::Duration window_tolerance = absl::Hours(1);
  ClockTime latest_end{20, 0};
  ClockTime cycle_start{4, 0};

  // Loads `timezone_name` and checks the invariants; throws Error("BAD_CONFIG").
  void finalize();
};

// Study-local date of the cycle containing `instant`. Times before
// cycle_start belong to the previous date's cycle.
CycleDate cycle_of(absl::Time instant, const StudyConfig& config);

// UTC instant of local wall time `t` on `date`. Skipped wall times resolve to
// the transition instant, repeated ones to the earlier of the two instants.
absl::Time local_instant(absl::CivilDay date, ClockTime t, const StudyConfig& config);

// First instant of the cycle labelled `date`.
absl::Time cycle_start_instant(CycleDate date, const StudyConfig& config);

// Minutes since cycle_start, in [0, 1440). Orders times within one cycle.
int cycle_offset(ClockTime t, const StudyConfig& config);

struct EatingWindow {
  ClockTime start;
  ClockTime target_end;
  ClockTime earliest_ok;
  ClockTime latest_ok;

  friend bool operator==(const EatingWindow&, const EatingWindow&) = default;
};

// Throws Error("START_TOO_LATE") when start is at/after latest_end and
// Error("WINDOW_INFEASIBLE") when even the shortest acceptable window would
// end at/after latest_end.
EatingWindow compute_window(ClockTime start, const StudyConfig& config);

enum class FastOutcome { Success, TooShort, TooLong, LateEnd, Incomplete };

// Throws Error("END_NOT_AFTER_START") when end is not after start within the cycle.
FastOutcome evaluate_fast(ClockTime start, ClockTime end, const StudyConfig& config);

// Eating-window length in minutes, measured within one cycle.
int window_minutes(ClockTime start, ClockTime end, const StudyConfig& config);

struct FastRecord {
  std::string participant_id;
  CycleDate cycle_date;
  std::optional<ClockTime> start;
  std::optional<ClockTime> end;
  std::optional<int> duration_minutes;
  FastOutcome outcome = FastOutcome::Incomplete;
  std::string group_id;

  friend bool operator==(const FastRecord&, const FastRecord&) = default;
};

// Builds a record whose outcome/duration follow from the times present.
FastRecord make_fast_record(std::string participant_id, CycleDate date, std::optional<ClockTime> start,
                            std::optional<ClockTime> end, const StudyConfig& config);

// Successful fasts over enrolled days; 1.0 when nothing is enrolled yet.
double success_rate(std::span<const FastRecord> records, int days_enrolled);
double success_rate(int successes, int days_enrolled);

struct ErrorRate {
  double fraction = 0.0;
  bool defined = true;  // false when there were no outgoing messages

  // One-decimal percentage, e.g. "9.8%".
  std::string percent() const;
};

// Unrecognized inbound messages over total outgoing messages.
ErrorRate error_rate(std::int64_t unrecognized_inbound, std::int64_t outgoing_total);

// Same numerator over inbound messages; not the headline metric.
ErrorRate inbound_error_rate(std::int64_t unrecognized_inbound, std::int64_t inbound_total);

struct GroupAssignment {
  std::string participant_id;
  std::string group_id;
  CycleDate effective_from;
  std::string assigned_by;
  bool forced = false;
};

// Pure 50/50 draw keyed by (seed, participant_id): "control" or "restricted".
std::string draw_group(std::string_view participant_id, std::uint64_t seed);

// Randomizes a participant out of baseline. Throws Error("GROUP_PRECONDITION")
// when not currently in baseline and Error("BASELINE_INCOMPLETE") when fewer
// than baseline_days cycles have passed, unless `force` is set.
GroupAssignment randomize_group(const GroupAssignment& current, CycleDate today, const StudyConfig& config,
                                std::uint64_t seed, const std::string& actor, bool force = false);

std::string feedback_for(FastOutcome outcome, protocol::FeedbackMode mode);

const char* to_string(FastOutcome outcome);
std::optional<FastOutcome> parse_outcome(std::string_view text);

std::string format_date(CycleDate date);
std::optional<CycleDate> parse_date(std::string_view text);

// "9 hours 30 minutes"
std::string format_duration(int minutes);

}  // namespace smartstate::study
