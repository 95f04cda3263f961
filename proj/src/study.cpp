#include "smartstate/study.h"

#include <algorithm>
#include <cstdio>
#include <random>

#include "smartstate/error.h"
#include "smartstate/hash.h"

namespace smartstate::study {

namespace {

constexpr int kMinWindowMinutes = 9 * 60;
constexpr int kMaxWindowMinutes = 11 * 60;

int to_minutes(absl::Duration d) { return static_cast<int>(absl::ToInt64Minutes(d)); }

}  // namespace

void StudyConfig::finalize() {
  if (!absl::LoadTimeZone(timezone_name, &timezone)) {
    throw Error("BAD_CONFIG", "unknown time zone '" + timezone_name + "'");
  }
  if (window_tolerance < absl::ZeroDuration() || window_target - window_tolerance <= absl::ZeroDuration()) {
    throw Error("BAD_CONFIG", "window target minus tolerance must stay positive");
  }
  if (!latest_end.valid() || !cycle_start.valid() || !(cycle_start < latest_end)) {
    throw Error("BAD_CONFIG", "cycle_start must precede latest_end within a day");
  }
  if (baseline_days < 0) throw Error("BAD_CONFIG", "baseline_days must be non-negative");
}

CycleDate cycle_of(absl::Time instant, const StudyConfig& config) {
  const absl::CivilMinute local(absl::ToCivilMinute(instant, config.timezone));
  const int minute_of_day = local.hour() * 60 + local.minute();
  const CycleDate day(local);
  return minute_of_day >= config.cycle_start.minutes() ? day : day - 1;
}

absl::Time local_instant(absl::CivilDay date, ClockTime t, const StudyConfig& config) {
  const absl::CivilSecond wall(date.year(), date.month(), date.day(), t.hour, t.minute, 0);
  const auto info = config.timezone.At(wall);
  switch (info.kind) {
    case absl::TimeZone::TimeInfo::UNIQUE:
      return info.pre;
    case absl::TimeZone::TimeInfo::SKIPPED:
      return info.trans;
    case absl::TimeZone::TimeInfo::REPEATED:
      return std::min(info.pre, info.post);
  }
  return info.pre;
}

absl::Time cycle_start_instant(CycleDate date, const StudyConfig& config) {
  return local_instant(date, config.cycle_start, config);
}

int cycle_offset(ClockTime t, const StudyConfig& config) {
  return ((t.minutes() - config.cycle_start.minutes()) % kMinutesPerDay + kMinutesPerDay) % kMinutesPerDay;
}

EatingWindow compute_window(ClockTime start, const StudyConfig& config) {
  const int begin = cycle_offset(start, config);
  const int latest_end = cycle_offset(config.latest_end, config);
  if (begin >= latest_end) {
    throw Error("START_TOO_LATE", "start " + format_hhmm(start) + " is at or after " + format_hhmm(config.latest_end));
  }
  const int target = to_minutes(config.window_target);
  const int tolerance = to_minutes(config.window_tolerance);
  const int earliest_ok = begin + target - tolerance;
  const int latest_ok = std::min(begin + target + tolerance, latest_end - 1);
  if (earliest_ok > latest_ok) {
    throw Error("WINDOW_INFEASIBLE", "no acceptable eating window starting at " + format_hhmm(start) +
                                         " ends before " + format_hhmm(config.latest_end));
  }
  const int target_end = std::min(begin + target, latest_ok);
  const int base = config.cycle_start.minutes();
  return EatingWindow{start, ClockTime::from_minutes(base + target_end), ClockTime::from_minutes(base + earliest_ok),
                      ClockTime::from_minutes(base + latest_ok)};
}

int window_minutes(ClockTime start, ClockTime end, const StudyConfig& config) {
  return cycle_offset(end, config) - cycle_offset(start, config);
}

FastOutcome evaluate_fast(ClockTime start, ClockTime end, const StudyConfig& config) {
  const int duration = window_minutes(start, end, config);
  if (duration <= 0) {
    throw Error("END_NOT_AFTER_START", "end " + format_hhmm(end) + " is not after start " + format_hhmm(start));
  }
  if (duration < kMinWindowMinutes) return FastOutcome::TooShort;
  if (duration > kMaxWindowMinutes) return FastOutcome::TooLong;
  if (cycle_offset(end, config) >= cycle_offset(config.latest_end, config)) return FastOutcome::LateEnd;
  return FastOutcome::Success;
}

FastRecord make_fast_record(std::string participant_id, CycleDate date, std::optional<ClockTime> start,
                            std::optional<ClockTime> end, const StudyConfig& config) {
  FastRecord r;
  r.participant_id = std::move(participant_id);
  r.cycle_date = date;
  r.start = start;
  r.end = end;
  if (start && end) {
    r.duration_minutes = window_minutes(*start, *end, config);
    r.outcome = evaluate_fast(*start, *end, config);
  }
  return r;
}

double success_rate(int successes, int days_enrolled) {
  if (days_enrolled <= 0) return 1.0;
  return static_cast<double>(successes) / days_enrolled;
}

double success_rate(std::span<const FastRecord> records, int days_enrolled) {
  if (days_enrolled <= 0) return 1.0;
  std::vector<CycleDate> dates;
  for (const auto& r : records) dates.push_back(r.cycle_date);
  std::sort(dates.begin(), dates.end());
  dates.erase(std::unique(dates.begin(), dates.end()), dates.end());
  if (static_cast<int>(dates.size()) > days_enrolled) {
    throw std::invalid_argument("days_enrolled is smaller than the number of reported cycles");
  }
  const auto successes =
      std::count_if(records.begin(), records.end(), [](const FastRecord& r) { return r.outcome == FastOutcome::Success; });
  return success_rate(static_cast<int>(successes), days_enrolled);
}

std::string ErrorRate::percent() const {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f%%", fraction * 100.0);
  return buf;
}

ErrorRate error_rate(std::int64_t unrecognized_inbound, std::int64_t outgoing_total) {
  if (outgoing_total <= 0) return {0.0, false};
  return {static_cast<double>(unrecognized_inbound) / static_cast<double>(outgoing_total), true};
}

ErrorRate inbound_error_rate(std::int64_t unrecognized_inbound, std::int64_t inbound_total) {
  return error_rate(unrecognized_inbound, inbound_total);
}

std::string draw_group(std::string_view participant_id, std::uint64_t seed) {
  const std::uint64_t key = fnv1a64(participant_id);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)};
  std::mt19937_64 rng(seq);
  return (rng() >> 63) == 0 ? std::string(kControlGroup) : std::string(kRestrictedGroup);
}

GroupAssignment randomize_group(const GroupAssignment& current, CycleDate today, const StudyConfig& config,
                                std::uint64_t seed, const std::string& actor, bool force) {
  if (current.group_id != kBaselineGroup) {
    throw Error("GROUP_PRECONDITION",
                "participant " + current.participant_id + " is in '" + current.group_id + "', not baseline");
  }
  const auto elapsed = today - current.effective_from;
  if (elapsed < config.baseline_days && !force) {
    throw Error("BASELINE_INCOMPLETE", "baseline has run " + std::to_string(elapsed) + " of " +
                                           std::to_string(config.baseline_days) + " cycles");
  }
  GroupAssignment next;
  next.participant_id = current.participant_id;
  next.group_id = draw_group(current.participant_id, seed);
  next.effective_from = today;
  next.assigned_by = actor;
  next.forced = force && elapsed < config.baseline_days;
  return next;
}

std::string feedback_for(FastOutcome outcome, protocol::FeedbackMode mode) {
  if (mode == protocol::FeedbackMode::Neutral) return std::string(protocol::kNeutralAckTemplate);
  switch (outcome) {
    case FastOutcome::Success: return "good_window";
    case FastOutcome::TooShort: return "too_short_info";
    case FastOutcome::TooLong: return "too_long_info";
    case FastOutcome::LateEnd: return "late_end_info";
    case FastOutcome::Incomplete: break;
  }
  return std::string(protocol::kNeutralAckTemplate);
}

const char* to_string(FastOutcome outcome) {
  switch (outcome) {
    case FastOutcome::Success: return "success";
    case FastOutcome::TooShort: return "too_short";
    case FastOutcome::TooLong: return "too_long";
    case FastOutcome::LateEnd: return "late_end";
    case FastOutcome::Incomplete: return "incomplete";
  }
  return "incomplete";
}

std::optional<FastOutcome> parse_outcome(std::string_view text) {
  for (auto o : {FastOutcome::Success, FastOutcome::TooShort, FastOutcome::TooLong, FastOutcome::LateEnd,
                 FastOutcome::Incomplete}) {
    if (text == to_string(o)) return o;
  }
  return std::nullopt;
}

std::string format_date(CycleDate date) { return absl::FormatCivilTime(date); }

std::optional<CycleDate> parse_date(std::string_view text) {
  CycleDate d;
  if (!absl::ParseCivilTime(std::string(text), &d)) return std::nullopt;
  return d;
}

std::string format_duration(int minutes) {
  const int h = minutes / 60;
  const int m = minutes % 60;
  std::string out = std::to_string(h) + (h == 1 ? " hour" : " hours");
  if (m) out += " " + std::to_string(m) + (m == 1 ? " minute" : " minutes");
  return out;
}

}  // namespace smartstate::study
