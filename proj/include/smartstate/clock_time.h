#pragma once

#include <compare>
#include <optional>
#include <string>
#include <string_view>

namespace smartstate {

inline constexpr int kMinutesPerDay = 24 * 60;

// Wall-clock time of day at minute resolution.
struct ClockTime {
  int hour = 0;
  int minute = 0;

  constexpr int minutes() const { return hour * 60 + minute; }

  static constexpr ClockTime from_minutes(int m) {
    m = ((m % kMinutesPerDay) + kMinutesPerDay) % kMinutesPerDay;
    return ClockTime{m / 60, m % 60};
  }

  constexpr bool valid() const { return hour >= 0 && hour <= 23 && minute >= 0 && minute <= 59; }

  friend constexpr auto operator<=>(const ClockTime&, const ClockTime&) = default;
};

// "07:05"
std::string format_hhmm(ClockTime t);
// "7:05 AM"
std::string format_12h(ClockTime t);
// Strict "HH:MM" / "H:MM" 24-hour parse; nullopt on anything else.
std::optional<ClockTime> parse_hhmm(std::string_view text);

}  // namespace smartstate
