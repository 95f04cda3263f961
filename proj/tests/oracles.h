#pragma once

// Independent re-derivations used as test oracles. Nothing here calls the
// library's domain math.

#include <string>

namespace oracles {

// Outcome label for a window in one cycle, given minute-of-day times and a
// cycle that begins at `cycle_start` minutes past midnight. Returns "" when
// end is not after start.
inline std::string fast_outcome(int start_mod, int end_mod, int cycle_start = 240, int latest_end = 1200) {
  auto in_cycle = [&](int m) { return m >= cycle_start ? m - cycle_start : m + 1440 - cycle_start; };
  const int s = in_cycle(start_mod);
  const int e = in_cycle(end_mod);
  if (e <= s) return "";
  const int hours_x60 = e - s;
  const bool long_enough = hours_x60 >= 9 * 60;
  const bool short_enough = hours_x60 <= 11 * 60;
  const bool before_cutoff = e < in_cycle(latest_end);
  if (!long_enough) return "too_short";
  if (!short_enough) return "too_long";
  if (!before_cutoff) return "late_end";
  return "success";
}

// Errors over outgoing messages, formatted to one decimal percent with
// integer arithmetic (round half up).
inline std::string percent_1dp(long long num, long long den) {
  const long long tenths_x2 = (num * 2000) / den;
  const long long tenths = (tenths_x2 + 1) / 2;
  return std::to_string(tenths / 10) + "." + std::to_string(tenths % 10) + "%";
}

}  // namespace oracles
