#include "smartstate/clock_time.h"

#include <cstdio>

namespace smartstate {

std::string format_hhmm(ClockTime t) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "%02d:%02d", t.hour, t.minute);
  return buf;
}

std::string format_12h(ClockTime t) {
  int h = t.hour % 12;
  if (h == 0) h = 12;
  char buf[16];
  std::snprintf(buf, sizeof buf, "%d:%02d %s", h, t.minute, t.hour < 12 ? "AM" : "PM");
  return buf;
}

std::optional<ClockTime> parse_hhmm(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos || colon == 0 || colon > 2 || text.size() != colon + 3) {
    return std::nullopt;
  }
  int h = 0;
  for (std::size_t i = 0; i < colon; ++i) {
    if (text[i] < '0' || text[i] > '9') return std::nullopt;
    h = h * 10 + (text[i] - '0');
  }
  int m = 0;
  for (std::size_t i = colon + 1; i < text.size(); ++i) {
    if (text[i] < '0' || text[i] > '9') return std::nullopt;
    m = m * 10 + (text[i] - '0');
  }
  ClockTime t{h, m};
  if (!t.valid()) return std::nullopt;
  return t;
}

}  // namespace smartstate
