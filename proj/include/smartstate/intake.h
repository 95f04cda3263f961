#pragma once

#include <string>
#include <string_view>

#include <absl/time/time.h>

#include "smartstate/clock_time.h"

namespace smartstate::intake {

inline constexpr std::size_t kMaxSanitizedLength = 512;

enum class Keyword { StartCal, EndCal };

enum class IntentKind { StartCal, EndCal, AmbiguousTime, InvalidTime, Unknown };

struct Intent {
  IntentKind kind = IntentKind::Unknown;
  Keyword keyword = Keyword::StartCal;  // meaningful unless Unknown
  ClockTime time;                       // meaningful for StartCal/EndCal
  bool extra_time_tokens = false;       // more than one time token followed the keyword

  static Intent unknown() { return {}; }
  friend bool operator==(const Intent&, const Intent&) = default;
};

struct InboundMessage {
  std::string sender_handle;
  std::string raw_body;
  absl::Time received_at;  // stamped on ingestion, never taken from the sender
  std::string study_id;
};

enum class TimeParseKind { Resolved, Ambiguous, Invalid };

struct TimeParse {
  TimeParseKind kind = TimeParseKind::Invalid;
  ClockTime time;
  bool extra_tokens = false;
};

// Printable-only, whitespace-collapsed, trimmed, ASCII-lowercased, at most
// 512 code points. Invalid UTF-8 is dropped. Idempotent.
std::string sanitize(std::string_view raw);

// Expects sanitized text.
Intent classify(std::string_view text);

// Finds the first parseable time token in `fragment`.
TimeParse parse_clock_time(std::string_view fragment);

const char* to_string(IntentKind kind);
const char* to_string(Keyword keyword);

// "startcal(07:00)", "ambiguous(startcal)", "unknown", ...
std::string describe(const Intent& intent);

}  // namespace smartstate::intake
