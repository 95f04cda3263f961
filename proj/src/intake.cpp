#include "smartstate/intake.h"

#include <cstdint>
#include <optional>
#include <vector>

namespace smartstate::intake {

namespace {

// Decodes one UTF-8 sequence starting at `i`; returns nullopt (and advances by
// one byte) on malformed, overlong or surrogate encodings.
std::optional<char32_t> decode_utf8(std::string_view s, std::size_t& i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  if (b0 < 0x80) {
    ++i;
    return b0;
  }
  int len = 0;
  char32_t cp = 0;
  char32_t min = 0;
  if ((b0 & 0xE0) == 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
    min = 0x80;
  } else if ((b0 & 0xF0) == 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
    min = 0x800;
  } else if ((b0 & 0xF8) == 0xF0) {
    len = 4;
    cp = b0 & 0x07;
    min = 0x10000;
  } else {
    ++i;
    return std::nullopt;
  }
  if (i + len > s.size()) {
    ++i;
    return std::nullopt;
  }
  for (int k = 1; k < len; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xC0) != 0x80) {
      ++i;
      return std::nullopt;
    }
    cp = (cp << 6) | (b & 0x3F);
  }
  if (cp < min || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) {
    ++i;
    return std::nullopt;
  }
  i += len;
  return cp;
}

void encode_utf8(char32_t cp, std::string& out) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

bool is_space(char32_t cp) {
  return cp == ' ' || (cp >= 0x09 && cp <= 0x0D) || cp == 0x85 || cp == 0xA0 || cp == 0x1680 ||
         (cp >= 0x2000 && cp <= 0x200A) || cp == 0x2028 || cp == 0x2029 || cp == 0x202F || cp == 0x205F ||
         cp == 0x3000;
}

// Controls, zero-width/format characters, bidi overrides and noncharacters.
bool is_dropped(char32_t cp) {
  return cp < 0x20 || cp == 0x7F || (cp >= 0x80 && cp <= 0x9F) || (cp >= 0x200B && cp <= 0x200F) ||
         (cp >= 0x202A && cp <= 0x202E) || (cp >= 0x2060 && cp <= 0x206F) || cp == 0xFEFF ||
         (cp & 0xFFFE) == 0xFFFE;
}

bool is_letter_byte(char c) {
  const auto u = static_cast<unsigned char>(c);
  return (c >= 'a' && c <= 'z') || u >= 0x80;
}

bool is_digit(char c) { return c >= '0' && c <= '9'; }

// Positions where `word` occurs with no letter directly before or after.
std::vector<std::size_t> word_occurrences(std::string_view text, std::string_view word) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while ((pos = text.find(word, pos)) != std::string_view::npos) {
    const bool left_ok = pos == 0 || !is_letter_byte(text[pos - 1]);
    const std::size_t end = pos + word.size();
    const bool right_ok = end >= text.size() || !is_letter_byte(text[end]);
    if (left_ok && right_ok) out.push_back(pos);
    pos = end;
  }
  return out;
}

enum class Meridiem { None, Am, Pm };

struct TimeToken {
  int hour = 0;
  int minute = 0;
  bool digits_ok = true;
  Meridiem meridiem = Meridiem::None;
};

// Matches "am", "a.m", "a.m." (and p-variants) at `i` with no letter right
// after. Returns the length consumed or 0.
std::size_t match_meridiem(std::string_view s, std::size_t i, Meridiem& out) {
  if (i >= s.size() || (s[i] != 'a' && s[i] != 'p')) return 0;
  std::size_t j = i + 1;
  if (j < s.size() && s[j] == '.') ++j;
  if (j >= s.size() || s[j] != 'm') return 0;
  ++j;
  if (j < s.size() && s[j] == '.') ++j;
  if (j < s.size() && is_letter_byte(s[j])) return 0;
  out = s[i] == 'a' ? Meridiem::Am : Meridiem::Pm;
  return j - i;
}

std::vector<TimeToken> scan_time_tokens(std::string_view s) {
  std::vector<TimeToken> out;
  std::size_t i = 0;
  while (i < s.size()) {
    if (!is_digit(s[i])) {
      ++i;
      continue;
    }
    TimeToken tok;
    std::size_t j = i;
    while (j < s.size() && is_digit(s[j])) ++j;
    const std::size_t hour_len = j - i;
    if (hour_len > 2) tok.digits_ok = false;
    for (std::size_t k = i; k < j && k < i + 3; ++k) tok.hour = tok.hour * 10 + (s[k] - '0');
    if (j + 1 < s.size() && s[j] == ':' && is_digit(s[j + 1])) {
      std::size_t m = j + 1;
      while (m < s.size() && is_digit(s[m])) ++m;
      if (m - (j + 1) == 2) {
        tok.minute = (s[j + 1] - '0') * 10 + (s[j + 2] - '0');
      } else {
        tok.digits_ok = false;
      }
      j = m;
    }
    std::size_t k = j;
    if (k < s.size() && s[k] == ' ') ++k;
    Meridiem m = Meridiem::None;
    if (const std::size_t len = match_meridiem(s, k, m)) {
      tok.meridiem = m;
      j = k + len;
    }
    out.push_back(tok);
    i = j;
  }
  return out;
}

TimeParse resolve(const TimeToken& tok) {
  TimeParse r;
  if (!tok.digits_ok || tok.minute > 59) return r;
  if (tok.meridiem != Meridiem::None) {
    if (tok.hour < 1 || tok.hour > 12) return r;
    int h = tok.hour % 12;
    if (tok.meridiem == Meridiem::Pm) h += 12;
    r.kind = TimeParseKind::Resolved;
    r.time = {h, tok.minute};
    return r;
  }
  if (tok.hour > 23) return r;
  if (tok.hour >= 1 && tok.hour <= 12) {
    r.kind = TimeParseKind::Ambiguous;
    return r;
  }
  r.kind = TimeParseKind::Resolved;
  r.time = {tok.hour, tok.minute};
  return r;
}

}  // namespace

std::string sanitize(std::string_view raw) {
  std::string out;
  out.reserve(std::min(raw.size(), kMaxSanitizedLength * 4));
  std::size_t count = 0;
  bool pending_space = false;
  std::size_t i = 0;
  while (i < raw.size() && count < kMaxSanitizedLength) {
    const auto cp = decode_utf8(raw, i);
    if (!cp) continue;
    if (is_space(*cp)) {
      pending_space = true;
      continue;
    }
    if (is_dropped(*cp)) continue;
    if (pending_space && count > 0) {
      if (count + 2 > kMaxSanitizedLength) break;
      out += ' ';
      ++count;
    }
    pending_space = false;
    char32_t c = *cp;
    if (c >= 'A' && c <= 'Z') c = c - 'A' + 'a';
    encode_utf8(c, out);
    ++count;
  }
  return out;
}

TimeParse parse_clock_time(std::string_view fragment) {
  const auto tokens = scan_time_tokens(fragment);
  for (const auto& tok : tokens) {
    TimeParse r = resolve(tok);
    if (r.kind != TimeParseKind::Invalid) {
      r.extra_tokens = tokens.size() > 1;
      return r;
    }
  }
  TimeParse invalid;
  invalid.extra_tokens = tokens.size() > 1;
  return invalid;
}

Intent classify(std::string_view text) {
  const auto starts = word_occurrences(text, "startcal");
  const auto ends = word_occurrences(text, "endcal");
  if (starts.empty() == ends.empty()) return Intent::unknown();

  const Keyword kw = starts.empty() ? Keyword::EndCal : Keyword::StartCal;
  const auto& hits = starts.empty() ? ends : starts;
  const std::size_t len = starts.empty() ? 6 : 8;

  std::string remainder(text);
  for (std::size_t pos : hits) remainder.replace(pos, len, std::string(len, ' '));

  const TimeParse t = parse_clock_time(remainder);
  Intent intent;
  intent.keyword = kw;
  intent.extra_time_tokens = t.extra_tokens;
  switch (t.kind) {
    case TimeParseKind::Resolved:
      intent.kind = kw == Keyword::StartCal ? IntentKind::StartCal : IntentKind::EndCal;
      intent.time = t.time;
      break;
    case TimeParseKind::Ambiguous:
      intent.kind = IntentKind::AmbiguousTime;
      break;
    case TimeParseKind::Invalid:
      intent.kind = IntentKind::InvalidTime;
      break;
  }
  return intent;
}

const char* to_string(IntentKind kind) {
  switch (kind) {
    case IntentKind::StartCal: return "startcal";
    case IntentKind::EndCal: return "endcal";
    case IntentKind::AmbiguousTime: return "ambiguous";
    case IntentKind::InvalidTime: return "invalid";
    case IntentKind::Unknown: return "unknown";
  }
  return "unknown";
}

const char* to_string(Keyword keyword) { return keyword == Keyword::StartCal ? "startcal" : "endcal"; }

std::string describe(const Intent& intent) {
  switch (intent.kind) {
    case IntentKind::StartCal:
    case IntentKind::EndCal:
      return std::string(to_string(intent.kind)) + "(" + format_hhmm(intent.time) + ")";
    case IntentKind::AmbiguousTime:
    case IntentKind::InvalidTime:
      return std::string(to_string(intent.kind)) + "(" + to_string(intent.keyword) + ")";
    case IntentKind::Unknown:
      break;
  }
  return "unknown";
}

}  // namespace smartstate::intake
