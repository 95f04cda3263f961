#pragma once

#include <optional>
#include <string>
#include <string_view>

#include <absl/time/time.h>

namespace smartstate {

// "2021-09-09T11:00:00Z"; sub-second parts are dropped.
std::string format_instant(absl::Time t);
std::optional<absl::Time> parse_instant(std::string_view text);

}  // namespace smartstate
