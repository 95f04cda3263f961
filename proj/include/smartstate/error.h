#pragma once

#include <stdexcept>
#include <string>

namespace smartstate {

// Domain failure carrying a stable machine-readable code (e.g. "UNKNOWN_STATE").
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message, bool retryable = false)
      : std::runtime_error(message), code_(std::move(code)), retryable_(retryable) {}

  const std::string& code() const noexcept { return code_; }
  bool retryable() const noexcept { return retryable_; }

 private:
  std::string code_;
  bool retryable_;
};

}  // namespace smartstate
