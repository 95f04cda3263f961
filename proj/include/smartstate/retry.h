#pragma once

#include <chrono>
#include <functional>
#include <thread>

#include "smartstate/error.h"
#include "smartstate/store.h"

namespace smartstate {

struct RetryPolicy {
  int retries = 3;
  std::chrono::milliseconds initial_delay{100};
  int factor = 2;
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

inline void real_sleep(std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }

inline bool is_transient(const std::exception& e) {
  if (dynamic_cast<const store::StorageError*>(&e)) return true;
  if (const auto* err = dynamic_cast<const Error*>(&e)) return err->retryable();
  return false;
}

// Runs `fn`, retrying transient failures with exponential backoff. The last
// failure is rethrown once the retries are used up.
template <typename Fn>
auto retry_transient(Fn&& fn, const RetryPolicy& policy = {}, const Sleeper& sleep = real_sleep) {
  auto delay = policy.initial_delay;
  for (int attempt = 0;; ++attempt) {
    try {
      return fn();
    } catch (const std::exception& e) {
      if (!is_transient(e) || attempt >= policy.retries) throw;
    }
    sleep(delay);
    delay *= policy.factor;
  }
}

}  // namespace smartstate
