#pragma once

// Outbound queue and delivery pump between the engine and a Provider.

#include <chrono>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

#include <absl/time/time.h>

#include "smartstate/provider.h"
#include "smartstate/runtime.h"
#include "smartstate/store.h"

namespace smartstate::gateway {

inline constexpr int kMaxDeliveryAttempts = 5;

// Named points between durable steps; tests throw SimulatedCrash from here.
using CrashHook = std::function<void(std::string_view point)>;

struct SimulatedCrash : std::runtime_error {
  explicit SimulatedCrash(std::string_view point) : std::runtime_error("simulated crash at " + std::string(point)) {}
};

// Delay before attempt `attempts + 1` after `attempts` failures: 1 s, 4 s, 16 s, ...
absl::Duration retry_backoff(int attempts);

enum class EnqueueStatus { Queued, Duplicate, Faulted };

// Queues an outbound effect inside the caller's transaction. Bodies that
// still hold a `{placeholder}` are not queued; a FAULT record is written.
EnqueueStatus enqueue_outbound(store::Store& store, const runtime::ActionEffect& effect, const std::string& handle,
                               absl::Time now);

struct PumpStats {
  int attempted = 0;
  int delivered = 0;
  int retried = 0;
  int failed = 0;
};

// Attempts every due item once. Delivery, the stored outbound message and
// its MSG_OUT record are written in one transaction.
PumpStats pump(store::Store& store, Provider& provider, absl::Time now, const CrashHook& crash = {});

}  // namespace smartstate::gateway
