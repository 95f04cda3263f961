#pragma once

// Outbound message delivery backends.

#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace smartstate::gateway {

struct DeliveryResult {
  bool ok = false;
  std::string error;
};

class Provider {
 public:
  virtual ~Provider() = default;
  virtual std::string name() const = 0;
  // Safe to call again with the same key after a failure or a crash.
  virtual DeliveryResult send(const std::string& handle, const std::string& body, const std::string& key) = 0;
};

struct TranscriptEntry {
  std::string handle;
  std::string body;
  std::string key;
};

// In-memory provider for tests and simulation: records a transcript, can be
// scripted to fail, and suppresses repeated keys.
class SimProvider : public Provider {
 public:
  std::string name() const override { return "sim"; }
  DeliveryResult send(const std::string& handle, const std::string& body, const std::string& key) override;

  // The next `n` send attempts fail (any key).
  void fail_next(int n);
  // Attempts for `key` fail `n` times before succeeding.
  void fail_key(const std::string& key, int n);

  std::vector<TranscriptEntry> transcript() const;
  int attempts(const std::string& key) const;
  int total_attempts() const;

 private:
  mutable std::mutex mu_;
  int fail_next_ = 0;
  std::map<std::string, int> fail_key_;
  std::map<std::string, int> attempts_;
  std::set<std::string> delivered_;
  std::vector<TranscriptEntry> transcript_;
};

// Generic HTTP POST of {to, body, key} as JSON with a bearer token.
class WebhookProvider : public Provider {
 public:
  WebhookProvider(std::string url, std::string token);
  std::string name() const override { return "webhook"; }
  DeliveryResult send(const std::string& handle, const std::string& body, const std::string& key) override;

 private:
  std::string scheme_host_port_;
  std::string path_;
  std::string token_;
};

// kind "sim" or "webhook"; the webhook token comes from SMARTSTATE_PROVIDER_TOKEN.
std::unique_ptr<Provider> make_provider(std::string_view kind, const std::string& url);

}  // namespace smartstate::gateway
