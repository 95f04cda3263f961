#include "smartstate/provider.h"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <cstdlib>

#include "smartstate/error.h"

namespace smartstate::gateway {

DeliveryResult SimProvider::send(const std::string& handle, const std::string& body, const std::string& key) {
  std::lock_guard lock(mu_);
  ++attempts_[key];
  if (fail_next_ > 0) {
    --fail_next_;
    return {false, "simulated failure"};
  }
  if (auto it = fail_key_.find(key); it != fail_key_.end() && it->second > 0) {
    --it->second;
    return {false, "simulated failure for key"};
  }
  if (delivered_.insert(key).second) transcript_.push_back({handle, body, key});
  return {true, ""};
}

void SimProvider::fail_next(int n) {
  std::lock_guard lock(mu_);
  fail_next_ = n;
}

void SimProvider::fail_key(const std::string& key, int n) {
  std::lock_guard lock(mu_);
  fail_key_[key] = n;
}

std::vector<TranscriptEntry> SimProvider::transcript() const {
  std::lock_guard lock(mu_);
  return transcript_;
}

int SimProvider::attempts(const std::string& key) const {
  std::lock_guard lock(mu_);
  auto it = attempts_.find(key);
  return it == attempts_.end() ? 0 : it->second;
}

int SimProvider::total_attempts() const {
  std::lock_guard lock(mu_);
  int n = 0;
  for (const auto& [_, c] : attempts_) n += c;
  return n;
}

WebhookProvider::WebhookProvider(std::string url, std::string token) : token_(std::move(token)) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw Error("BAD_CONFIG", "provider url '" + url + "' has no scheme");
  const auto path_start = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : url.substr(path_start);
  if (url.rfind("http://", 0) != 0) {
    throw Error("BAD_CONFIG", "only http:// provider urls are supported; terminate TLS in front of the endpoint");
  }
}

DeliveryResult WebhookProvider::send(const std::string& handle, const std::string& body, const std::string& key) {
  httplib::Client client(scheme_host_port_);
  client.set_connection_timeout(5);
  client.set_read_timeout(10);
  httplib::Headers headers = {{"Idempotency-Key", key}};
  if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
  const nlohmann::json payload = {{"to", handle}, {"body", body}, {"key", key}};
  auto res = client.Post(path_, headers, payload.dump(), "application/json");
  if (!res) return {false, "transport error: " + httplib::to_string(res.error())};
  if (res->status >= 200 && res->status < 300) return {true, ""};
  return {false, "HTTP " + std::to_string(res->status)};
}

std::unique_ptr<Provider> make_provider(std::string_view kind, const std::string& url) {
  if (kind == "sim") return std::make_unique<SimProvider>();
  if (kind == "webhook") {
    const char* token = std::getenv("SMARTSTATE_PROVIDER_TOKEN");
    return std::make_unique<WebhookProvider>(url, token ? token : "");
  }
  throw Error("BAD_CONFIG", "unknown provider kind '" + std::string(kind) + "'");
}

}  // namespace smartstate::gateway
