#pragma once

// Management REST API, inbound webhook and console assets over cpp-httplib.

#include <atomic>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <absl/time/clock.h>
#include <absl/time/time.h>
#include <nlohmann/json.hpp>

#include "smartstate/config.h"
#include "smartstate/provider.h"
#include "smartstate/service.h"

namespace httplib {
class Server;
}

namespace smartstate::api {

// Every configured study, opened and restored, sharing one provider.
class Application {
 public:
  // Throws when any study fails to open; nothing is served in that case.
  Application(config::ServerConfig config, std::unique_ptr<gateway::Provider> provider,
              service::ServiceOptions base_options = {});

  const config::ServerConfig& config() const { return config_; }
  gateway::Provider& provider() { return *provider_; }
  std::vector<std::unique_ptr<service::StudyService>>& studies() { return studies_; }

  service::StudyService* study(const std::string& study_id);
  // Study holding `participant_id`, or nullptr.
  service::StudyService* study_of_participant(const std::string& participant_id);
  // Study holding the handle, or nullptr.
  service::StudyService* study_of_handle(const std::string& handle);

  // Label of the token, or empty when unknown.
  std::string actor_for_token(const std::string& token) const;

  // One tick/process/pump/checkpoint pass over every study. Failures are
  // reported to `log` and do not stop the other studies.
  void step(absl::Time now, const std::function<void(const std::string&)>& log = {});

  std::function<absl::Time()> clock = [] { return absl::Now(); };

 private:
  config::ServerConfig config_;
  std::unique_ptr<gateway::Provider> provider_;
  std::vector<std::unique_ptr<service::StudyService>> studies_;
};

// Maps an Error code to its HTTP status.
int status_for(const std::string& code);

nlohmann::json to_json(const service::ParticipantView& v);
nlohmann::json to_json(const store::AuditRecord& r);
nlohmann::json to_json(const store::StoredMessage& m);

void install_routes(httplib::Server& server, Application& app);

// Calls app.step every `interval` until `stop` is set.
void run_background(Application& app, absl::Duration interval, const std::atomic<bool>& stop);

}  // namespace smartstate::api
