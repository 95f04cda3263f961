#pragma once

// Study and server configuration files (INI).

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <absl/time/time.h>

#include "smartstate/protocol.h"
#include "smartstate/study.h"

namespace smartstate::config {

struct StudyDescriptor {
  std::string study_id;
  std::string display_name;
  study::StudyConfig config;
  std::map<std::string, std::filesystem::path> protocol_files;  // group -> .fsm
  std::vector<protocol::ProtocolDef> protocols;
  std::uint64_t randomization_seed = 0;
};

struct ServerConfig {
  std::string bind_address = "127.0.0.1";
  int port = 8080;
  std::filesystem::path data_dir = "data";
  std::vector<StudyDescriptor> studies;
  std::map<std::string, std::string> tokens;  // token -> actor label
  std::string provider_kind = "sim";
  std::string provider_url;
  absl::Duration checkpoint_interval = absl::Minutes(15);
  absl::Duration tick_interval = absl::Seconds(1);
  std::filesystem::path console_dir;  // static assets; empty when not served
};

// Parses and validates; throws Error("INVALID_PROTOCOL") listing the diagnostics.
protocol::ProtocolDef load_protocol_file(const std::filesystem::path& path);

// Throws Error("BAD_CONFIG") or Error("INVALID_PROTOCOL"). Relative paths
// resolve against the file's directory.
StudyDescriptor load_study(const std::filesystem::path& path);

// SMARTSTATE_DATA_DIR overrides the data directory when set.
ServerConfig load_server_config(const std::filesystem::path& path);

}  // namespace smartstate::config
