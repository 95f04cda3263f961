#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "smartstate/protocol.h"

namespace testing_support {

inline std::string source_path(const std::string& rel) { return std::string(SMARTSTATE_SOURCE_DIR) + "/" + rel; }

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline smartstate::protocol::ProtocolDef load_fixture(const std::string& group) {
  auto r = smartstate::protocol::parse_protocol(read_file(source_path("protocols/" + group + ".fsm")));
  if (!r.ok()) throw std::runtime_error("fixture " + group + " does not parse");
  return *r.protocol;
}

}  // namespace testing_support
