#include "smartstate/config.h"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "smartstate/error.h"

namespace smartstate::config {

namespace pt = boost::property_tree;

namespace {

pt::ptree read_ini(const std::filesystem::path& path) {
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw Error("BAD_CONFIG", e.what());
  }
  return tree;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& value) {
  std::filesystem::path p(value);
  return p.is_absolute() ? p : (base / p).lexically_normal();
}

template <typename T>
T get(const pt::ptree& tree, const std::string& key, const std::filesystem::path& file, T fallback) {
  try {
    return tree.get<T>(key, fallback);
  } catch (const pt::ptree_bad_data&) {
    throw Error("BAD_CONFIG", file.string() + ": bad value for '" + key + "'");
  }
}

ClockTime get_time(const pt::ptree& tree, const std::string& key, const std::filesystem::path& file,
                   ClockTime fallback) {
  const auto text = tree.get<std::string>(key, "");
  if (text.empty()) return fallback;
  auto t = parse_hhmm(text);
  if (!t) throw Error("BAD_CONFIG", file.string() + ": '" + key + "' must be HH:MM, got '" + text + "'");
  return *t;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

}  // namespace

protocol::ProtocolDef load_protocol_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("BAD_CONFIG", "cannot read protocol file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  auto parsed = protocol::parse_protocol(ss.str());
  std::vector<protocol::Diagnostic> diags = parsed.diagnostics;
  if (parsed.ok()) {
    auto more = protocol::validate_protocol(*parsed.protocol);
    diags.insert(diags.end(), more.begin(), more.end());
  }
  if (!parsed.ok() || protocol::has_errors(diags)) {
    std::string msg = path.string() + " failed validation:";
    for (const auto& d : diags) {
      if (d.severity == protocol::Severity::Error) msg += "\n  " + protocol::format_diagnostic(d);
    }
    throw Error("INVALID_PROTOCOL", msg);
  }
  return *parsed.protocol;
}

StudyDescriptor load_study(const std::filesystem::path& path) {
  const auto tree = read_ini(path);
  const auto base = path.parent_path();
  StudyDescriptor d;
  d.study_id = tree.get<std::string>("study.id", "");
  if (d.study_id.empty()) throw Error("BAD_CONFIG", path.string() + ": [study] id is required");
  for (char c : d.study_id) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) {
      throw Error("BAD_CONFIG", path.string() + ": study id may only use letters, digits, '-' and '_'");
    }
  }
  d.display_name = tree.get<std::string>("study.name", d.study_id);
  auto& c = d.config;
  c.study_id = d.study_id;
  c.timezone_name = tree.get<std::string>("study.timezone", "UTC");
  c.baseline_days = get<int>(tree, "study.baseline_days", path, 14);
  c.window_target = absl::Minutes(get<int>(tree, "study.window_target_minutes", path, 600));
  c.window_tolerance = absl::Minutes(get<int>(tree, "study.window_tolerance_minutes", path, 60));
  c.latest_end = get_time(tree, "study.latest_end", path, {20, 0});
  c.cycle_start = get_time(tree, "study.cycle_start", path, {4, 0});
  d.randomization_seed = get<std::uint64_t>(tree, "study.randomization_seed", path, 0);

  const auto groups = tree.get_child_optional("groups");
  if (!groups || groups->empty()) throw Error("BAD_CONFIG", path.string() + ": [groups] must list at least one group");
  std::set<std::string> protocol_ids;
  for (const auto& [group, value] : *groups) {
    const auto file = resolve(base, value.get_value<std::string>());
    auto def = load_protocol_file(file);
    if (!protocol_ids.insert(def.protocol_id).second) {
      throw Error("BAD_CONFIG", path.string() + ": protocol '" + def.protocol_id + "' is bound to two groups");
    }
    c.groups.push_back({group, def.protocol_id});
    d.protocol_files[group] = file;
    d.protocols.push_back(std::move(def));
  }
  try {
    c.finalize();
  } catch (const Error& e) {
    throw Error("BAD_CONFIG", path.string() + ": " + e.what());
  }
  return d;
}

ServerConfig load_server_config(const std::filesystem::path& path) {
  const auto tree = read_ini(path);
  const auto base = path.parent_path();
  ServerConfig s;
  s.bind_address = tree.get<std::string>("server.bind", s.bind_address);
  s.port = get<int>(tree, "server.port", path, s.port);
  s.data_dir = resolve(base, tree.get<std::string>("server.data_dir", "data"));
  if (const char* env = std::getenv("SMARTSTATE_DATA_DIR"); env && *env) s.data_dir = env;
  s.checkpoint_interval = absl::Minutes(get<int>(tree, "server.checkpoint_minutes", path, 15));
  s.tick_interval = absl::Milliseconds(get<int>(tree, "server.tick_ms", path, 1000));
  if (const auto console = tree.get<std::string>("server.console_dir", ""); !console.empty()) {
    s.console_dir = resolve(base, console);
  }
  std::set<std::string> ids;
  for (const auto& file : split_list(tree.get<std::string>("server.studies", ""))) {
    auto study = load_study(resolve(base, file));
    if (!ids.insert(study.study_id).second) throw Error("BAD_CONFIG", "study '" + study.study_id + "' listed twice");
    s.studies.push_back(std::move(study));
  }
  if (s.studies.empty()) throw Error("BAD_CONFIG", path.string() + ": [server] studies lists no study files");
  if (const auto tokens = tree.get_child_optional("tokens")) {
    for (const auto& [label, value] : *tokens) {
      const auto token = value.get_value<std::string>();
      if (token.empty()) throw Error("BAD_CONFIG", "token for '" + label + "' is empty");
      s.tokens[token] = label;
    }
  }
  if (s.tokens.empty()) throw Error("BAD_CONFIG", path.string() + ": [tokens] defines no API tokens");
  s.provider_kind = tree.get<std::string>("provider.kind", "sim");
  s.provider_url = tree.get<std::string>("provider.url", "");
  if (s.provider_kind != "sim" && s.provider_kind != "webhook") {
    throw Error("BAD_CONFIG", "provider kind must be 'sim' or 'webhook'");
  }
  if (s.provider_kind == "webhook" && s.provider_url.empty()) {
    throw Error("BAD_CONFIG", "webhook provider needs [provider] url");
  }
  return s;
}

}  // namespace smartstate::config
