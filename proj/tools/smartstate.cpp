// Operator CLI: serve, validate, diagram, simulate, export, backup.

#include <httplib.h>

#include <CLI11.hpp>
#include <atomic>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "smartstate/api.h"
#include "smartstate/config.h"
#include "smartstate/error.h"
#include "smartstate/export.h"
#include "smartstate/protocol.h"
#include "smartstate/simulate.h"
#include "smartstate/store.h"

using namespace smartstate;

namespace {

httplib::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("NOT_FOUND", "cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
  if (!out) throw Error("STORAGE", "cannot write " + path.string());
}

std::string default_config() {
  const char* env = std::getenv("SMARTSTATE_CONFIG");
  return env && *env ? env : "config/server.ini";
}

int cmd_validate(const std::vector<std::string>& files) {
  int failures = 0;
  for (const auto& file : files) {
    auto parsed = protocol::parse_protocol(read_file(file));
    auto diags = parsed.diagnostics;
    if (parsed.ok()) {
      auto more = protocol::validate_protocol(*parsed.protocol);
      diags.insert(diags.end(), more.begin(), more.end());
    }
    for (const auto& d : diags) std::cout << file << ":" << protocol::format_diagnostic(d) << "\n";
    const bool ok = parsed.ok() && !protocol::has_errors(diags);
    std::cout << file << ": " << (ok ? "ok" : "invalid") << "\n";
    if (!ok) ++failures;
  }
  return failures ? 1 : 0;
}

int cmd_serve(const std::string& config_path) {
  auto cfg = config::load_server_config(config_path);
  auto provider = gateway::make_provider(cfg.provider_kind, cfg.provider_url);
  api::Application app(cfg, std::move(provider));
  httplib::Server server;
  api::install_routes(server, app);
  std::atomic<bool> stop{false};
  std::thread loop([&] { api::run_background(app, cfg.tick_interval, stop); });
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cerr << "listening on " << cfg.bind_address << ":" << cfg.port << " with " << app.studies().size()
            << " stud" << (app.studies().size() == 1 ? "y" : "ies") << "\n";
  const bool ok = server.listen(cfg.bind_address, cfg.port);
  stop = true;
  loop.join();
  for (auto& s : app.studies()) s->checkpoint(app.clock());
  if (!ok) {
    std::cerr << "cannot listen on " << cfg.bind_address << ":" << cfg.port << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Study protocol engine for SMS-based participant workflows"};
  cli.require_subcommand(1);

  std::string config_path = default_config();

  auto* serve = cli.add_subcommand("serve", "Run the API server, webhook and engine loop");
  serve->add_option("-c,--config", config_path, "Server config (INI)");

  std::vector<std::string> validate_files;
  auto* validate = cli.add_subcommand("validate", "Parse and validate protocol files");
  validate->add_option("files", validate_files, "Protocol files")->required()->check(CLI::ExistingFile);

  std::string diagram_file, highlight, diagram_out;
  auto* diagram = cli.add_subcommand("diagram", "Render a protocol as Graphviz DOT");
  diagram->add_option("file", diagram_file, "Protocol file")->required()->check(CLI::ExistingFile);
  diagram->add_option("--highlight", highlight, "State to highlight");
  diagram->add_option("-o,--output", diagram_out, "Output file (default stdout)");

  std::string study_path, scenario_path, json_out, csv_out, work_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> days;
  auto* simulate = cli.add_subcommand("simulate", "Run a seeded scenario and report metrics");
  simulate->add_option("--study", study_path, "Study config (INI)")->required()->check(CLI::ExistingFile);
  simulate->add_option("--scenario", scenario_path, "Scenario (JSON)")->required()->check(CLI::ExistingFile);
  simulate->add_option("--seed", seed, "Override the scenario seed");
  simulate->add_option("--days", days, "Override the scenario length");
  simulate->add_option("--json", json_out, "Write the JSON report here (default stdout)");
  simulate->add_option("--csv", csv_out, "Write the per-participant CSV here");
  simulate->add_option("--work-dir", work_dir, "Directory for the simulated store");

  std::string export_study, export_out;
  auto* exp = cli.add_subcommand("export", "Write a study's CSV export as a zip");
  exp->add_option("-c,--config", config_path, "Server config (INI)");
  exp->add_option("--study", export_study, "Study id")->required();
  exp->add_option("-o,--output", export_out, "Zip file")->required();

  std::string backup_dest = "backups";
  auto* backup = cli.add_subcommand("backup", "Copy every study's store and checkpoint to a timestamped directory");
  backup->add_option("-c,--config", config_path, "Server config (INI)");
  backup->add_option("--dest", backup_dest, "Backup root directory");

  CLI11_PARSE(cli, argc, argv);

  try {
    if (*serve) return cmd_serve(config_path);
    if (*validate) return cmd_validate(validate_files);
    if (*diagram) {
      const auto def = config::load_protocol_file(diagram_file);
      protocol::DotOptions options;
      options.highlight_state = highlight;
      const auto dot = protocol::render_dot(def, options);
      if (diagram_out.empty()) {
        std::cout << dot;
      } else {
        write_file(diagram_out, dot);
      }
      return 0;
    }
    if (*simulate) {
      const auto study = config::load_study(study_path);
      auto scenario = simulate::parse_scenario(nlohmann::json::parse(read_file(scenario_path)));
      if (seed) scenario.seed = *seed;
      if (days) scenario.days = *days;
      simulate::SimOptions options;
      options.work_dir = work_dir.empty() ? std::filesystem::temp_directory_path() / "smartstate-sim" : std::filesystem::path(work_dir);
      const auto report = simulate::run_simulation(study, scenario, options);
      const auto text = report.to_json().dump(2) + "\n";
      if (json_out.empty()) {
        std::cout << text;
      } else {
        write_file(json_out, text);
      }
      if (!csv_out.empty()) write_file(csv_out, report.to_csv());
      return 0;
    }
    if (*exp) {
      const auto cfg = config::load_server_config(config_path);
      bool known = false;
      for (const auto& s : cfg.studies) known = known || s.study_id == export_study;
      if (!known) throw Error("UNKNOWN_STUDY", "no study '" + export_study + "' in " + config_path);
      const auto db = cfg.data_dir / export_study / "store.db";
      if (!std::filesystem::exists(db)) throw Error("NOT_FOUND", "no data for study '" + export_study + "'");
      store::Store st(db, export_study);
      write_file(export_out, exporter::zip_archive(exporter::export_csv(st)));
      return 0;
    }
    if (*backup) {
      const auto cfg = config::load_server_config(config_path);
      const auto stamp = absl::FormatTime("%Y%m%dT%H%M%SZ", absl::Now(), absl::UTCTimeZone());
      const auto root = std::filesystem::path(backup_dest) / ("backup-" + stamp);
      for (const auto& s : cfg.studies) {
        const auto dir = cfg.data_dir / s.study_id;
        if (!std::filesystem::exists(dir / "store.db")) continue;
        std::filesystem::create_directories(root / s.study_id);
        store::Store st(dir / "store.db", s.study_id);
        st.backup_to(root / s.study_id / "store.db");
        if (std::filesystem::exists(dir / "checkpoint.json")) {
          std::filesystem::copy_file(dir / "checkpoint.json", root / s.study_id / "checkpoint.json");
        }
      }
      std::cout << root.string() << "\n";
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << e.code() << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
