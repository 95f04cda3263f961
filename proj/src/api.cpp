#include "smartstate/api.h"

#include <httplib.h>

#include <chrono>
#include <thread>

#include "smartstate/error.h"
#include "smartstate/instant.h"

namespace smartstate::api {

using nlohmann::json;

namespace {

constexpr const char* kJson = "application/json";

constexpr const char* kConsolePlaceholder = R"(<!doctype html>
<html><head><meta charset="utf-8"><title>SmartState console</title></head>
<body><p>The console assets are not installed. Set <code>console_dir</code> in the server config.</p>
<p>The management API is available under <code>/studies</code>.</p></body></html>
)";

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), kJson);
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  send_json(res, status, {{"code", code}, {"message", message}});
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    auto j = json::parse(req.body);
    if (!j.is_object()) throw Error("BAD_REQUEST", "request body must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw Error("BAD_REQUEST", std::string("invalid JSON: ") + e.what());
  }
}

std::string string_field(const json& body, const char* key, bool required = true) {
  if (!body.contains(key)) {
    if (required) throw Error("BAD_REQUEST", std::string("missing field '") + key + "'");
    return "";
  }
  if (!body.at(key).is_string()) throw Error("BAD_REQUEST", std::string("field '") + key + "' must be a string");
  return body.at(key).get<std::string>();
}

bool bool_field(const json& body, const char* key) {
  if (!body.contains(key)) return false;
  if (!body.at(key).is_boolean()) throw Error("BAD_REQUEST", std::string("field '") + key + "' must be a boolean");
  return body.at(key).get<bool>();
}

store::AuditFilter audit_filter(const httplib::Request& req) {
  store::AuditFilter f;
  if (req.has_param("kind")) {
    auto kind = req.get_param_value("kind");
    if (!store::is_audit_kind(kind)) throw Error("BAD_REQUEST", "unknown audit kind '" + kind + "'");
    f.kind = kind;
  }
  auto instant = [&](const char* key) -> std::optional<absl::Time> {
    if (!req.has_param(key)) return std::nullopt;
    auto t = parse_instant(req.get_param_value(key));
    if (!t) throw Error("BAD_REQUEST", std::string("'") + key + "' must be an RFC 3339 instant");
    return t;
  };
  f.from = instant("from");
  f.to = instant("to");
  auto number = [&](const char* key) -> std::optional<std::uint64_t> {
    if (!req.has_param(key)) return std::nullopt;
    try {
      return std::stoull(req.get_param_value(key));
    } catch (const std::exception&) {
      throw Error("BAD_REQUEST", std::string("'") + key + "' must be a non-negative integer");
    }
  };
  f.after_seq = number("after");
  if (auto limit = number("limit")) f.limit = static_cast<std::size_t>(*limit);
  return f;
}

json instance_json(const runtime::MachineInstance& m) {
  json timers = json::array();
  for (const auto& t : m.pending_timers) timers.push_back({{"name", t.name}, {"fire_at", format_instant(t.fire_at)}});
  json vars = json::object();
  vars["start"] = m.vars.start_time ? json(format_hhmm(*m.vars.start_time)) : json(nullptr);
  vars["end"] = m.vars.end_time ? json(format_hhmm(*m.vars.end_time)) : json(nullptr);
  if (m.vars.window) {
    vars["window"] = {{"start", format_hhmm(m.vars.window->start)},
                      {"target_end", format_hhmm(m.vars.window->target_end)},
                      {"earliest_ok", format_hhmm(m.vars.window->earliest_ok)},
                      {"latest_ok", format_hhmm(m.vars.window->latest_ok)}};
  }
  vars["outcome"] = m.vars.outcome ? json(study::to_string(*m.vars.outcome)) : json(nullptr);
  return {{"protocol_id", m.protocol_id},
          {"protocol_version", m.protocol_version},
          {"current_state", m.current_state},
          {"cycle_date", study::format_date(m.cycle_date)},
          {"last_event_seq", m.last_event_seq},
          {"pending_timers", timers},
          {"cycle_vars", vars}};
}

using Handler = std::function<void(const httplib::Request&, httplib::Response&, const std::string& actor)>;

}  // namespace

// ---------------------------------------------------------------------------

Application::Application(config::ServerConfig config, std::unique_ptr<gateway::Provider> provider,
                         service::ServiceOptions base_options)
    : config_(std::move(config)), provider_(std::move(provider)) {
  base_options.data_dir = config_.data_dir;
  base_options.checkpoint_interval = config_.checkpoint_interval;
  for (const auto& study : config_.studies) {
    studies_.push_back(std::make_unique<service::StudyService>(study, *provider_, base_options));
  }
}

service::StudyService* Application::study(const std::string& study_id) {
  for (auto& s : studies_) {
    if (s->study_id() == study_id) return s.get();
  }
  return nullptr;
}

service::StudyService* Application::study_of_participant(const std::string& participant_id) {
  for (auto& s : studies_) {
    if (s->participant(participant_id)) return s.get();
  }
  return nullptr;
}

service::StudyService* Application::study_of_handle(const std::string& handle) {
  for (auto& s : studies_) {
    std::lock_guard lock(s->mutex());
    if (s->store().participant_by_handle(handle)) return s.get();
  }
  return nullptr;
}

std::string Application::actor_for_token(const std::string& token) const {
  auto it = config_.tokens.find(token);
  return it == config_.tokens.end() ? std::string() : it->second;
}

void Application::step(absl::Time now, const std::function<void(const std::string&)>& log) {
  for (auto& s : studies_) {
    try {
      s->step(now);
    } catch (const std::exception& e) {
      if (log) log("study " + s->study_id() + ": " + e.what());
    }
  }
}

int status_for(const std::string& code) {
  if (code == "BAD_REQUEST" || code == "MALFORMED" || code == "UNKNOWN_STATE") return 400;
  if (code == "UNAUTHENTICATED") return 401;
  if (code == "NOT_FOUND" || code == "UNKNOWN_STUDY" || code == "UNKNOWN_PARTICIPANT" || code == "UNKNOWN_GROUP") {
    return 404;
  }
  if (code == "DUPLICATE_HANDLE" || code == "PARTICIPANT_INACTIVE" || code == "GROUP_PRECONDITION" ||
      code == "BASELINE_INCOMPLETE") {
    return 409;
  }
  if (code == "PENDING_FLUSH") return 503;
  return 500;
}

json to_json(const service::ParticipantView& v) {
  return {{"participant_id", v.participant.participant_id},
          {"handle", v.participant.handle},
          {"study_id", v.participant.study_id},
          {"group", v.participant.group_id},
          {"status", v.participant.status},
          {"enrolled_at", format_instant(v.participant.enrolled_at)},
          {"current_state", v.current_state},
          {"cycle_date", study::format_date(v.cycle_date)},
          {"cycles_enrolled", v.cycles_enrolled},
          {"successes", v.successes},
          {"success_rate", v.success_rate}};
}

json to_json(const store::AuditRecord& r) {
  return {{"seq", r.seq},
          {"at", format_instant(r.at)},
          {"actor", r.actor},
          {"kind", r.kind},
          {"participant_id", r.participant_id.empty() ? json(nullptr) : json(r.participant_id)},
          {"study_id", r.study_id},
          {"payload", r.payload}};
}

json to_json(const store::StoredMessage& m) {
  json j = {{"direction", m.direction}, {"at", format_instant(m.at)}, {"body", m.body}, {"handle", m.handle}};
  if (m.direction == "in") {
    j["intent"] = m.intent;
  } else {
    j["idempotency_key"] = m.idempotency_key;
    j["template"] = m.template_id;
    j["reply_class"] = m.reply_class;
    j["audit_seq"] = m.audit_seq;
  }
  return j;
}

void install_routes(httplib::Server& server, Application& app) {
  // Wraps a handler with bearer authentication and error mapping.
  auto guarded = [&app](Handler h) {
    return [&app, h](const httplib::Request& req, httplib::Response& res) {
      const auto auth = req.get_header_value("Authorization");
      const std::string prefix = "Bearer ";
      const std::string actor =
          auth.rfind(prefix, 0) == 0 ? app.actor_for_token(auth.substr(prefix.size())) : std::string();
      if (actor.empty()) {
        send_error(res, 401, "UNAUTHENTICATED", "a valid bearer token is required");
        return;
      }
      try {
        h(req, res, actor);
      } catch (const Error& e) {
        send_error(res, status_for(e.code()), e.code(), e.what());
        if (e.retryable()) res.set_header("Retry-After", "1");
      } catch (const std::exception& e) {
        send_error(res, 500, "INTERNAL", e.what());
      }
    };
  };
  auto study_or_throw = [&app](const std::string& id) -> service::StudyService& {
    auto* s = app.study(id);
    if (!s) throw Error("UNKNOWN_STUDY", "no study '" + id + "'");
    return *s;
  };
  auto participant_study = [&app](const std::string& pid) -> service::StudyService& {
    auto* s = app.study_of_participant(pid);
    if (!s) throw Error("UNKNOWN_PARTICIPANT", "no participant '" + pid + "'");
    return *s;
  };

  server.Get("/healthz", [&app](const httplib::Request&, httplib::Response& res) {
    std::size_t queued = 0;
    for (auto& s : app.studies()) queued += s->queued_events();
    send_json(res, 200, {{"status", "ok"}, {"studies", app.studies().size()}, {"queued_events", queued}});
  });

  server.Get("/console-config", [&app](const httplib::Request&, httplib::Response& res) {
    json studies = json::array();
    for (auto& s : app.studies()) studies.push_back({{"id", s->study_id()}, {"name", s->descriptor().display_name}});
    send_json(res, 200, {{"api_base", ""}, {"poll_interval_ms", 5000}, {"studies", studies}});
  });

  if (!app.config().console_dir.empty()) {
    server.set_mount_point("/console", app.config().console_dir.string());
  } else {
    auto placeholder = [](const httplib::Request&, httplib::Response& res) {
      res.set_content(kConsolePlaceholder, "text/html; charset=utf-8");
    };
    server.Get("/console", placeholder);
    server.Get("/console/", placeholder);
  }

  server.Get("/studies", guarded([&app](const httplib::Request&, httplib::Response& res, const std::string&) {
    json out = json::array();
    for (auto& s : app.studies()) {
      const auto& d = s->descriptor();
      json groups = json::array();
      for (const auto& g : d.config.groups) {
        int version = 0;
        for (const auto& p : d.protocols) {
          if (p.protocol_id == g.protocol_id) version = p.version;
        }
        groups.push_back({{"group", g.group_id}, {"protocol_id", g.protocol_id}, {"version", version}});
      }
      out.push_back({{"study_id", d.study_id},
                     {"name", d.display_name},
                     {"timezone", d.config.timezone_name},
                     {"groups", groups},
                     {"participants", s->participants().size()}});
    }
    send_json(res, 200, out);
  }));

  server.Get(R"(/studies/([^/]+)/participants)",
             guarded([=](const httplib::Request& req, httplib::Response& res, const std::string&) {
               auto& s = study_or_throw(req.matches[1]);
               json out = json::array();
               for (const auto& v : s.participants()) out.push_back(to_json(v));
               send_json(res, 200, out);
             }));

  server.Post(R"(/studies/([^/]+)/participants)",
              guarded([=, &app](const httplib::Request& req, httplib::Response& res, const std::string& actor) {
                auto& s = study_or_throw(req.matches[1]);
                const auto body = parse_body(req);
                const auto p = s.create_participant(string_field(body, "handle"), string_field(body, "group"), actor,
                                                    app.clock());
                send_json(res, 201, to_json(*s.participant(p.participant_id)));
              }));

  server.Get(R"(/studies/([^/]+)/audit)",
             guarded([=](const httplib::Request& req, httplib::Response& res, const std::string&) {
               auto& s = study_or_throw(req.matches[1]);
               auto f = audit_filter(req);
               if (req.has_param("participant")) f.participant_id = req.get_param_value("participant");
               json out = json::array();
               for (const auto& r : s.audit(f)) out.push_back(to_json(r));
               send_json(res, 200, out);
             }));

  server.Get(R"(/studies/([^/]+)/export)",
             guarded([=](const httplib::Request& req, httplib::Response& res, const std::string&) {
               auto& s = study_or_throw(req.matches[1]);
               res.set_header("Content-Disposition", "attachment; filename=\"" + s.study_id() + "-export.zip\"");
               res.set_content(s.export_zip(), "application/zip");
             }));

  server.Get(R"(/studies/([^/]+)/groups/([^/]+)/diagram)",
             guarded([=](const httplib::Request& req, httplib::Response& res, const std::string&) {
               auto& s = study_or_throw(req.matches[1]);
               const std::string highlight = req.has_param("highlight") ? req.get_param_value("highlight") : "";
               res.set_content(s.diagram(req.matches[2], highlight), "text/vnd.graphviz");
             }));

  server.Get(R"(/participants/([^/]+))",
             guarded([=](const httplib::Request& req, httplib::Response& res, const std::string&) {
               const std::string pid = req.matches[1];
               auto& s = participant_study(pid);
               auto out = to_json(*s.participant(pid));
               if (auto m = s.instance(pid)) out["instance"] = instance_json(*m);
               send_json(res, 200, out);
             }));

  server.Post(R"(/participants/([^/]+)/group)",
              guarded([=, &app](const httplib::Request& req, httplib::Response& res, const std::string& actor) {
                const std::string pid = req.matches[1];
                auto& s = participant_study(pid);
                const auto body = parse_body(req);
                const bool randomize = bool_field(body, "randomize");
                const auto group = string_field(body, "group", !randomize);
                const auto r = s.reassign(pid, group, actor, app.clock(), randomize, bool_field(body, "force"));
                send_json(res, 200,
                          {{"participant_id", r.participant_id},
                           {"old_group", r.old_group},
                           {"new_group", r.new_group},
                           {"effective_cycle", study::format_date(r.effective_cycle)},
                           {"changed", r.changed},
                           {"forced", r.forced}});
              }));

  server.Post(R"(/participants/([^/]+)/transition)",
              guarded([=, &app](const httplib::Request& req, httplib::Response& res, const std::string& actor) {
                const std::string pid = req.matches[1];
                auto& s = participant_study(pid);
                const auto body = parse_body(req);
                const auto target = body.contains("state") ? string_field(body, "state") : string_field(body, "target");
                send_json(res, 200, to_json(s.manual_transition(pid, target, actor, app.clock())));
              }));

  server.Post(R"(/participants/([^/]+)/status)",
              guarded([=, &app](const httplib::Request& req, httplib::Response& res, const std::string& actor) {
                const std::string pid = req.matches[1];
                auto& s = participant_study(pid);
                const auto body = parse_body(req);
                s.set_status(pid, string_field(body, "status"), actor, app.clock());
                send_json(res, 200, to_json(*s.participant(pid)));
              }));

  server.Get(R"(/participants/([^/]+)/audit)",
             guarded([=](const httplib::Request& req, httplib::Response& res, const std::string&) {
               const std::string pid = req.matches[1];
               auto& s = participant_study(pid);
               auto f = audit_filter(req);
               f.participant_id = pid;
               json out = json::array();
               for (const auto& r : s.audit(f)) out.push_back(to_json(r));
               send_json(res, 200, out);
             }));

  server.Get(R"(/participants/([^/]+)/messages)",
             guarded([=](const httplib::Request& req, httplib::Response& res, const std::string&) {
               const std::string pid = req.matches[1];
               auto& s = participant_study(pid);
               json out = json::array();
               for (const auto& m : s.messages(pid)) out.push_back(to_json(m));
               send_json(res, 200, out);
             }));

  // Twilio-shaped inbound webhook: form fields From, Body, optional MessageSid.
  auto webhook = [&app](service::StudyService* target, const httplib::Request& req, httplib::Response& res) {
    std::optional<std::string> from;
    std::optional<std::string> body;
    if (req.has_param("From")) from = req.get_param_value("From");
    if (req.has_param("Body")) body = req.get_param_value("Body");
    const std::string sid = req.has_param("MessageSid") ? req.get_param_value("MessageSid") : "";
    if (!target && from) target = app.study_of_handle(*from);
    if (!target) target = app.studies().front().get();
    try {
      const auto r = target->handle_inbound(from, body, sid, app.clock());
      if (r.status == 400) {
        send_error(res, 400, "MALFORMED", "From and Body are required");
        return;
      }
      res.status = 204;
    } catch (const std::exception& e) {
      send_error(res, 503, "UNAVAILABLE", e.what());
    }
  };
  server.Post("/webhook/sms", [webhook](const httplib::Request& req, httplib::Response& res) {
    webhook(nullptr, req, res);
  });
  server.Post(R"(/webhook/sms/([^/]+))", [webhook, &app](const httplib::Request& req, httplib::Response& res) {
    auto* s = app.study(req.matches[1]);
    if (!s) {
      send_error(res, 404, "UNKNOWN_STUDY", "no study '" + std::string(req.matches[1]) + "'");
      return;
    }
    webhook(s, req, res);
  });
}

void run_background(Application& app, absl::Duration interval, const std::atomic<bool>& stop) {
  const auto sleep_for = std::chrono::microseconds(absl::ToInt64Microseconds(interval));
  while (!stop.load()) {
    app.step(app.clock(), [](const std::string& msg) { std::fprintf(stderr, "step failed: %s\n", msg.c_str()); });
    std::this_thread::sleep_for(sleep_for);
  }
}

}  // namespace smartstate::api
