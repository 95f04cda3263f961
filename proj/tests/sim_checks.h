#pragma once

// Audit-log checks shared by the simulation tests and the acceptance suite.
// They read only the stored records, never the engine's in-memory state.

#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "smartstate/config.h"
#include "smartstate/store.h"

namespace sim_checks {

using namespace smartstate;

inline const protocol::ProtocolDef* protocol_of(const config::StudyDescriptor& study, const std::string& group) {
  for (const auto& g : study.config.groups) {
    if (g.group_id != group) continue;
    for (const auto& p : study.protocols) {
      if (p.protocol_id == g.protocol_id) return &p;
    }
  }
  return nullptr;
}

struct Replay {
  int transitions = 0;
  int manual = 0;
  int reassignments = 0;
  std::vector<std::string> violations;
};

// Walks the audit log, tracking each participant's group and state, and checks
// every TRANSITION against the protocol's transition table.
inline Replay replay_transitions(const config::StudyDescriptor& study, const std::vector<store::AuditRecord>& audit) {
  struct Track {
    const protocol::ProtocolDef* def = nullptr;
    std::string state;
  };
  std::map<std::string, Track> track;
  Replay out;
  auto bad = [&](const store::AuditRecord& r, const std::string& why) {
    out.violations.push_back("seq " + std::to_string(r.seq) + " " + r.participant_id + ": " + why);
  };
  for (const auto& r : audit) {
    const auto& p = r.payload;
    if (r.kind == "CONFIG_CHANGE" && p.value("action", "") == "create_participant") {
      const auto* def = protocol_of(study, p.at("group"));
      if (!def) {
        bad(r, "unknown group");
        continue;
      }
      track[r.participant_id] = {def, def->initial_state};
    } else if (r.kind == "TRANSITION") {
      auto it = track.find(r.participant_id);
      if (it == track.end()) {
        bad(r, "transition before creation");
        continue;
      }
      ++out.transitions;
      const std::string from = p.at("from"), event = p.at("event"), to = p.at("to");
      if (from != it->second.state) bad(r, "from " + from + " but tracked state is " + it->second.state);
      const auto* tr = it->second.def->find_transition(from, event);
      if (!tr) {
        bad(r, "no transition " + from + " --" + event + "--> in " + it->second.def->protocol_id);
      } else if (tr->target != to) {
        bad(r, "transition " + from + " --" + event + "--> targets " + tr->target + ", not " + to);
      }
      it->second.state = to;
    } else if (r.kind == "MANUAL_TRANSITION") {
      auto& t = track[r.participant_id];
      ++out.manual;
      if (!t.def || !t.def->find_state(p.at("to").get<std::string>())) bad(r, "manual target is not a state");
      t.state = p.at("to");
    } else if (r.kind == "GROUP_REASSIGNED") {
      auto& t = track[r.participant_id];
      ++out.reassignments;
      t.def = protocol_of(study, p.at("new_group"));
      if (!t.def) {
        bad(r, "reassigned to an unknown group");
        continue;
      }
      t.state = t.def->initial_state;
    }
  }
  return out;
}

struct Cadence {
  int participant_cycles = 0;
  int max_outbound_per_cycle = 0;
  std::vector<std::string> violations;
};

// Per participant-cycle: at most one reminder of each kind, at most one
// response per valid report, and no more outbound messages than two reminders
// plus one reply per inbound report.
inline Cadence check_cadence(const config::StudyDescriptor& study, const std::vector<store::AuditRecord>& audit) {
  struct Counts {
    int in_valid = 0;
    int in_total = 0;
    int out_total = 0;
    int responses = 0;
    std::map<std::string, int> reminders;
  };
  std::map<std::pair<std::string, study::CycleDate>, Counts> per;
  for (const auto& r : audit) {
    if (r.participant_id.empty()) continue;
    const auto key = std::make_pair(r.participant_id, study::cycle_of(r.at, study.config));
    if (r.kind == "MSG_IN") {
      if (r.payload.contains("status")) continue;  // logged, not dispatched
      auto& c = per[key];
      ++c.in_total;
      const std::string intent = r.payload.value("intent", "");
      if (intent == "startcal" || intent == "endcal") ++c.in_valid;
    } else if (r.kind == "MSG_OUT") {
      auto& c = per[key];
      ++c.out_total;
      const std::string cls = r.payload.value("reply_class", "");
      if (cls == "reminder") ++c.reminders[r.payload.value("template", "")];
      if (cls == "response") ++c.responses;
    }
  }
  Cadence out;
  for (const auto& [key, c] : per) {
    ++out.participant_cycles;
    out.max_outbound_per_cycle = std::max(out.max_outbound_per_cycle, c.out_total);
    const std::string where = key.first + " " + study::format_date(key.second) + ": ";
    int reminders = 0;
    for (const auto& [tmpl, n] : c.reminders) {
      reminders += n;
      if (n > 1) out.violations.push_back(where + std::to_string(n) + "x " + tmpl);
    }
    if (c.responses > c.in_valid) out.violations.push_back(where + "more responses than valid reports");
    if (c.out_total - reminders > c.in_total) out.violations.push_back(where + "reply without a report");
    if (c.out_total > 2 + c.in_total) out.violations.push_back(where + "outbound exceeds the per-cycle bound");
  }
  return out;
}

// Error-class replies and total replies counted from MSG_OUT records.
inline std::pair<std::int64_t, std::int64_t> recount_errors(const std::vector<store::AuditRecord>& audit) {
  std::int64_t errors = 0, total = 0;
  for (const auto& r : audit) {
    if (r.kind != "MSG_OUT") continue;
    ++total;
    if (r.payload.value("reply_class", "") == "error") ++errors;
  }
  return {errors, total};
}

}  // namespace sim_checks
