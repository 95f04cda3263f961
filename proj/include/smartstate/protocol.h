#pragma once

// Protocol definition language: a study group's finite state machine as text.
//
//   protocol control version 1
//   event startcal, endcal, cycle_end
//   template unrecognized "Please send STARTCAL or ENDCAL with a time."
//   initial state initial {
//     on startcal -> start_calories { record_start; send startcal_response }
//   }
//   state start_calories { on cycle_end -> initial }
//   timer startcal_reminder at 12:00 emits startcalreminder in [initial]
//
// Identifiers and keywords are case-insensitive and normalized to lowercase.
// `#` starts a line comment outside string literals.

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smartstate/clock_time.h"

namespace smartstate::protocol {

struct SourceLocation {
  int line = 0;
  int column = 0;
};

enum class ActionKind {
  SendTemplate,
  ComputeWindow,
  RecordStart,
  RecordEnd,
  EvaluateCycle,
  SendSuccessRate,
  ResetCycle,
};

// How evaluate_cycle answers the participant: coaching picks an outcome-specific
// template, neutral always acknowledges without judgement.
enum class FeedbackMode { Neutral, Coaching };

struct ActionSpec {
  ActionKind kind = ActionKind::ResetCycle;
  std::string template_id;  // SendTemplate only
  FeedbackMode feedback = FeedbackMode::Neutral;  // EvaluateCycle only
  SourceLocation loc;
};

struct StateDef {
  std::string name;
  bool is_final = false;
  std::vector<ActionSpec> entry_actions;
  SourceLocation loc;
};

struct TransitionDef {
  std::string source;
  std::string event;
  std::string target;
  std::vector<ActionSpec> actions;
  SourceLocation loc;
};

struct TimerDef {
  std::string name;
  ClockTime fire_at;
  std::string emits;
  std::vector<std::string> active_in;
  SourceLocation loc;
};

struct EventDecl {
  std::string name;
  SourceLocation loc;
};

struct TemplateDef {
  std::string id;
  std::string text;
  SourceLocation loc;
};

struct ProtocolDef {
  std::string protocol_id;
  int version = 0;
  std::string initial_state;
  std::vector<StateDef> states;
  std::vector<EventDecl> events;
  std::vector<TransitionDef> transitions;
  std::vector<TimerDef> timers;
  std::vector<TemplateDef> templates;

  const StateDef* find_state(std::string_view name) const;
  const TransitionDef* find_transition(std::string_view source, std::string_view event) const;
  const TemplateDef* find_template(std::string_view id) const;
  const TimerDef* find_timer(std::string_view name) const;
  bool has_event(std::string_view name) const;
};

enum class Severity { Error, Warning };

struct Diagnostic {
  Severity severity = Severity::Error;
  std::string code;
  std::string message;
  SourceLocation loc;
};

struct ParseResult {
  std::optional<ProtocolDef> protocol;
  std::vector<Diagnostic> diagnostics;

  bool ok() const { return protocol.has_value(); }
};

// Reserved names shared between protocols and the runtime.
inline constexpr std::string_view kCycleEndEvent = "cycle_end";
inline constexpr std::string_view kUnrecognizedTemplate = "unrecognized";
inline constexpr std::string_view kLateStartTemplate = "late_start";
inline constexpr std::string_view kSuccessRateTemplate = "success_rate";
inline constexpr std::string_view kNeutralAckTemplate = "ack_neutral";

// Placeholders the runtime knows how to fill.
std::span<const std::string_view> known_placeholders();

// `{name}` placeholders in order of appearance (duplicates kept).
std::vector<std::string> template_placeholders(std::string_view text);

ParseResult parse_protocol(std::string_view source);

// Structural invariants plus reachability and dead-end checks. Warnings
// (unused declarations) do not block deployment; errors do.
std::vector<Diagnostic> validate_protocol(const ProtocolDef& def);

bool has_errors(std::span<const Diagnostic> diagnostics);

// Canonical DSL text; parse_protocol(pretty_print(d)) is structurally equal to d.
std::string pretty_print(const ProtocolDef& def);

// Equality ignoring source locations and transition declaration order.
bool structurally_equal(const ProtocolDef& a, const ProtocolDef& b);

struct DotOptions {
  std::string highlight_state;
};

// Graphviz digraph: one node per state, one solid edge per transition and
// one dashed edge per (timer, active state) pair.
std::string render_dot(const ProtocolDef& def, const DotOptions& options = {});

std::string format_diagnostic(const Diagnostic& d);

const char* to_string(ActionKind kind);

}  // namespace smartstate::protocol
