#include "smartstate/protocol.h"

#include <algorithm>
#include <array>
#include <cctype>
#include <deque>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

namespace smartstate::protocol {

namespace {

constexpr std::array<std::string_view, 8> kPlaceholders = {
    "start", "end", "window_end", "ok_from", "ok_to", "duration", "success_rate", "latest_end"};

constexpr std::array<std::string_view, 4> kCoachingTemplates = {
    "good_window", "too_short_info", "too_long_info", "late_end_info"};

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool is_identifier(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_';
  });
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

enum class Tok { Ident, Int, Time, String, LBrace, RBrace, LBracket, RBracket, Comma, Semi, Arrow, End };

struct Token {
  Tok kind = Tok::End;
  std::string text;
  SourceLocation loc;
};

class Lexer {
 public:
  Lexer(std::string_view src, std::vector<Diagnostic>& diags) : src_(src), diags_(diags) {}

  std::vector<Token> run() {
    std::vector<Token> out;
    for (;;) {
      skip_space_and_comments();
      if (pos_ >= src_.size()) {
        out.push_back({Tok::End, "", here()});
        return out;
      }
      const SourceLocation loc = here();
      const char c = src_[pos_];
      if (std::isalnum(static_cast<unsigned char>(c)) || c == '_') {
        out.push_back(word(loc));
      } else if (c == '"') {
        if (auto t = string_literal(loc)) out.push_back(std::move(*t));
      } else if (c == '-' && pos_ + 1 < src_.size() && src_[pos_ + 1] == '>') {
        advance();
        advance();
        out.push_back({Tok::Arrow, "->", loc});
      } else {
        Tok kind = Tok::End;
        switch (c) {
          case '{': kind = Tok::LBrace; break;
          case '}': kind = Tok::RBrace; break;
          case '[': kind = Tok::LBracket; break;
          case ']': kind = Tok::RBracket; break;
          case ',': kind = Tok::Comma; break;
          case ';': kind = Tok::Semi; break;
          default: break;
        }
        advance();
        if (kind == Tok::End) {
          diags_.push_back({Severity::Error, "SYNTAX",
                            "unexpected character '" + printable(c) + "'", loc});
        } else {
          out.push_back({kind, std::string(1, c), loc});
        }
      }
    }
  }

 private:
  static std::string printable(char c) {
    if (static_cast<unsigned char>(c) < 0x20 || static_cast<unsigned char>(c) >= 0x7f) {
      char buf[8];
      std::snprintf(buf, sizeof buf, "\\x%02x", static_cast<unsigned char>(c));
      return buf;
    }
    return std::string(1, c);
  }

  SourceLocation here() const { return {line_, col_}; }

  void advance() {
    if (src_[pos_] == '\n') {
      ++line_;
      col_ = 1;
    } else {
      ++col_;
    }
    ++pos_;
  }

  void skip_space_and_comments() {
    while (pos_ < src_.size()) {
      const char c = src_[pos_];
      if (c == '#') {
        while (pos_ < src_.size() && src_[pos_] != '\n') advance();
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        advance();
      } else {
        return;
      }
    }
  }

  Token word(SourceLocation loc) {
    const std::size_t begin = pos_;
    while (pos_ < src_.size() &&
           (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_')) {
      advance();
    }
    std::string text(src_.substr(begin, pos_ - begin));
    const bool digits = std::all_of(text.begin(), text.end(), [](char c) { return c >= '0' && c <= '9'; });
    if (digits && pos_ < src_.size() && src_[pos_] == ':') {
      advance();
      const std::size_t mbegin = pos_;
      while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) advance();
      text += ':';
      text += src_.substr(mbegin, pos_ - mbegin);
      return {Tok::Time, text, loc};
    }
    if (digits) return {Tok::Int, text, loc};
    return {Tok::Ident, lower(text), loc};
  }

  std::optional<Token> string_literal(SourceLocation loc) {
    advance();  // opening quote
    std::string text;
    while (pos_ < src_.size()) {
      const char c = src_[pos_];
      if (c == '"') {
        advance();
        return Token{Tok::String, text, loc};
      }
      if (c == '\n') break;
      if (c == '\\' && pos_ + 1 < src_.size()) {
        advance();
        const char e = src_[pos_];
        if (e == 'n') {
          text += '\n';
        } else if (e == '"' || e == '\\') {
          text += e;
        } else {
          diags_.push_back({Severity::Error, "SYNTAX", "unknown escape sequence in string", here()});
          text += e;
        }
        advance();
        continue;
      }
      text += c;
      advance();
    }
    diags_.push_back({Severity::Error, "SYNTAX", "unterminated string literal", loc});
    return std::nullopt;
  }

  std::string_view src_;
  std::vector<Diagnostic>& diags_;
  std::size_t pos_ = 0;
  int line_ = 1;
  int col_ = 1;
};

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct SyntaxError {
  Diagnostic diag;
};

class Parser {
 public:
  Parser(std::vector<Token> toks, std::vector<Diagnostic>& diags)
      : toks_(std::move(toks)), diags_(diags) {}

  ProtocolDef run() {
    ProtocolDef def;
    bool header_seen = false;
    std::vector<SourceLocation> initial_markers;
    while (peek().kind != Tok::End) {
      const std::size_t start = pos_;
      try {
        const Token& t = peek();
        if (t.kind != Tok::Ident) fail(t, "expected a declaration");
        if (t.text == "protocol") {
          const Token kw = take();
          if (header_seen) {
            diags_.push_back({Severity::Error, "DUPLICATE_HEADER", "protocol header declared twice", kw.loc});
          }
          header_seen = true;
          def.protocol_id = expect_ident("protocol id").text;
          expect_keyword("version");
          const Token v = expect(Tok::Int, "version number");
          def.version = std::stoi(v.text);
        } else if (t.text == "event") {
          take();
          do {
            const Token e = expect_ident("event name");
            def.events.push_back({e.text, e.loc});
          } while (accept(Tok::Comma));
        } else if (t.text == "template") {
          take();
          const Token id = expect_ident("template id");
          const Token text = expect(Tok::String, "template text");
          def.templates.push_back({id.text, text.text, id.loc});
        } else if (t.text == "initial" || t.text == "final" || t.text == "state") {
          parse_state(def, initial_markers);
        } else if (t.text == "timer") {
          parse_timer(def);
        } else {
          fail(t, "unknown declaration '" + t.text + "'");
        }
      } catch (const SyntaxError& e) {
        diags_.push_back(e.diag);
        if (pos_ == start) take();
        synchronize();
      }
    }
    if (!header_seen) {
      diags_.push_back({Severity::Error, "MISSING_HEADER",
                        "missing 'protocol <id> version <n>' header", {1, 1}});
    }
    if (initial_markers.size() > 1) {
      for (std::size_t i = 1; i < initial_markers.size(); ++i) {
        diags_.push_back({Severity::Error, "MULTIPLE_INITIAL_STATES",
                          "more than one state is marked initial", initial_markers[i]});
      }
    }
    return def;
  }

 private:
  const Token& peek(std::size_t ahead = 0) const {
    return toks_[std::min(pos_ + ahead, toks_.size() - 1)];
  }

  Token take() {
    Token t = peek();
    if (pos_ < toks_.size() - 1) ++pos_;
    return t;
  }

  bool accept(Tok kind) {
    if (peek().kind == kind) {
      take();
      return true;
    }
    return false;
  }

  [[noreturn]] void fail(const Token& t, const std::string& what) {
    if (t.kind == Tok::End && !open_braces_.empty()) {
      throw SyntaxError{{Severity::Error, "UNCLOSED_BLOCK", "block opened here is never closed",
                         open_braces_.back()}};
    }
    const std::string found = t.kind == Tok::End ? "end of input" : "'" + t.text + "'";
    throw SyntaxError{{Severity::Error, "SYNTAX", what + ", found " + found, t.loc}};
  }

  Token expect(Tok kind, const std::string& what) {
    if (peek().kind != kind) fail(peek(), "expected " + what);
    return take();
  }

  Token expect_ident(const std::string& what) { return expect(Tok::Ident, what); }

  void expect_keyword(std::string_view kw) {
    if (peek().kind != Tok::Ident || peek().text != kw) fail(peek(), "expected '" + std::string(kw) + "'");
    take();
  }

  void open_brace() { open_braces_.push_back(expect(Tok::LBrace, "'{'").loc); }

  void close_brace() {
    expect(Tok::RBrace, "'}'");
    open_braces_.pop_back();
  }

  // Skip to the next top-level declaration keyword.
  void synchronize() {
    static const std::set<std::string> kTopLevel = {"protocol", "event", "template", "initial",
                                                    "final", "state", "timer"};
    int depth = static_cast<int>(open_braces_.size());
    open_braces_.clear();
    while (peek().kind != Tok::End) {
      const Token& t = peek();
      if (t.kind == Tok::LBrace) ++depth;
      if (t.kind == Tok::RBrace) depth = std::max(0, depth - 1);
      if (depth == 0 && t.kind == Tok::Ident && kTopLevel.count(t.text)) return;
      take();
      if (depth == 0 && t.kind == Tok::RBrace) return;
    }
  }

  void parse_state(ProtocolDef& def, std::vector<SourceLocation>& initial_markers) {
    StateDef state;
    bool is_initial = false;
    SourceLocation first = peek().loc;
    while (peek().kind == Tok::Ident && (peek().text == "initial" || peek().text == "final")) {
      const Token m = take();
      if (m.text == "initial") is_initial = true;
      if (m.text == "final") state.is_final = true;
    }
    expect_keyword("state");
    const Token name = expect_ident("state name");
    state.name = name.text;
    state.loc = name.loc;
    if (is_initial) {
      initial_markers.push_back(first);
      if (def.initial_state.empty()) def.initial_state = state.name;
    }
    if (peek().kind == Tok::LBrace) {
      open_brace();
      while (peek().kind != Tok::RBrace) {
        const Token& t = peek();
        if (t.kind == Tok::Ident && t.text == "entry") {
          take();
          auto actions = parse_action_block();
          state.entry_actions.insert(state.entry_actions.end(), actions.begin(), actions.end());
        } else if (t.kind == Tok::Ident && t.text == "on") {
          const Token on = take();
          TransitionDef tr;
          tr.source = state.name;
          tr.event = expect_ident("event name").text;
          expect(Tok::Arrow, "'->'");
          tr.target = expect_ident("target state").text;
          tr.loc = on.loc;
          if (peek().kind == Tok::LBrace) tr.actions = parse_action_block();
          def.transitions.push_back(std::move(tr));
        } else {
          fail(t, "expected 'entry', 'on' or '}' in state block");
        }
      }
      close_brace();
    }
    def.states.push_back(std::move(state));
  }

  std::vector<ActionSpec> parse_action_block() {
    std::vector<ActionSpec> out;
    open_brace();
    while (peek().kind != Tok::RBrace) {
      if (accept(Tok::Semi)) continue;
      const Token t = expect_ident("action");
      ActionSpec a;
      a.loc = t.loc;
      if (t.text == "send") {
        a.kind = ActionKind::SendTemplate;
        a.template_id = expect_ident("template id after 'send'").text;
      } else if (t.text == "compute_window") {
        a.kind = ActionKind::ComputeWindow;
      } else if (t.text == "record_start") {
        a.kind = ActionKind::RecordStart;
      } else if (t.text == "record_end") {
        a.kind = ActionKind::RecordEnd;
      } else if (t.text == "evaluate_cycle") {
        a.kind = ActionKind::EvaluateCycle;
        const Token mode = expect_ident("feedback mode ('coaching' or 'neutral')");
        if (mode.text == "coaching") {
          a.feedback = FeedbackMode::Coaching;
        } else if (mode.text == "neutral") {
          a.feedback = FeedbackMode::Neutral;
        } else {
          throw SyntaxError{{Severity::Error, "BAD_ACTION_PARAMETER",
                             "evaluate_cycle mode must be 'coaching' or 'neutral'", mode.loc}};
        }
      } else if (t.text == "send_success_rate") {
        a.kind = ActionKind::SendSuccessRate;
      } else if (t.text == "reset_cycle") {
        a.kind = ActionKind::ResetCycle;
      } else {
        throw SyntaxError{{Severity::Error, "UNKNOWN_ACTION", "unknown action '" + t.text + "'", t.loc}};
      }
      out.push_back(std::move(a));
    }
    close_brace();
    return out;
  }

  void parse_timer(ProtocolDef& def) {
    take();
    TimerDef timer;
    const Token name = expect_ident("timer name");
    timer.name = name.text;
    timer.loc = name.loc;
    expect_keyword("at");
    const Token at = peek();
    if (at.kind != Tok::Time) fail(at, "expected HH:MM time");
    take();
    if (auto t = parse_hhmm(at.text)) {
      timer.fire_at = *t;
    } else {
      diags_.push_back({Severity::Error, "INVALID_TIME", "'" + at.text + "' is not a valid 24-hour time", at.loc});
    }
    expect_keyword("emits");
    timer.emits = expect_ident("event name").text;
    expect_keyword("in");
    expect(Tok::LBracket, "'['");
    if (peek().kind != Tok::RBracket) {
      do {
        timer.active_in.push_back(expect_ident("state name").text);
      } while (accept(Tok::Comma));
    }
    expect(Tok::RBracket, "']'");
    def.timers.push_back(std::move(timer));
  }

  std::vector<Token> toks_;
  std::vector<Diagnostic>& diags_;
  std::size_t pos_ = 0;
  std::vector<SourceLocation> open_braces_;
};

// ---------------------------------------------------------------------------
// Structural checks shared by parse and validate
// ---------------------------------------------------------------------------

void add(std::vector<Diagnostic>& out, Severity sev, std::string code, std::string msg, SourceLocation loc) {
  out.push_back({sev, std::move(code), std::move(msg), loc});
}

template <typename Range, typename NameOf>
void check_duplicates(const Range& items, NameOf name_of, const char* code, const char* what,
                      std::vector<Diagnostic>& out) {
  std::set<std::string> seen;
  for (const auto& item : items) {
    const auto& [name, loc] = name_of(item);
    if (!seen.insert(name).second) {
      add(out, Severity::Error, code, std::string("duplicate ") + what + " '" + name + "'", loc);
    }
    if (!is_identifier(name)) {
      add(out, Severity::Error, "INVALID_IDENTIFIER",
          std::string(what) + " name '" + name + "' must match [a-z0-9_]+", loc);
    }
  }
}

void check_actions(const ProtocolDef& def, const std::vector<ActionSpec>& actions,
                   std::vector<Diagnostic>& out) {
  for (const auto& a : actions) {
    switch (a.kind) {
      case ActionKind::SendTemplate:
        if (a.template_id.empty()) {
          add(out, Severity::Error, "BAD_ACTION_PARAMETER", "send requires a template id", a.loc);
        } else if (!def.find_template(a.template_id)) {
          add(out, Severity::Error, "UNKNOWN_TEMPLATE", "template '" + a.template_id + "' is not declared", a.loc);
        }
        break;
      case ActionKind::EvaluateCycle:
        if (a.feedback == FeedbackMode::Coaching) {
          for (auto id : kCoachingTemplates) {
            if (!def.find_template(id)) {
              add(out, Severity::Error, "MISSING_TEMPLATE",
                  "evaluate_cycle coaching requires template '" + std::string(id) + "'", a.loc);
            }
          }
        } else if (!def.find_template(kNeutralAckTemplate)) {
          add(out, Severity::Error, "MISSING_TEMPLATE",
              "evaluate_cycle neutral requires template 'ack_neutral'", a.loc);
        }
        break;
      case ActionKind::ComputeWindow:
        if (!def.find_template(kLateStartTemplate)) {
          add(out, Severity::Error, "MISSING_TEMPLATE", "compute_window requires template 'late_start'", a.loc);
        }
        break;
      case ActionKind::SendSuccessRate:
        if (!def.find_template(kSuccessRateTemplate)) {
          add(out, Severity::Error, "MISSING_TEMPLATE",
              "send_success_rate requires template 'success_rate'", a.loc);
        }
        break;
      default:
        break;
    }
  }
}

std::vector<Diagnostic> structural_diagnostics(const ProtocolDef& def) {
  std::vector<Diagnostic> out;
  if (!def.protocol_id.empty() && !is_identifier(def.protocol_id)) {
    add(out, Severity::Error, "INVALID_IDENTIFIER", "protocol id must match [a-z0-9_]+", {1, 1});
  }
  check_duplicates(def.states, [](const StateDef& s) { return std::tie(s.name, s.loc); },
                   "DUPLICATE_STATE", "state", out);
  check_duplicates(def.events, [](const EventDecl& e) { return std::tie(e.name, e.loc); },
                   "DUPLICATE_EVENT", "event", out);
  check_duplicates(def.templates, [](const TemplateDef& t) { return std::tie(t.id, t.loc); },
                   "DUPLICATE_TEMPLATE", "template", out);
  check_duplicates(def.timers, [](const TimerDef& t) { return std::tie(t.name, t.loc); },
                   "DUPLICATE_TIMER", "timer", out);

  if (def.initial_state.empty()) {
    add(out, Severity::Error, "NO_INITIAL_STATE", "no state is marked initial", {1, 1});
  } else if (!def.find_state(def.initial_state)) {
    add(out, Severity::Error, "NO_INITIAL_STATE",
        "initial state '" + def.initial_state + "' is not declared", {1, 1});
  }

  std::map<std::pair<std::string, std::string>, const TransitionDef*> seen;
  for (const auto& tr : def.transitions) {
    if (!def.find_state(tr.source)) {
      add(out, Severity::Error, "UNDECLARED_STATE", "transition source '" + tr.source + "' is not declared", tr.loc);
    }
    if (!def.find_state(tr.target)) {
      add(out, Severity::Error, "UNDECLARED_STATE", "transition target '" + tr.target + "' is not declared", tr.loc);
    }
    if (!def.has_event(tr.event)) {
      add(out, Severity::Error, "UNDECLARED_EVENT", "event '" + tr.event + "' is not declared", tr.loc);
    }
    auto [it, inserted] = seen.emplace(std::make_pair(tr.source, tr.event), &tr);
    if (!inserted) {
      add(out, Severity::Error, "NONDETERMINISTIC",
          "state '" + tr.source + "' already has a transition on '" + tr.event + "' (line " +
              std::to_string(it->second->loc.line) + ")",
          tr.loc);
    }
    check_actions(def, tr.actions, out);
  }
  for (const auto& s : def.states) check_actions(def, s.entry_actions, out);

  for (const auto& t : def.timers) {
    if (!t.fire_at.valid()) {
      add(out, Severity::Error, "INVALID_TIME", "timer '" + t.name + "' has an invalid fire time", t.loc);
    }
    if (!def.has_event(t.emits)) {
      add(out, Severity::Error, "UNDECLARED_EVENT", "timer emits undeclared event '" + t.emits + "'", t.loc);
    }
    if (t.active_in.empty()) {
      add(out, Severity::Error, "INVALID_TIMER", "timer '" + t.name + "' is not active in any state", t.loc);
    }
    for (const auto& s : t.active_in) {
      if (!def.find_state(s)) {
        add(out, Severity::Error, "UNDECLARED_STATE", "timer references undeclared state '" + s + "'", t.loc);
      }
    }
  }

  if (!def.find_template(kUnrecognizedTemplate)) {
    add(out, Severity::Error, "MISSING_TEMPLATE",
        "template 'unrecognized' is required for replies to unrecognized messages", {1, 1});
  }
  const auto& known = known_placeholders();
  for (const auto& t : def.templates) {
    for (const auto& p : template_placeholders(t.text)) {
      if (std::find(known.begin(), known.end(), p) == known.end()) {
        add(out, Severity::Error, "UNKNOWN_PLACEHOLDER",
            "template '" + t.id + "' uses unknown placeholder {" + p + "}", t.loc);
      }
    }
  }
  return out;
}

bool implicitly_used(std::string_view id) {
  return id == kUnrecognizedTemplate || id.rfind("ambiguous_", 0) == 0 || id.rfind("invalid_", 0) == 0 ||
         id.rfind("unhandled_", 0) == 0;
}

void sort_diagnostics(std::vector<Diagnostic>& diags) {
  std::stable_sort(diags.begin(), diags.end(), [](const Diagnostic& a, const Diagnostic& b) {
    return std::tie(a.loc.line, a.loc.column) < std::tie(b.loc.line, b.loc.column);
  });
}

bool actions_equal(const std::vector<ActionSpec>& a, const std::vector<ActionSpec>& b) {
  return std::equal(a.begin(), a.end(), b.begin(), b.end(), [](const ActionSpec& x, const ActionSpec& y) {
    return x.kind == y.kind && x.template_id == y.template_id &&
           (x.kind != ActionKind::EvaluateCycle || x.feedback == y.feedback);
  });
}

std::string quote_string(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') {
      out += '\\';
      out += c;
    } else if (c == '\n') {
      out += "\\n";
    } else {
      out += c;
    }
  }
  out += '"';
  return out;
}

std::string dot_quote(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  out += '"';
  return out;
}

void print_actions(std::ostringstream& os, const std::vector<ActionSpec>& actions) {
  os << "{ ";
  for (std::size_t i = 0; i < actions.size(); ++i) {
    if (i) os << "; ";
    const auto& a = actions[i];
    os << to_string(a.kind);
    if (a.kind == ActionKind::SendTemplate) os << ' ' << a.template_id;
    if (a.kind == ActionKind::EvaluateCycle) {
      os << (a.feedback == FeedbackMode::Coaching ? " coaching" : " neutral");
    }
  }
  os << (actions.empty() ? "}" : " }");
}

}  // namespace

// ---------------------------------------------------------------------------

const StateDef* ProtocolDef::find_state(std::string_view name) const {
  auto it = std::find_if(states.begin(), states.end(), [&](const StateDef& s) { return s.name == name; });
  return it == states.end() ? nullptr : &*it;
}

const TransitionDef* ProtocolDef::find_transition(std::string_view source, std::string_view event) const {
  auto it = std::find_if(transitions.begin(), transitions.end(), [&](const TransitionDef& t) {
    return t.source == source && t.event == event;
  });
  return it == transitions.end() ? nullptr : &*it;
}

const TemplateDef* ProtocolDef::find_template(std::string_view id) const {
  auto it = std::find_if(templates.begin(), templates.end(), [&](const TemplateDef& t) { return t.id == id; });
  return it == templates.end() ? nullptr : &*it;
}

const TimerDef* ProtocolDef::find_timer(std::string_view name) const {
  auto it = std::find_if(timers.begin(), timers.end(), [&](const TimerDef& t) { return t.name == name; });
  return it == timers.end() ? nullptr : &*it;
}

bool ProtocolDef::has_event(std::string_view name) const {
  return std::any_of(events.begin(), events.end(), [&](const EventDecl& e) { return e.name == name; });
}

std::span<const std::string_view> known_placeholders() { return kPlaceholders; }

std::vector<std::string> template_placeholders(std::string_view text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while ((pos = text.find('{', pos)) != std::string_view::npos) {
    const auto close = text.find('}', pos + 1);
    if (close == std::string_view::npos) break;
    const auto name = text.substr(pos + 1, close - pos - 1);
    if (is_identifier(name)) {
      out.emplace_back(name);
      pos = close + 1;
    } else {
      pos += 1;
    }
  }
  return out;
}

ParseResult parse_protocol(std::string_view source) {
  ParseResult result;
  Lexer lexer(source, result.diagnostics);
  auto tokens = lexer.run();
  Parser parser(std::move(tokens), result.diagnostics);
  ProtocolDef def = parser.run();

  if (!has_errors(result.diagnostics)) {
    auto structural = structural_diagnostics(def);
    result.diagnostics.insert(result.diagnostics.end(), structural.begin(), structural.end());
  }
  sort_diagnostics(result.diagnostics);
  if (!has_errors(result.diagnostics)) result.protocol = std::move(def);
  return result;
}

std::vector<Diagnostic> validate_protocol(const ProtocolDef& def) {
  auto out = structural_diagnostics(def);

  // Breadth-first reachability over the transition graph.
  std::set<std::string> visited;
  if (def.find_state(def.initial_state)) {
    std::deque<std::string> frontier{def.initial_state};
    visited.insert(def.initial_state);
    while (!frontier.empty()) {
      const std::string s = frontier.front();
      frontier.pop_front();
      for (const auto& tr : def.transitions) {
        if (tr.source == s && def.find_state(tr.target) && visited.insert(tr.target).second) {
          frontier.push_back(tr.target);
        }
      }
    }
    for (const auto& s : def.states) {
      if (!visited.count(s.name)) {
        add(out, Severity::Error, "UNREACHABLE_STATE",
            "state '" + s.name + "' cannot be reached from '" + def.initial_state + "'", s.loc);
      }
    }
  }

  for (const auto& s : def.states) {
    if (s.is_final) continue;
    const bool has_out = std::any_of(def.transitions.begin(), def.transitions.end(),
                                     [&](const TransitionDef& t) { return t.source == s.name; });
    const bool has_timer = std::any_of(def.timers.begin(), def.timers.end(), [&](const TimerDef& t) {
      return std::find(t.active_in.begin(), t.active_in.end(), s.name) != t.active_in.end();
    });
    if (!has_out && !has_timer) {
      add(out, Severity::Error, "DEAD_END_STATE",
          "non-final state '" + s.name + "' has no outgoing transition or active timer", s.loc);
    }
  }

  std::set<std::string> used_templates;
  std::set<std::string> used_events;
  bool coaching = false;
  bool neutral = false;
  bool window = false;
  bool rate = false;
  auto scan = [&](const std::vector<ActionSpec>& actions) {
    for (const auto& a : actions) {
      if (a.kind == ActionKind::SendTemplate) used_templates.insert(a.template_id);
      if (a.kind == ActionKind::EvaluateCycle) (a.feedback == FeedbackMode::Coaching ? coaching : neutral) = true;
      if (a.kind == ActionKind::ComputeWindow) window = true;
      if (a.kind == ActionKind::SendSuccessRate) rate = true;
    }
  };
  for (const auto& tr : def.transitions) {
    used_events.insert(tr.event);
    scan(tr.actions);
  }
  for (const auto& s : def.states) scan(s.entry_actions);
  for (const auto& t : def.timers) used_events.insert(t.emits);
  if (coaching) used_templates.insert(kCoachingTemplates.begin(), kCoachingTemplates.end());
  if (neutral) used_templates.emplace(kNeutralAckTemplate);
  if (window) used_templates.emplace(kLateStartTemplate);
  if (rate) used_templates.emplace(kSuccessRateTemplate);

  for (const auto& t : def.templates) {
    if (!used_templates.count(t.id) && !implicitly_used(t.id)) {
      add(out, Severity::Warning, "UNUSED_TEMPLATE", "template '" + t.id + "' is never sent", t.loc);
    }
  }
  for (const auto& e : def.events) {
    if (!used_events.count(e.name)) {
      add(out, Severity::Warning, "UNUSED_EVENT", "event '" + e.name + "' triggers nothing", e.loc);
    }
  }
  sort_diagnostics(out);
  return out;
}

bool has_errors(std::span<const Diagnostic> diagnostics) {
  return std::any_of(diagnostics.begin(), diagnostics.end(),
                     [](const Diagnostic& d) { return d.severity == Severity::Error; });
}

std::string pretty_print(const ProtocolDef& def) {
  std::ostringstream os;
  os << "protocol " << def.protocol_id << " version " << def.version << "\n";
  if (!def.events.empty()) {
    os << "\nevent ";
    for (std::size_t i = 0; i < def.events.size(); ++i) os << (i ? ", " : "") << def.events[i].name;
    os << "\n";
  }
  if (!def.templates.empty()) os << "\n";
  for (const auto& t : def.templates) os << "template " << t.id << ' ' << quote_string(t.text) << "\n";
  for (const auto& s : def.states) {
    os << "\n";
    if (s.name == def.initial_state) os << "initial ";
    if (s.is_final) os << "final ";
    os << "state " << s.name;
    std::vector<const TransitionDef*> outgoing;
    for (const auto& tr : def.transitions) {
      if (tr.source == s.name) outgoing.push_back(&tr);
    }
    if (s.entry_actions.empty() && outgoing.empty()) {
      os << "\n";
      continue;
    }
    os << " {\n";
    if (!s.entry_actions.empty()) {
      os << "  entry ";
      print_actions(os, s.entry_actions);
      os << "\n";
    }
    for (const auto* tr : outgoing) {
      os << "  on " << tr->event << " -> " << tr->target;
      if (!tr->actions.empty()) {
        os << ' ';
        print_actions(os, tr->actions);
      }
      os << "\n";
    }
    os << "}\n";
  }
  if (!def.timers.empty()) os << "\n";
  for (const auto& t : def.timers) {
    os << "timer " << t.name << " at " << format_hhmm(t.fire_at) << " emits " << t.emits << " in [";
    for (std::size_t i = 0; i < t.active_in.size(); ++i) os << (i ? ", " : "") << t.active_in[i];
    os << "]\n";
  }
  return os.str();
}

bool structurally_equal(const ProtocolDef& a, const ProtocolDef& b) {
  if (a.protocol_id != b.protocol_id || a.version != b.version || a.initial_state != b.initial_state) return false;
  if (!std::equal(a.states.begin(), a.states.end(), b.states.begin(), b.states.end(),
                  [](const StateDef& x, const StateDef& y) {
                    return x.name == y.name && x.is_final == y.is_final &&
                           actions_equal(x.entry_actions, y.entry_actions);
                  })) {
    return false;
  }
  if (!std::equal(a.events.begin(), a.events.end(), b.events.begin(), b.events.end(),
                  [](const EventDecl& x, const EventDecl& y) { return x.name == y.name; })) {
    return false;
  }
  if (!std::equal(a.templates.begin(), a.templates.end(), b.templates.begin(), b.templates.end(),
                  [](const TemplateDef& x, const TemplateDef& y) { return x.id == y.id && x.text == y.text; })) {
    return false;
  }
  if (!std::equal(a.timers.begin(), a.timers.end(), b.timers.begin(), b.timers.end(),
                  [](const TimerDef& x, const TimerDef& y) {
                    return x.name == y.name && x.fire_at == y.fire_at && x.emits == y.emits &&
                           x.active_in == y.active_in;
                  })) {
    return false;
  }
  auto sorted = [](const std::vector<TransitionDef>& ts) {
    std::vector<const TransitionDef*> v;
    for (const auto& t : ts) v.push_back(&t);
    std::sort(v.begin(), v.end(), [](const TransitionDef* x, const TransitionDef* y) {
      return std::tie(x->source, x->event) < std::tie(y->source, y->event);
    });
    return v;
  };
  const auto ta = sorted(a.transitions);
  const auto tb = sorted(b.transitions);
  return std::equal(ta.begin(), ta.end(), tb.begin(), tb.end(), [](const TransitionDef* x, const TransitionDef* y) {
    return x->source == y->source && x->event == y->event && x->target == y->target &&
           actions_equal(x->actions, y->actions);
  });
}

std::string render_dot(const ProtocolDef& def, const DotOptions& options) {
  std::ostringstream os;
  os << "digraph " << dot_quote(def.protocol_id) << " {\n";
  os << "  rankdir=LR;\n";
  os << "  node [shape=ellipse, fontname=\"Helvetica\"];\n";
  os << "  edge [fontname=\"Helvetica\", fontsize=10];\n";
  for (const auto& s : def.states) {
    std::vector<std::string> attrs;
    if (s.name == def.initial_state) {
      attrs.emplace_back("peripheries=2");
      attrs.emplace_back("style=bold");
    }
    if (s.is_final) attrs.emplace_back("shape=doublecircle");
    if (!options.highlight_state.empty() && s.name == options.highlight_state) {
      attrs.emplace_back("color=red");
      attrs.emplace_back("fontcolor=red");
    }
    os << "  " << dot_quote(s.name);
    if (!attrs.empty()) {
      os << " [";
      for (std::size_t i = 0; i < attrs.size(); ++i) os << (i ? ", " : "") << attrs[i];
      os << "]";
    }
    os << ";\n";
  }
  for (const auto& tr : def.transitions) {
    os << "  " << dot_quote(tr.source) << " -> " << dot_quote(tr.target) << " [label=" << dot_quote(tr.event)
       << "];\n";
  }
  for (const auto& t : def.timers) {
    for (const auto& s : t.active_in) {
      const TransitionDef* tr = def.find_transition(s, t.emits);
      const std::string& target = tr ? tr->target : s;
      os << "  " << dot_quote(s) << " -> " << dot_quote(target)
         << " [style=dashed, label=" << dot_quote(t.name + " @" + format_hhmm(t.fire_at)) << "];\n";
    }
  }
  os << "}\n";
  return os.str();
}

std::string format_diagnostic(const Diagnostic& d) {
  std::ostringstream os;
  os << d.loc.line << ':' << d.loc.column << ": " << (d.severity == Severity::Error ? "error" : "warning") << " ["
     << d.code << "] " << d.message;
  return os.str();
}

const char* to_string(ActionKind kind) {
  switch (kind) {
    case ActionKind::SendTemplate: return "send";
    case ActionKind::ComputeWindow: return "compute_window";
    case ActionKind::RecordStart: return "record_start";
    case ActionKind::RecordEnd: return "record_end";
    case ActionKind::EvaluateCycle: return "evaluate_cycle";
    case ActionKind::SendSuccessRate: return "send_success_rate";
    case ActionKind::ResetCycle: return "reset_cycle";
  }
  return "?";
}

}  // namespace smartstate::protocol
