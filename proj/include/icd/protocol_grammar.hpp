#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

// Response grammar shared by live model outputs, scripted policies and
// exemplar files. The full rules are documented in docs/response_grammar.md.

namespace icd::protocol {

// Section headings. A heading only counts when it starts a line.
inline constexpr std::string_view kRiskHeading = "Risk/Distraction Analysis:";
inline constexpr std::string_view kPlanningHeading = "Action Planning:";

// Exact risk-section body of a benign response.
inline constexpr std::string_view kBenignSentinel = "Nothing atypical identified";

// Terminal entry of every choice list in the two-round protocol.
inline constexpr std::string_view kNoneMatchSentence =
    "None of the other options match the correct element.";

enum class Protocol { Som, TwoRound, Grounding };

// Environment-affecting action kinds (transition table, gold plans).
enum class ActionKind { Click, Type };

struct ClickAction {
  int som_id = 0;
  bool operator==(const ClickAction&) const = default;
};
struct TypeAction {
  int som_id = 0;
  std::string text;
  bool operator==(const TypeAction&) const = default;
};
// Two-round protocol: act on a lettered choice.
struct ChoiceAction {
  char letter = 'A';  // uppercase A-Z
  ActionKind operation = ActionKind::Click;
  std::string text;  // only for Type
  bool operator==(const ChoiceAction&) const = default;
};
// Two-round protocol: the "no option matches" terminal.
struct NoneMatchAction {
  bool operator==(const NoneMatchAction&) const = default;
};
struct StopAction {
  std::string answer;
  bool operator==(const StopAction&) const = default;
};

using Action =
    std::variant<ClickAction, TypeAction, ChoiceAction, NoneMatchAction, StopAction>;

// Canonical action-line syntax:
//   CLICK [k]
//   TYPE [k] ["text"]
//   CHOICE <letter> CLICK
//   CHOICE <letter> TYPE ["text"]
//   NONE
//   STOP ["answer"]
// Quoted strings escape backslash and double quote.
std::string format_action_line(const Action& action);

enum class ParseErrorKind { NoActionLine, MalformedAction };

std::string_view parse_error_name(ParseErrorKind kind);

// Half-open byte range into ParsedResponse::raw.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool operator==(const Span&) const = default;
};

struct ParsedResponse {
  std::string raw;
  std::optional<Span> defense_span;
  std::optional<Span> planning_span;
  std::vector<int> flagged_ids;  // ids named after "ignore" in the risk section
  std::optional<Action> action;  // absent iff error is set
  std::optional<ParseErrorKind> error;
  std::string error_detail;

  bool ok() const { return action.has_value(); }
};

// Locates the sections by exact headings, parses the final non-empty line as
// the action, and extracts flagged ids. Parse failures are recorded in
// `error`, never thrown: a bad model response is a scored step failure.
ParsedResponse parse_response(std::string raw, Protocol protocol);

// Body text of a section span, with the heading and surrounding whitespace
// stripped.
std::string section_body(const ParsedResponse& response, const Span& span);

struct ResponseSections {
  std::optional<std::string> risk;      // body without the heading
  std::optional<std::string> planning;  // body without the heading
};

// Canonical response text: one line per section in the requested order, then
// the action line, with a single trailing newline. parse_response on the
// result reproduces the inputs byte-exactly.
std::string render_response(const ResponseSections& sections, const Action& action,
                            bool defense_first);

}  // namespace icd::protocol
