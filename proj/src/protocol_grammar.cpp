#include "icd/protocol_grammar.hpp"

#include <algorithm>
#include <cctype>

namespace icd::protocol {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r'; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && (is_space(s.front()) || s.front() == '\n')) s.remove_prefix(1);
  while (!s.empty() && (is_space(s.back()) || s.back() == '\n')) s.remove_suffix(1);
  return s;
}

std::string quote(const std::string& s) {
  std::string out;
  out.reserve(s.size() + 2);
  out.push_back('"');
  for (char c : s) {
    if (c == '\\' || c == '"') out.push_back('\\');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

// Parses a "..." literal starting at pos; advances pos past the closing quote.
std::optional<std::string> parse_quoted(std::string_view s, std::size_t& pos) {
  if (pos >= s.size() || s[pos] != '"') return std::nullopt;
  ++pos;
  std::string out;
  while (pos < s.size()) {
    char c = s[pos];
    if (c == '\\') {
      if (pos + 1 >= s.size()) return std::nullopt;
      char next = s[pos + 1];
      if (next != '\\' && next != '"') return std::nullopt;
      out.push_back(next);
      pos += 2;
      continue;
    }
    if (c == '"') {
      ++pos;
      return out;
    }
    out.push_back(c);
    ++pos;
  }
  return std::nullopt;
}

// Parses ["..."] starting at pos.
std::optional<std::string> parse_bracket_quoted(std::string_view s, std::size_t& pos) {
  if (pos >= s.size() || s[pos] != '[') return std::nullopt;
  ++pos;
  auto text = parse_quoted(s, pos);
  if (!text) return std::nullopt;
  if (pos >= s.size() || s[pos] != ']') return std::nullopt;
  ++pos;
  return text;
}

std::optional<int> parse_bracket_int(std::string_view s, std::size_t& pos) {
  if (pos >= s.size() || s[pos] != '[') return std::nullopt;
  ++pos;
  std::size_t start = pos;
  while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) ++pos;
  if (pos == start) return std::nullopt;
  int value = 0;
  for (std::size_t i = start; i < pos; ++i) value = value * 10 + (s[i] - '0');
  if (pos >= s.size() || s[pos] != ']') return std::nullopt;
  ++pos;
  return value;
}

bool skip_one_space(std::string_view s, std::size_t& pos) {
  if (pos < s.size() && s[pos] == ' ') {
    ++pos;
    return true;
  }
  return false;
}

bool at_end(std::string_view s, std::size_t pos) { return trim(s.substr(pos)).empty(); }

std::string first_word(std::string_view line) {
  std::size_t end = 0;
  while (end < line.size() && !is_space(line[end])) ++end;
  return std::string(line.substr(0, end));
}

struct ActionParse {
  std::optional<Action> action;
  std::string detail;
};

ActionParse parse_action_line(std::string_view line) {
  std::string word = first_word(line);
  std::size_t pos = word.size();

  if (word == "CLICK") {
    if (!skip_one_space(line, pos)) return {std::nullopt, "CLICK needs [id]"};
    auto id = parse_bracket_int(line, pos);
    if (!id || !at_end(line, pos)) return {std::nullopt, "CLICK needs [id]"};
    return {ClickAction{*id}, ""};
  }
  if (word == "TYPE") {
    if (!skip_one_space(line, pos)) return {std::nullopt, "TYPE needs [id] [\"text\"]"};
    auto id = parse_bracket_int(line, pos);
    if (!id || !skip_one_space(line, pos)) return {std::nullopt, "TYPE needs [id] [\"text\"]"};
    auto text = parse_bracket_quoted(line, pos);
    if (!text || !at_end(line, pos)) return {std::nullopt, "TYPE needs [id] [\"text\"]"};
    return {TypeAction{*id, *text}, ""};
  }
  if (word == "CHOICE") {
    if (!skip_one_space(line, pos) || pos >= line.size())
      return {std::nullopt, "CHOICE needs a letter"};
    char letter = line[pos];
    if (letter < 'A' || letter > 'Z') return {std::nullopt, "choice letter must be A-Z"};
    ++pos;
    if (!skip_one_space(line, pos)) return {std::nullopt, "CHOICE needs an operation"};
    std::string op = first_word(line.substr(pos));
    pos += op.size();
    if (op == "CLICK") {
      if (!at_end(line, pos)) return {std::nullopt, "trailing text after CHOICE CLICK"};
      return {ChoiceAction{letter, ActionKind::Click, ""}, ""};
    }
    if (op == "TYPE") {
      if (!skip_one_space(line, pos)) return {std::nullopt, "CHOICE TYPE needs [\"text\"]"};
      auto text = parse_bracket_quoted(line, pos);
      if (!text || !at_end(line, pos)) return {std::nullopt, "CHOICE TYPE needs [\"text\"]"};
      return {ChoiceAction{letter, ActionKind::Type, *text}, ""};
    }
    return {std::nullopt, "choice operation must be CLICK or TYPE"};
  }
  if (word == "NONE") {
    if (!at_end(line, pos)) return {std::nullopt, "trailing text after NONE"};
    return {NoneMatchAction{}, ""};
  }
  if (word == "STOP") {
    if (!skip_one_space(line, pos)) return {std::nullopt, "STOP needs [\"answer\"]"};
    auto answer = parse_bracket_quoted(line, pos);
    if (!answer || !at_end(line, pos)) return {std::nullopt, "STOP needs [\"answer\"]"};
    return {StopAction{*answer}, ""};
  }
  return {std::nullopt, "not an action line"};
}

bool action_keyword(std::string_view line) {
  std::string word = first_word(line);
  return word == "CLICK" || word == "TYPE" || word == "CHOICE" || word == "NONE" ||
         word == "STOP";
}

bool allowed_for(const Action& action, Protocol protocol) {
  switch (protocol) {
    case Protocol::Som:
      return std::holds_alternative<ClickAction>(action) ||
             std::holds_alternative<TypeAction>(action) ||
             std::holds_alternative<StopAction>(action);
    case Protocol::TwoRound:
      return std::holds_alternative<ChoiceAction>(action) ||
             std::holds_alternative<NoneMatchAction>(action);
    case Protocol::Grounding:
      return std::holds_alternative<ClickAction>(action);
  }
  return false;
}

struct Line {
  std::size_t begin = 0;  // byte offset of first character
  std::size_t end = 0;    // byte offset one past last character (excl. '\n')
};

std::vector<Line> split_lines(std::string_view raw) {
  std::vector<Line> lines;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= raw.size(); ++i) {
    if (i == raw.size() || raw[i] == '\n') {
      lines.push_back({start, i});
      start = i + 1;
    }
  }
  return lines;
}

char lower(char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); }

std::size_t find_case_insensitive(std::string_view haystack, std::string_view needle) {
  if (needle.empty() || haystack.size() < needle.size()) return std::string_view::npos;
  for (std::size_t i = 0; i + needle.size() <= haystack.size(); ++i) {
    bool hit = true;
    for (std::size_t j = 0; j < needle.size(); ++j) {
      if (lower(haystack[i + j]) != lower(needle[j])) {
        hit = false;
        break;
      }
    }
    if (hit) return i;
  }
  return std::string_view::npos;
}

// All integers (bracketed or bare) after the first "ignore", deduplicated in
// first-appearance order.
std::vector<int> extract_flagged_ids(std::string_view risk_text) {
  std::vector<int> ids;
  std::size_t anchor = find_case_insensitive(risk_text, "ignore");
  if (anchor == std::string_view::npos) return ids;
  std::string_view rest = risk_text.substr(anchor);
  std::size_t i = 0;
  while (i < rest.size()) {
    if (std::isdigit(static_cast<unsigned char>(rest[i]))) {
      int value = 0;
      while (i < rest.size() && std::isdigit(static_cast<unsigned char>(rest[i]))) {
        value = value * 10 + (rest[i] - '0');
        ++i;
      }
      if (std::find(ids.begin(), ids.end(), value) == ids.end()) ids.push_back(value);
    } else {
      ++i;
    }
  }
  return ids;
}

}  // namespace

std::string format_action_line(const Action& action) {
  struct Visitor {
    std::string operator()(const ClickAction& a) const {
      return "CLICK [" + std::to_string(a.som_id) + "]";
    }
    std::string operator()(const TypeAction& a) const {
      return "TYPE [" + std::to_string(a.som_id) + "] [" + quote(a.text) + "]";
    }
    std::string operator()(const ChoiceAction& a) const {
      std::string out = "CHOICE ";
      out.push_back(a.letter);
      if (a.operation == ActionKind::Click) return out + " CLICK";
      return out + " TYPE [" + quote(a.text) + "]";
    }
    std::string operator()(const NoneMatchAction&) const { return "NONE"; }
    std::string operator()(const StopAction& a) const { return "STOP [" + quote(a.answer) + "]"; }
  };
  return std::visit(Visitor{}, action);
}

std::string_view parse_error_name(ParseErrorKind kind) {
  switch (kind) {
    case ParseErrorKind::NoActionLine: return "no_action_line";
    case ParseErrorKind::MalformedAction: return "malformed_action";
  }
  return "malformed_action";
}

ParsedResponse parse_response(std::string raw, Protocol protocol) {
  ParsedResponse result;
  result.raw = std::move(raw);
  std::string_view text = result.raw;

  auto lines = split_lines(text);

  // Final non-empty line is the action candidate.
  std::optional<std::size_t> action_line;
  for (std::size_t i = lines.size(); i-- > 0;) {
    if (!trim(text.substr(lines[i].begin, lines[i].end - lines[i].begin)).empty()) {
      action_line = i;
      break;
    }
  }
  if (!action_line) {
    result.error = ParseErrorKind::NoActionLine;
    result.error_detail = "empty response";
    return result;
  }

  // Section boundaries: a heading line opens a section that runs to the next
  // heading or the action line.
  std::optional<std::size_t> risk_start, planning_start;
  for (std::size_t i = 0; i < *action_line; ++i) {
    std::string_view line = text.substr(lines[i].begin, lines[i].end - lines[i].begin);
    if (!risk_start && line.starts_with(kRiskHeading)) risk_start = i;
    if (!planning_start && line.starts_with(kPlanningHeading)) planning_start = i;
  }

  auto close_section = [&](std::size_t start_line) -> Span {
    std::size_t end_line = *action_line;  // exclusive
    for (std::size_t i = start_line + 1; i < *action_line; ++i) {
      std::string_view line = text.substr(lines[i].begin, lines[i].end - lines[i].begin);
      if (line.starts_with(kRiskHeading) || line.starts_with(kPlanningHeading)) {
        end_line = i;
        break;
      }
    }
    // Drop trailing blank lines from the span.
    while (end_line > start_line + 1) {
      const Line& prev = lines[end_line - 1];
      if (trim(text.substr(prev.begin, prev.end - prev.begin)).empty())
        --end_line;
      else
        break;
    }
    return Span{lines[start_line].begin, lines[end_line - 1].end};
  };

  if (risk_start) result.defense_span = close_section(*risk_start);
  if (planning_start) result.planning_span = close_section(*planning_start);

  if (result.defense_span) {
    std::string_view risk = text.substr(result.defense_span->begin,
                                        result.defense_span->end - result.defense_span->begin);
    result.flagged_ids = extract_flagged_ids(risk);
  }

  std::string_view line =
      trim(text.substr(lines[*action_line].begin, lines[*action_line].end - lines[*action_line].begin));
  if (!action_keyword(line)) {
    result.error = ParseErrorKind::NoActionLine;
    result.error_detail = "final line is not an action: " + std::string(line.substr(0, 40));
    return result;
  }
  ActionParse parsed = parse_action_line(line);
  if (!parsed.action) {
    result.error = ParseErrorKind::MalformedAction;
    result.error_detail = parsed.detail;
    return result;
  }
  if (!allowed_for(*parsed.action, protocol)) {
    result.error = ParseErrorKind::MalformedAction;
    result.error_detail = "action not allowed in this protocol: " + std::string(line);
    return result;
  }
  result.action = std::move(parsed.action);
  return result;
}

std::string section_body(const ParsedResponse& response, const Span& span) {
  std::string_view text = response.raw;
  std::string_view section = text.substr(span.begin, span.end - span.begin);
  if (section.starts_with(kRiskHeading))
    section.remove_prefix(kRiskHeading.size());
  else if (section.starts_with(kPlanningHeading))
    section.remove_prefix(kPlanningHeading.size());
  return std::string(trim(section));
}

std::string render_response(const ResponseSections& sections, const Action& action,
                            bool defense_first) {
  std::string risk, planning;
  if (sections.risk) risk = std::string(kRiskHeading) + " " + *sections.risk + "\n";
  if (sections.planning)
    planning = std::string(kPlanningHeading) + " " + *sections.planning + "\n";

  std::string out;
  out += defense_first ? risk + planning : planning + risk;
  out += format_action_line(action);
  out += "\n";
  return out;
}

}  // namespace icd::protocol
