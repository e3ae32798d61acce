#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "icd/errors.hpp"
#include "icd/protocol_grammar.hpp"

// Deterministic simulated web environment: pages of interactable elements,
// SoM annotation, task goals and state transitions.

namespace icd::env {

using protocol::Action;
using protocol::ActionKind;

enum class Tag { Button, Link, Input, Text, Image, Window };

std::string_view tag_name(Tag tag);
std::optional<Tag> tag_from_name(std::string_view name);

// Harness ground truth. Must never appear in anything an agent backend sees.
enum class Provenance { Original, InjectedPopup, InjectedEia, InjectedAd };

std::string_view provenance_trace_name(Provenance p);  // trace files only

struct BBox {
  int x = 0, y = 0, w = 1, h = 1;
  bool operator==(const BBox&) const = default;
};

struct UiElement {
  std::string key;  // stable identifier, unique within a page
  Tag tag = Tag::Text;
  std::string text;
  std::map<std::string, std::string> attrs;
  BBox bbox;
  Provenance provenance = Provenance::Original;
  std::optional<int> som_id;  // assigned at render time

  bool operator==(const UiElement&) const = default;
};

struct PageState {
  std::string page_id;
  std::vector<UiElement> elements;
  std::string screenshot_ref;  // opaque; synthetic:// placeholders allowed

  const UiElement* find_by_key(std::string_view key) const;
  const UiElement* find_by_som(int som_id) const;

  bool operator==(const PageState&) const = default;
};

struct GoldStep {
  std::string element_key;
  ActionKind kind = ActionKind::Click;
  std::optional<std::string> text;

  bool operator==(const GoldStep&) const = default;
};

struct ReachPage {
  std::string page_id;
  bool operator==(const ReachPage&) const = default;
};
struct GoldPlanPrefix {
  bool operator==(const GoldPlanPrefix&) const = default;
};
struct AnswerEquals {
  std::string expected;
  bool operator==(const AnswerEquals&) const = default;
};
using SuccessRule = std::variant<ReachPage, GoldPlanPrefix, AnswerEquals>;

struct Task {
  std::string id;
  std::string instruction;
  std::string start_page;
  std::vector<GoldStep> gold_plan;
  SuccessRule success = GoldPlanPrefix{};

  bool operator==(const Task&) const = default;
};

struct TransitionKey {
  std::string page_id;
  std::string element_key;
  ActionKind kind = ActionKind::Click;

  auto operator<=>(const TransitionKey&) const = default;
};

struct Environment {
  int version = 1;
  std::map<std::string, PageState> pages;
  std::map<TransitionKey, std::string> transitions;
  std::vector<Task> tasks;

  const PageState& page(const std::string& page_id) const;  // throws UnknownPage
  const Task* find_task(std::string_view task_id) const;

  bool operator==(const Environment&) const = default;
};

enum class AnnotationMode { SomLabels, HtmlChoices, ActionAnnotations };

// The agent-visible query: task + annotated page + step counter. The page
// keeps provenance as ground truth; serialize_observation strips it.
struct Observation {
  std::string task_instruction;
  PageState page;
  int step_index = 0;
  AnnotationMode mode = AnnotationMode::SomLabels;

  bool operator==(const Observation&) const = default;
};

inline constexpr int kSupportedVersion = 1;

// Loads and validates an environment document (schema in docs/, JSON).
// Throws ParseError for malformed documents and ValidationError (naming the
// offending path) for invariant violations.
Environment load_environment(const std::string& bytes);

// Canonical byte form: keys sorted lexicographically, two-space indent,
// UTF-8, LF line endings, single trailing newline. load ∘ serialize is the
// identity on canonical documents.
std::string serialize_environment(const Environment& env);

// Canonical serialization of one page in the document element schema
// (provenance-free by construction).
std::string serialize_page(const PageState& page);

// som_id = 1..N in element-list order. Idempotent.
PageState assign_som_labels(PageState page);

Observation render_observation(const Environment& env, const std::string& page_id,
                               const Task& task, int step_index, AnnotationMode mode);

// Agent-facing text. Never contains provenance markers; deterministic for
// equal observations.
std::string serialize_observation(const Observation& obs);

struct NextPage {
  std::string page_id;
  bool operator==(const NextPage&) const = default;
};
struct Terminal {
  std::string answer;
  bool operator==(const Terminal&) const = default;
};
struct NoOp {
  bool operator==(const NoOp&) const = default;
};
using StepResult = std::variant<NextPage, Terminal, NoOp>;

// Click/Type on an element with no transition entry is a NoOp, not an error.
// Choice/NoneMatch actions never navigate (the two-round protocol scores
// single steps). Throws UnknownElement for som ids absent from the page.
StepResult apply_action(const Environment& env, const std::string& page_id,
                        const Action& action);

// What an episode actually did, reduced to what success rules need.
struct EpisodeOutcome {
  std::vector<GoldStep> executed;  // element-targeting actions, in order
  std::string final_page;
  std::optional<std::string> terminal_answer;
};

bool check_success(const EpisodeOutcome& outcome, const Task& task);

}  // namespace icd::env
