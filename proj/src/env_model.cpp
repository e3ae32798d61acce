#include "icd/env_model.hpp"

#include <algorithm>
#include <deque>
#include <set>

#include <json.hpp>

namespace icd::env {

using nlohmann::json;

namespace {

std::string_view trim_ws(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

const json& require_field(const json& j, const char* key, const std::string& path) {
  auto it = j.find(key);
  if (it == j.end()) throw ParseError("missing field \"" + std::string(key) + "\"", path);
  return *it;
}

std::string get_string(const json& j, const char* key, const std::string& path) {
  const json& v = require_field(j, key, path);
  if (!v.is_string()) throw ParseError("expected string", path + "." + key);
  return v.get<std::string>();
}

ActionKind action_kind_from_name(const std::string& name, const std::string& path) {
  if (name == "click") return ActionKind::Click;
  if (name == "type") return ActionKind::Type;
  throw ParseError("unknown action kind \"" + name + "\"", path);
}

std::string action_kind_name(ActionKind kind) {
  return kind == ActionKind::Click ? "click" : "type";
}

UiElement parse_element(const json& j, const std::string& path) {
  if (!j.is_object()) throw ParseError("expected element object", path);
  UiElement element;
  element.key = get_string(j, "key", path);
  std::string tag = get_string(j, "tag", path);
  auto parsed_tag = tag_from_name(tag);
  if (!parsed_tag) throw ParseError("unknown tag \"" + tag + "\"", path + ".tag");
  element.tag = *parsed_tag;
  element.text = get_string(j, "text", path);
  const json& attrs = require_field(j, "attrs", path);
  if (!attrs.is_object()) throw ParseError("expected attrs object", path + ".attrs");
  for (auto it = attrs.begin(); it != attrs.end(); ++it) {
    if (!it.value().is_string())
      throw ParseError("attr values must be strings", path + ".attrs." + it.key());
    element.attrs[it.key()] = it.value().get<std::string>();
  }
  const json& bbox = require_field(j, "bbox", path);
  if (!bbox.is_array() || bbox.size() != 4 || !std::all_of(bbox.begin(), bbox.end(), [](const json& v) {
        return v.is_number_integer();
      }))
    throw ParseError("bbox must be [x, y, w, h] integers", path + ".bbox");
  element.bbox = {bbox[0].get<int>(), bbox[1].get<int>(), bbox[2].get<int>(), bbox[3].get<int>()};
  if (element.bbox.x < 0 || element.bbox.y < 0 || element.bbox.w <= 0 || element.bbox.h <= 0)
    throw ValidationError("bbox needs nonnegative origin and positive size", path + ".bbox");
  return element;
}

json element_to_json(const UiElement& element) {
  json j;
  j["key"] = element.key;
  j["tag"] = std::string(tag_name(element.tag));
  j["text"] = element.text;
  j["attrs"] = json::object();
  for (const auto& [k, v] : element.attrs) j["attrs"][k] = v;
  j["bbox"] = json::array({element.bbox.x, element.bbox.y, element.bbox.w, element.bbox.h});
  return j;
}

SuccessRule parse_success(const json& j, const std::string& path) {
  if (!j.is_object()) throw ParseError("expected success object", path);
  std::string rule = get_string(j, "rule", path);
  if (rule == "reach_page") return ReachPage{get_string(j, "page", path)};
  if (rule == "gold_plan_prefix") return GoldPlanPrefix{};
  if (rule == "answer_equals") return AnswerEquals{get_string(j, "answer", path)};
  throw ParseError("unknown success rule \"" + rule + "\"", path + ".rule");
}

json success_to_json(const SuccessRule& rule) {
  json j;
  if (const auto* reach = std::get_if<ReachPage>(&rule)) {
    j["rule"] = "reach_page";
    j["page"] = reach->page_id;
  } else if (std::holds_alternative<GoldPlanPrefix>(rule)) {
    j["rule"] = "gold_plan_prefix";
  } else {
    j["rule"] = "answer_equals";
    j["answer"] = std::get<AnswerEquals>(rule).expected;
  }
  return j;
}

void validate_environment(const Environment& env) {
  for (const auto& [page_id, page] : env.pages) {
    std::set<std::string> keys;
    for (std::size_t i = 0; i < page.elements.size(); ++i) {
      const UiElement& element = page.elements[i];
      std::string path = "$.pages." + page_id + ".elements[" + std::to_string(i) + "]";
      if (!keys.insert(element.key).second)
        throw ValidationError("duplicate element key \"" + element.key + "\"", path);
    }
  }

  std::size_t index = 0;
  for (const auto& [key, to] : env.transitions) {
    std::string path = "$.transitions[" + std::to_string(index++) + "]";
    auto page_it = env.pages.find(key.page_id);
    if (page_it == env.pages.end())
      throw ValidationError("transition from missing page \"" + key.page_id + "\"", path + ".page");
    if (page_it->second.find_by_key(key.element_key) == nullptr)
      throw ValidationError(
          "transition element \"" + key.element_key + "\" not on page \"" + key.page_id + "\"",
          path + ".element");
    if (env.pages.find(to) == env.pages.end())
      throw ValidationError("transition to missing page \"" + to + "\"", path + ".to");
  }

  std::set<std::string> task_ids;
  for (std::size_t t = 0; t < env.tasks.size(); ++t) {
    const Task& task = env.tasks[t];
    std::string path = "$.tasks[" + std::to_string(t) + "]";
    if (!task_ids.insert(task.id).second)
      throw ValidationError("duplicate task id \"" + task.id + "\"", path + ".id");
    if (env.pages.find(task.start_page) == env.pages.end())
      throw ValidationError("task start page \"" + task.start_page + "\" missing",
                            path + ".start_page");

    // Pages reachable from the start page via the transition table.
    std::set<std::string> reachable{task.start_page};
    std::deque<std::string> frontier{task.start_page};
    while (!frontier.empty()) {
      std::string current = frontier.front();
      frontier.pop_front();
      for (const auto& [key, to] : env.transitions) {
        if (key.page_id == current && reachable.insert(to).second) frontier.push_back(to);
      }
    }
    for (std::size_t s = 0; s < task.gold_plan.size(); ++s) {
      const GoldStep& step = task.gold_plan[s];
      bool found = false;
      for (const std::string& page_id : reachable) {
        if (env.pages.at(page_id).find_by_key(step.element_key) != nullptr) {
          found = true;
          break;
        }
      }
      if (!found)
        throw ValidationError("gold plan element \"" + step.element_key +
                                  "\" not reachable from \"" + task.start_page + "\"",
                              path + ".gold_plan[" + std::to_string(s) + "]");
    }
    if (const auto* reach = std::get_if<ReachPage>(&task.success)) {
      if (env.pages.find(reach->page_id) == env.pages.end())
        throw ValidationError("success page \"" + reach->page_id + "\" missing",
                              path + ".success.page");
    }
  }
}

}  // namespace

std::string_view tag_name(Tag tag) {
  switch (tag) {
    case Tag::Button: return "button";
    case Tag::Link: return "link";
    case Tag::Input: return "input";
    case Tag::Text: return "text";
    case Tag::Image: return "image";
    case Tag::Window: return "window";
  }
  return "text";
}

std::optional<Tag> tag_from_name(std::string_view name) {
  if (name == "button") return Tag::Button;
  if (name == "link") return Tag::Link;
  if (name == "input") return Tag::Input;
  if (name == "text") return Tag::Text;
  if (name == "image") return Tag::Image;
  if (name == "window") return Tag::Window;
  return std::nullopt;
}

std::string_view provenance_trace_name(Provenance p) {
  switch (p) {
    case Provenance::Original: return "original";
    case Provenance::InjectedPopup: return "injected_popup";
    case Provenance::InjectedEia: return "injected_eia";
    case Provenance::InjectedAd: return "injected_ad";
  }
  return "original";
}

const UiElement* PageState::find_by_key(std::string_view key) const {
  for (const UiElement& element : elements)
    if (element.key == key) return &element;
  return nullptr;
}

const UiElement* PageState::find_by_som(int som_id) const {
  for (const UiElement& element : elements)
    if (element.som_id == som_id) return &element;
  return nullptr;
}

const PageState& Environment::page(const std::string& page_id) const {
  auto it = pages.find(page_id);
  if (it == pages.end()) throw UnknownPage(page_id);
  return it->second;
}

const Task* Environment::find_task(std::string_view task_id) const {
  for (const Task& task : tasks)
    if (task.id == task_id) return &task;
  return nullptr;
}

Environment load_environment(const std::string& bytes) {
  json doc;
  try {
    doc = json::parse(bytes);
  } catch (const json::exception& e) {
    throw ParseError(std::string("invalid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ParseError("environment document must be an object");

  Environment env;
  const json& version = require_field(doc, "version", "$");
  if (!version.is_number_integer()) throw ParseError("expected integer", "$.version");
  env.version = version.get<int>();
  if (env.version != kSupportedVersion)
    throw ValidationError("unsupported environment version " + std::to_string(env.version),
                          "$.version");

  const json& pages = require_field(doc, "pages", "$");
  if (!pages.is_object()) throw ParseError("expected object", "$.pages");
  for (auto it = pages.begin(); it != pages.end(); ++it) {
    std::string path = "$.pages." + it.key();
    PageState page;
    page.page_id = it.key();
    page.screenshot_ref = get_string(it.value(), "screenshot", path);
    const json& elements = require_field(it.value(), "elements", path);
    if (!elements.is_array()) throw ParseError("expected array", path + ".elements");
    for (std::size_t i = 0; i < elements.size(); ++i)
      page.elements.push_back(
          parse_element(elements[i], path + ".elements[" + std::to_string(i) + "]"));
    env.pages.emplace(page.page_id, std::move(page));
  }

  const json& transitions = require_field(doc, "transitions", "$");
  if (!transitions.is_array()) throw ParseError("expected array", "$.transitions");
  for (std::size_t i = 0; i < transitions.size(); ++i) {
    std::string path = "$.transitions[" + std::to_string(i) + "]";
    const json& t = transitions[i];
    TransitionKey key{get_string(t, "page", path), get_string(t, "element", path),
                      action_kind_from_name(get_string(t, "action", path), path + ".action")};
    std::string to = get_string(t, "to", path);
    if (!env.transitions.emplace(key, to).second)
      throw ValidationError("duplicate transition for (" + key.page_id + ", " + key.element_key +
                                ", " + action_kind_name(key.kind) + ")",
                            path);
  }

  const json& tasks = require_field(doc, "tasks", "$");
  if (!tasks.is_array()) throw ParseError("expected array", "$.tasks");
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    std::string path = "$.tasks[" + std::to_string(i) + "]";
    const json& t = tasks[i];
    Task task;
    task.id = get_string(t, "id", path);
    task.instruction = get_string(t, "instruction", path);
    task.start_page = get_string(t, "start_page", path);
    const json& plan = require_field(t, "gold_plan", path);
    if (!plan.is_array()) throw ParseError("expected array", path + ".gold_plan");
    for (std::size_t s = 0; s < plan.size(); ++s) {
      std::string step_path = path + ".gold_plan[" + std::to_string(s) + "]";
      const json& p = plan[s];
      GoldStep step;
      step.element_key = get_string(p, "element", step_path);
      step.kind = action_kind_from_name(get_string(p, "action", step_path), step_path + ".action");
      if (p.contains("text")) {
        if (!p["text"].is_string()) throw ParseError("expected string", step_path + ".text");
        step.text = p["text"].get<std::string>();
      }
      task.gold_plan.push_back(std::move(step));
    }
    task.success = parse_success(require_field(t, "success", path), path + ".success");
    env.tasks.push_back(std::move(task));
  }

  validate_environment(env);
  return env;
}

std::string serialize_environment(const Environment& env) {
  json doc;
  doc["version"] = env.version;
  doc["pages"] = json::object();
  for (const auto& [page_id, page] : env.pages) {
    json p;
    p["screenshot"] = page.screenshot_ref;
    p["elements"] = json::array();
    for (const UiElement& element : page.elements) p["elements"].push_back(element_to_json(element));
    doc["pages"][page_id] = std::move(p);
  }
  doc["transitions"] = json::array();
  for (const auto& [key, to] : env.transitions) {
    json t;
    t["page"] = key.page_id;
    t["element"] = key.element_key;
    t["action"] = action_kind_name(key.kind);
    t["to"] = to;
    doc["transitions"].push_back(std::move(t));
  }
  doc["tasks"] = json::array();
  for (const Task& task : env.tasks) {
    json t;
    t["id"] = task.id;
    t["instruction"] = task.instruction;
    t["start_page"] = task.start_page;
    t["gold_plan"] = json::array();
    for (const GoldStep& step : task.gold_plan) {
      json p;
      p["element"] = step.element_key;
      p["action"] = action_kind_name(step.kind);
      if (step.text) p["text"] = *step.text;
      t["gold_plan"].push_back(std::move(p));
    }
    t["success"] = success_to_json(task.success);
    doc["tasks"].push_back(std::move(t));
  }
  return doc.dump(2) + "\n";
}

std::string serialize_page(const PageState& page) {
  json p;
  p["screenshot"] = page.screenshot_ref;
  p["elements"] = json::array();
  for (const UiElement& element : page.elements) p["elements"].push_back(element_to_json(element));
  return p.dump(2) + "\n";
}

PageState assign_som_labels(PageState page) {
  int next = 1;
  for (UiElement& element : page.elements) element.som_id = next++;
  return page;
}

Observation render_observation(const Environment& env, const std::string& page_id,
                               const Task& task, int step_index, AnnotationMode mode) {
  if (step_index < 0) throw ValidationError("step index must be nonnegative");
  Observation obs;
  obs.task_instruction = task.instruction;
  obs.page = assign_som_labels(env.page(page_id));
  obs.step_index = step_index;
  obs.mode = mode;
  return obs;
}

std::string serialize_observation(const Observation& obs) {
  std::string out;
  out += "Task: " + obs.task_instruction + "\n";
  out += "Step: " + std::to_string(obs.step_index) + "\n";
  out += "Screenshot: " + obs.page.screenshot_ref + "\n";
  switch (obs.mode) {
    case AnnotationMode::SomLabels: out += "Annotations: som\n"; break;
    case AnnotationMode::HtmlChoices: out += "Annotations: screenshot-only\n"; break;
    case AnnotationMode::ActionAnnotations: out += "Annotations: actions\n"; break;
  }
  if (obs.mode == AnnotationMode::HtmlChoices) return out;

  out += "Elements:\n";
  for (const UiElement& element : obs.page.elements) {
    out += "[" + std::to_string(element.som_id.value_or(0)) + "] ";
    out += tag_name(element.tag);
    out += " \"" + element.text + "\"";
    if (!element.attrs.empty()) {
      out += " (";
      bool first = true;
      for (const auto& [k, v] : element.attrs) {
        if (!first) out += ", ";
        first = false;
        out += k + "=" + v;
      }
      out += ")";
    }
    out += "\n";
  }
  return out;
}

StepResult apply_action(const Environment& env, const std::string& page_id,
                        const Action& action) {
  const PageState& page = env.page(page_id);

  if (const auto* stop = std::get_if<protocol::StopAction>(&action))
    return Terminal{stop->answer};
  if (std::holds_alternative<protocol::ChoiceAction>(action) ||
      std::holds_alternative<protocol::NoneMatchAction>(action))
    return NoOp{};

  int som_id = 0;
  ActionKind kind = ActionKind::Click;
  if (const auto* click = std::get_if<protocol::ClickAction>(&action)) {
    som_id = click->som_id;
  } else {
    const auto& type = std::get<protocol::TypeAction>(action);
    som_id = type.som_id;
    kind = ActionKind::Type;
  }
  // Labels are positional (1..N in element order), so unlabeled pages are
  // addressable by index as well.
  const UiElement* element = page.find_by_som(som_id);
  if (element == nullptr && som_id >= 1 &&
      som_id <= static_cast<int>(page.elements.size()))
    element = &page.elements[som_id - 1];
  if (element == nullptr) throw UnknownElement(som_id);

  auto it = env.transitions.find(TransitionKey{page_id, element->key, kind});
  if (it == env.transitions.end()) return NoOp{};
  return NextPage{it->second};
}

bool check_success(const EpisodeOutcome& outcome, const Task& task) {
  if (const auto* reach = std::get_if<ReachPage>(&task.success))
    return outcome.final_page == reach->page_id;
  if (std::holds_alternative<GoldPlanPrefix>(task.success))
    return outcome.executed == task.gold_plan;
  const auto& expected = std::get<AnswerEquals>(task.success).expected;
  if (!outcome.terminal_answer) return false;
  return trim_ws(*outcome.terminal_answer) == expected;
}

}  // namespace icd::env
