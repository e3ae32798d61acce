#include "icd/defense_context.hpp"

#include <algorithm>
#include <filesystem>

#include <json.hpp>

#include "icd/fs_util.hpp"

namespace icd::defense {

using nlohmann::json;
using protocol::Action;

namespace {

constexpr std::string_view kDefaultDefensivePlanning =
    "Proceed with the task using the remaining safe elements.";

std::optional<int> action_target_som(const Action& action) {
  if (const auto* click = std::get_if<protocol::ClickAction>(&action)) return click->som_id;
  if (const auto* type = std::get_if<protocol::TypeAction>(&action)) return type->som_id;
  return std::nullopt;
}

bool observation_is_attacked(const env::Observation& obs) {
  return std::any_of(obs.page.elements.begin(), obs.page.elements.end(),
                     [](const env::UiElement& e) {
                       return e.provenance != env::Provenance::Original;
                     });
}

std::string ignore_clause(const std::vector<int>& ids) {
  std::string out = "Ignore ";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) out += ", ";
    out += "[" + std::to_string(ids[i]) + "]";
  }
  out += ".";
  return out;
}

protocol::ParsedResponse parse_any_protocol(const std::string& text) {
  auto som = protocol::parse_response(text, protocol::Protocol::Som);
  if (som.ok()) return som;
  auto two_round = protocol::parse_response(text, protocol::Protocol::TwoRound);
  if (two_round.ok()) return two_round;
  return som;
}

}  // namespace

std::string_view reasoning_order_name(ReasoningOrder order) {
  return order == ReasoningOrder::DefenseFirst ? "defense_first" : "planning_first";
}

std::optional<ReasoningOrder> reasoning_order_from_name(std::string_view name) {
  if (name == "defense_first") return ReasoningOrder::DefenseFirst;
  if (name == "planning_first") return ReasoningOrder::PlanningFirst;
  return std::nullopt;
}

DefenseConfig DefenseConfig::prompting(std::string instruction) {
  if (instruction.empty()) throw ConfigError("prompting defense needs an instruction", "defense");
  return {Prompting{std::move(instruction)}};
}

DefenseConfig DefenseConfig::in_context(ExemplarSet set, ReasoningOrder order,
                                        bool include_defensive) {
  return {InContext{std::move(set), order, include_defensive}};
}

Exemplar build_defensive_exemplar(const env::Observation& obs,
                                  const std::vector<int>& flagged_ids,
                                  const std::string& rationale, const Action& gold,
                                  ReasoningOrder order,
                                  std::optional<std::string> planning_text) {
  if (flagged_ids.empty()) throw EmptyFlagSet();
  for (int id : flagged_ids) {
    if (obs.page.find_by_som(id) == nullptr)
      throw ValidationError("flagged id " + std::to_string(id) + " not in observation",
                            "flagged_ids");
  }
  if (auto target = action_target_som(gold)) {
    if (std::find(flagged_ids.begin(), flagged_ids.end(), *target) != flagged_ids.end())
      throw GoldTargetsFlagged(*target);
  }

  std::string risk = rationale.empty() ? ignore_clause(flagged_ids)
                                       : rationale + " " + ignore_clause(flagged_ids);

  protocol::ResponseSections sections;
  sections.risk = risk;
  sections.planning =
      planning_text ? *planning_text : std::string(kDefaultDefensivePlanning);

  Exemplar exemplar;
  exemplar.kind = ExemplarKind::Defensive;
  exemplar.query = env::serialize_observation(obs);
  exemplar.image_ref = obs.page.screenshot_ref.empty()
                           ? std::nullopt
                           : std::optional<std::string>(obs.page.screenshot_ref);
  exemplar.response =
      protocol::render_response(sections, gold, order == ReasoningOrder::DefenseFirst);
  exemplar.order = order;

  // The rationale must not interfere with id extraction.
  auto parsed = parse_any_protocol(exemplar.response);
  if (parsed.flagged_ids != flagged_ids)
    throw ValidationError("rationale interferes with flagged-id extraction", "rationale");
  return exemplar;
}

Exemplar build_benign_exemplar(const env::Observation& obs, const Action& gold,
                               std::optional<std::string> planning_text,
                               ReasoningOrder order) {
  if (observation_is_attacked(obs)) throw ObservationIsAttacked();

  protocol::ResponseSections sections;
  sections.risk = std::string(protocol::kBenignSentinel);
  sections.planning = planning_text;

  Exemplar exemplar;
  exemplar.kind = ExemplarKind::Benign;
  exemplar.query = env::serialize_observation(obs);
  exemplar.image_ref = obs.page.screenshot_ref.empty()
                           ? std::nullopt
                           : std::optional<std::string>(obs.page.screenshot_ref);
  exemplar.response =
      protocol::render_response(sections, gold, order == ReasoningOrder::DefenseFirst);
  exemplar.order = order;
  return exemplar;
}

MessageSequence assemble_context(const DefenseConfig& config,
                                 const std::string& system_preamble,
                                 const env::Observation& live_query,
                                 const std::string& live_footer) {
  MessageSequence messages;

  std::string preamble = system_preamble;
  if (const auto* prompting = std::get_if<Prompting>(&config.mode))
    preamble += "\n\n" + prompting->instruction;
  messages.push_back({Role::System, preamble, {}});

  if (const auto* in_context = std::get_if<InContext>(&config.mode)) {
    for (const Exemplar& exemplar : in_context->set.exemplars) {
      if (!in_context->include_defensive && exemplar.kind == ExemplarKind::Defensive) continue;
      if (exemplar.order != in_context->order) throw MixedOrder();
      Message query{Role::User, exemplar.query, {}};
      if (exemplar.image_ref) query.images.push_back(*exemplar.image_ref);
      messages.push_back(std::move(query));
      messages.push_back({Role::Assistant, exemplar.response, {}});
    }
  }

  Message live{Role::User, env::serialize_observation(live_query), {}};
  if (!live_footer.empty()) live.text += live_footer + "\n";
  if (!live_query.page.screenshot_ref.empty())
    live.images.push_back(live_query.page.screenshot_ref);
  messages.push_back(std::move(live));
  return messages;
}

std::string_view violation_name(ViolationKind kind) {
  switch (kind) {
    case ViolationKind::NoActionLine: return "no_action_line";
    case ViolationKind::MissingRiskSection: return "missing_risk_section";
    case ViolationKind::OrderViolation: return "order_violation";
    case ViolationKind::SentinelMismatch: return "sentinel_mismatch";
    case ViolationKind::EmptyFlagSet: return "empty_flag_set";
  }
  return "unknown";
}

std::vector<Violation> validate_exemplar(const Exemplar& exemplar) {
  std::vector<Violation> violations;
  auto parsed = parse_any_protocol(exemplar.response);

  if (!parsed.ok()) {
    violations.push_back(
        {ViolationKind::NoActionLine, exemplar.response.size(), parsed.error_detail});
    return violations;
  }
  if (!parsed.defense_span) {
    violations.push_back({ViolationKind::MissingRiskSection, 0, "no risk section"});
    return violations;
  }

  std::string risk_body = protocol::section_body(parsed, *parsed.defense_span);
  if (exemplar.kind == ExemplarKind::Benign) {
    if (risk_body != protocol::kBenignSentinel)
      violations.push_back({ViolationKind::SentinelMismatch, parsed.defense_span->begin,
                            "risk section is not the benign sentinel"});
  } else {
    if (parsed.flagged_ids.empty())
      violations.push_back({ViolationKind::EmptyFlagSet, parsed.defense_span->begin,
                            "defensive exemplar names no ids to ignore"});
  }

  if (parsed.planning_span) {
    bool defense_first = parsed.defense_span->begin < parsed.planning_span->begin;
    bool wants_defense_first = exemplar.order == ReasoningOrder::DefenseFirst;
    if (defense_first != wants_defense_first) {
      std::size_t offset = std::min(parsed.defense_span->begin, parsed.planning_span->begin);
      violations.push_back({ViolationKind::OrderViolation, offset,
                            "section order disagrees with declared reasoning order"});
    }
  }
  return violations;
}

ExemplarSet load_exemplar_set(const std::string& dir) {
  std::string manifest_path = (std::filesystem::path(dir) / "manifest.json").string();
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw ParseError("invalid exemplar manifest: " + std::string(e.what()), manifest_path);
  }
  if (!manifest.is_object() || !manifest.contains("id") || !manifest.contains("order") ||
      !manifest.contains("exemplars"))
    throw ParseError("manifest needs id, order and exemplars", manifest_path);

  auto order = reasoning_order_from_name(manifest["order"].get<std::string>());
  if (!order) throw ParseError("unknown reasoning order", manifest_path + ".order");

  ExemplarSet set;
  set.id = manifest["id"].get<std::string>();
  for (std::size_t i = 0; i < manifest["exemplars"].size(); ++i) {
    const json& entry = manifest["exemplars"][i];
    std::string path = manifest_path + ".exemplars[" + std::to_string(i) + "]";
    Exemplar exemplar;
    std::string kind = entry.value("kind", "");
    if (kind == "benign")
      exemplar.kind = ExemplarKind::Benign;
    else if (kind == "defensive")
      exemplar.kind = ExemplarKind::Defensive;
    else
      throw ParseError("exemplar kind must be benign or defensive", path + ".kind");
    exemplar.query =
        read_file((std::filesystem::path(dir) / entry.at("query").get<std::string>()).string());
    exemplar.response =
        read_file((std::filesystem::path(dir) / entry.at("response").get<std::string>()).string());
    if (entry.contains("image")) exemplar.image_ref = entry["image"].get<std::string>();
    exemplar.order = *order;
    set.exemplars.push_back(std::move(exemplar));
  }
  return set;
}

void save_exemplar_set(const ExemplarSet& set, ReasoningOrder order, const std::string& dir) {
  ensure_dir(dir);
  json manifest;
  manifest["id"] = set.id;
  manifest["order"] = std::string(reasoning_order_name(order));
  manifest["exemplars"] = json::array();
  for (std::size_t i = 0; i < set.exemplars.size(); ++i) {
    const Exemplar& exemplar = set.exemplars[i];
    std::string stem = std::to_string(i + 1);
    json entry;
    entry["kind"] = exemplar.kind == ExemplarKind::Benign ? "benign" : "defensive";
    entry["query"] = stem + ".query.txt";
    entry["response"] = stem + ".response.txt";
    if (exemplar.image_ref) entry["image"] = *exemplar.image_ref;
    manifest["exemplars"].push_back(std::move(entry));
    write_file((std::filesystem::path(dir) / (stem + ".query.txt")).string(), exemplar.query);
    write_file((std::filesystem::path(dir) / (stem + ".response.txt")).string(),
               exemplar.response);
  }
  write_file((std::filesystem::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

}  // namespace icd::defense
