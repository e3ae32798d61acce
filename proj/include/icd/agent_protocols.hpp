#pragma once

#include <optional>
#include <string>
#include <vector>

#include "icd/defense_context.hpp"
#include "icd/env_model.hpp"
#include "icd/errors.hpp"
#include "icd/model_backends.hpp"
#include "icd/protocol_grammar.hpp"

// The three agent interaction protocols: single-round SoM agent, two-round
// choose-from-list agent, and single-shot grounding agent.

namespace icd::protocol {

inline constexpr int kDefaultStepCap = 10;
inline constexpr int kMaxChoices = 25;

struct TooManyChoices : Error {
  explicit TooManyChoices(std::size_t n)
      : Error("choice list supports at most 25 elements, got " + std::to_string(n)) {}
};

struct ChoiceEntry {
  char letter = 'A';
  std::optional<std::string> element_key;  // absent for the NoneMatch entry
  std::string description;
};

// Lettered element menu for the two-round protocol; the NoneMatch sentence is
// always the last entry.
struct ChoiceList {
  std::vector<ChoiceEntry> entries;

  const ChoiceEntry* by_letter(char letter) const;
  const ChoiceEntry* by_element_key(std::string_view key) const;
  char none_letter() const { return entries.back().letter; }
};

// Elements in page order mapped to A, B, ...; throws TooManyChoices above 25.
ChoiceList render_choice_list(const env::PageState& page);

std::string render_choice_text(const ChoiceList& choices);

// One SoM-protocol step: assemble context, one completion, parse. The episode
// loop (and the 10-step cap) lives in the experiment runner. `live_footer` is
// the scripted-oracle hint; empty for remote backends.
ParsedResponse step_som_agent(backend::Backend& backend, const defense::DefenseConfig& defense,
                              const std::string& system_preamble, const env::Observation& obs,
                              const std::string& live_footer = "");

struct TwoRoundResult {
  std::string round1_text;  // stored, never parsed or scored
  ParsedResponse final_response;
};

// Round one: screenshot + task, free-text decision. Round two: the lettered
// choice list; the answer is parsed as CHOICE/NONE.
TwoRoundResult run_two_round(backend::Backend& backend, const defense::DefenseConfig& defense,
                             const std::string& system_preamble, const env::Observation& obs,
                             const ChoiceList& choices, const std::string& live_footer = "",
                             const std::string& round2_footer = "");

// Grounding agent: one completion; only a CLICK action counts as a grounding
// prediction.
ParsedResponse run_grounding(backend::Backend& backend, const defense::DefenseConfig& defense,
                             const std::string& system_preamble, const env::Observation& obs,
                             const std::string& live_footer = "");

std::string_view protocol_name(Protocol protocol);
std::optional<Protocol> protocol_from_name(std::string_view name);
env::AnnotationMode annotation_mode_for(Protocol protocol);

// Per-protocol default system preambles; experiments may override.
std::string default_system_preamble(Protocol protocol);

}  // namespace icd::protocol
