#pragma once

#include <optional>
#include <string>
#include <vector>

#include "icd/agent_protocols.hpp"
#include "icd/attack_injectors.hpp"
#include "icd/defense_context.hpp"
#include "icd/env_model.hpp"
#include "icd/evaluation.hpp"
#include "icd/model_backends.hpp"

// Batch experiment driver: apply attacks, run agents under defense configs
// across the four conditions, persist traces, emit reports.

namespace icd::harness {

struct DefenseSpec {
  std::string mode = "none";  // none | prompting | in_context
  std::string instruction;    // prompting; empty = default
  std::string exemplar_dir;   // in_context
  defense::ReasoningOrder order = defense::ReasoningOrder::DefenseFirst;
  bool include_defensive = true;
};

struct ExperimentConfig {
  std::string environment_path;
  protocol::Protocol protocol = protocol::Protocol::Som;
  attack::AttackSpec attack;
  DefenseSpec defense;
  backend::BackendConfig backend{backend::ScriptedConfig{"gold", 0}};
  std::vector<eval::Condition> conditions;
  std::vector<std::string> task_ids;  // empty = all fixture tasks
  int episodes_per_task = 1;
  std::uint64_t seed = 0;
  int step_cap = protocol::kDefaultStepCap;
  bool exclude_errored = false;
  bool eia_strict_none_only = false;
  std::string system_preamble;  // empty = protocol default
  std::string output_dir = "runs";
  int jobs = 1;
};

ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);

// `--set key=value` dotted-path override applied to the config document
// before parsing.
std::string apply_config_override(const std::string& json_text, const std::string& assignment);

struct RunManifest {
  std::string run_id;
  std::string run_dir;
  std::vector<std::string> trace_files;
  std::string report_md;
  std::string report_csv;
  std::string manifest_path;
};

// Runs every condition × task × episode, writes one JSONL trace per episode
// under <output_dir>/<run_id>/traces/, then aggregates and writes report.md
// and report.csv. Deterministic to the byte for scripted backends and a
// fixed seed. `run_id_override` pins the output directory (tests); the
// default is UTC timestamp + config hash.
RunManifest run_experiment(const ExperimentConfig& config,
                           const std::optional<std::string>& run_id_override = std::nullopt);

// In-memory result of one episode, exactly what the trace file serializes.
struct EpisodeResult {
  eval::EpisodeTrace trace;
  bool success = false;
  bool attack_success = false;
};

// Loads, injects, returns the canonical page document. Inspection aid.
std::string inject_preview(const std::string& env_path, const attack::AttackSpec& spec,
                           const std::string& page_id);

// Builds exemplar files from a recorded trace step; flagged ids must appear
// in the step's observation. Empty id list builds a benign exemplar. Returns
// the paths written.
std::vector<std::string> exemplar_build(const std::string& trace_path, int step_index,
                                        const std::vector<int>& flagged_ids,
                                        const std::string& out_dir,
                                        const std::string& rationale = "",
                                        defense::ReasoningOrder order =
                                            defense::ReasoningOrder::DefenseFirst);

// Recomputes the report from trace files alone.
std::string emit_report(const std::string& traces_dir, const std::string& format);

// Trace (de)serialization: one compact JSON object per line, episode header
// first, then one line per step.
std::string serialize_trace(const EpisodeResult& episode);
EpisodeResult parse_trace(const std::string& jsonl);

std::string report_markdown(const eval::MetricsReport& report);
std::string report_csv(const eval::MetricsReport& report);

}  // namespace icd::harness
