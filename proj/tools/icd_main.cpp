#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "icd/experiment.hpp"
#include "icd/fs_util.hpp"

namespace {

// Exit codes: 0 success, 2 config error, 3 backend error, 4 validation error.
constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kBackendError = 3;
constexpr int kValidationError = 4;

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const icd::ConfigError& e) {
    std::cerr << "config error";
    if (!e.field.empty()) std::cerr << " (" << e.field << ")";
    std::cerr << ": " << e.what() << "\n";
    return kConfigError;
  } catch (const icd::backend::BackendError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return kBackendError;
  } catch (const icd::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidationError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidationError;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-deception attack and in-context defense harness for computer agents"};
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "Run an experiment from a config file");
  std::string config_path;
  std::vector<std::string> overrides;
  int jobs_flag = 0;
  std::string run_id;
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--set", overrides, "Override config values, key.path=value");
  run->add_option("--jobs", jobs_flag, "Parallel episodes");
  run->add_option("--run-id", run_id, "Pin the run directory name");

  // inject
  auto* inject = app.add_subcommand("inject", "Preview an attack on one page");
  std::string env_path, page_id, attack_json;
  inject->add_option("--env", env_path, "Environment file")->required();
  inject->add_option("--page", page_id, "Page id")->required();
  inject->add_option("--attack", attack_json, "Attack spec (JSON)")->required();

  // exemplar build
  auto* exemplar = app.add_subcommand("exemplar", "Exemplar library tools");
  exemplar->require_subcommand(1);
  auto* build = exemplar->add_subcommand("build", "Build an exemplar from a trace step");
  std::string trace_path, out_dir, rationale, order_name = "defense_first";
  int step_index = 0;
  std::vector<int> flag_ids;
  build->add_option("--trace", trace_path, "Episode trace (JSONL)")->required();
  build->add_option("--step", step_index, "Step index")->required();
  build->add_option("--flag", flag_ids, "Som id to flag (repeatable; none = benign exemplar)");
  build->add_option("--out", out_dir, "Exemplar set directory")->required();
  build->add_option("--rationale", rationale, "Risk-section rationale text");
  build->add_option("--order", order_name, "defense_first | planning_first");

  // report
  auto* report = app.add_subcommand("report", "Recompute a report from trace files");
  std::string traces_dir, format = "md", out_path;
  report->add_option("--traces", traces_dir, "Directory of trace files")->required();
  report->add_option("--format", format, "md | csv");
  report->add_option("--out", out_path, "Output path (default: next to the traces dir)");

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) {
    return guarded([&] {
      std::string text = icd::read_file(config_path);
      for (const std::string& assignment : overrides)
        text = icd::harness::apply_config_override(text, assignment);
      icd::harness::ExperimentConfig config = icd::harness::parse_experiment_config(text);
      if (jobs_flag > 0) config.jobs = jobs_flag;
      auto manifest = icd::harness::run_experiment(
          config, run_id.empty() ? std::nullopt : std::optional<std::string>(run_id));
      std::cout << "run: " << manifest.run_dir << "\n";
      std::cout << "report: " << manifest.report_md << "\n";
      return kOk;
    });
  }

  if (inject->parsed()) {
    return guarded([&] {
      nlohmann::json spec_json;
      try {
        spec_json = nlohmann::json::parse(attack_json);
      } catch (const nlohmann::json::exception& e) {
        throw icd::ConfigError(std::string("attack spec is not valid JSON: ") + e.what(),
                               "--attack");
      }
      // Reuse the config-file attack schema for the inline spec.
      nlohmann::json wrapper{{"environment", env_path},
                             {"attack", spec_json},
                             {"conditions", {"benign"}}};
      auto config = icd::harness::parse_experiment_config(wrapper.dump());
      std::cout << icd::harness::inject_preview(env_path, config.attack, page_id);
      return kOk;
    });
  }

  if (build->parsed()) {
    return guarded([&] {
      auto order = icd::defense::reasoning_order_from_name(order_name);
      if (!order) throw icd::ConfigError("unknown reasoning order", "--order");
      auto paths = icd::harness::exemplar_build(trace_path, step_index, flag_ids, out_dir,
                                                rationale, *order);
      for (const std::string& path : paths) std::cout << path << "\n";
      return kOk;
    });
  }

  if (report->parsed()) {
    return guarded([&] {
      std::string rendered = icd::harness::emit_report(traces_dir, format);
      if (out_path.empty()) {
        auto parent = std::filesystem::path(traces_dir).parent_path();
        out_path = (parent / ("report." + format)).string();
      }
      icd::write_file(out_path, rendered);
      std::cout << out_path << "\n";
      return kOk;
    });
  }

  return kOk;
}
