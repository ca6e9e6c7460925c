// micl: command-line driver for the retrieval/scoring/training pipeline.
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "micl/error.hpp"
#include "micl/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

// Distinct codes so scripts can tell refusals from failures.
int exit_code(micl::ErrorCode code) {
  switch (code) {
    case micl::ErrorCode::kConfig: return 2;
    case micl::ErrorCode::kStageInputMissing: return 3;
    case micl::ErrorCode::kStaleArtifact: return 4;
    case micl::ErrorCode::kLocked: return 5;
    default: return 1;
  }
}

micl::PipelineConfig load(const std::string& config_path, const std::vector<std::string>& overrides) {
  const fs::path path = fs::absolute(config_path);
  const micl::Json json = micl::load_config(path, overrides);
  bool fatal = false;
  for (const auto& d : micl::validate_config(json, path.parent_path())) {
    const bool error = d.severity == micl::ConfigDiagnostic::Severity::kError;
    fatal = fatal || error;
    std::cerr << (error ? "config error" : "config warning") << (d.key.empty() ? "" : " [" + d.key + "]")
              << ": " << d.message << "\n";
  }
  if (fatal) throw micl::Error(micl::ErrorCode::kConfig, "config " + path.string() + " is not runnable");
  return micl::PipelineConfig::from_json(json, path.parent_path());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"micl: supervised in-context example retrieval for multimodal prompting"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string stage_name;
  bool force = false;

  auto* run = app.add_subcommand("run", "Run one stage or all stages in order");
  run->add_option("stage", stage_name, "ingest, retrieve, score, mine, train, eval, report or all")
      ->required();
  run->add_option("-c,--config", config_path, "Pipeline config (JSON)")->required();
  run->add_option("--set", overrides, "Override a dotted config key, e.g. --set mining.k=3");
  run->add_flag("--force", force, "Rebuild outputs whose provenance does not match");

  auto* check = app.add_subcommand("validate", "Check a config without touching data");
  check->add_option("-c,--config", config_path, "Pipeline config (JSON)")->required();
  check->add_option("--set", overrides, "Override a dotted config key");

  micl::SyntheticSpec spec;
  std::string out_dir;
  std::string task_name = "captioning";
  auto* fixture = app.add_subcommand("make-fixture", "Write a seeded synthetic corpus and config");
  fixture->add_option("-o,--out", out_dir, "Output directory")->required();
  fixture->add_option("--memory", spec.memory, "Memory items")->capture_default_str();
  fixture->add_option("--queries", spec.queries, "Held-out queries")->capture_default_str();
  fixture->add_option("--dim", spec.dim, "Embedding dimension")->capture_default_str();
  fixture->add_option("--latent-dim", spec.latent_dim, "Helpfulness latent dimension")->capture_default_str();
  fixture->add_option("--seed", spec.seed, "Generator seed")->capture_default_str();
  fixture->add_option("--task", task_name, "captioning, vqa or rank_classification")->capture_default_str();
  fixture->add_option("--set", overrides, "Config key to write into config.json");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      auto config = load(config_path, overrides);
      micl::Pipeline pipeline(std::move(config), force, std::cout);
      if (stage_name == "all") {
        pipeline.run_all();
      } else {
        pipeline.run(micl::parse_stage(stage_name));
      }
    } else if (*check) {
      const fs::path path = fs::absolute(config_path);
      const auto diagnostics = micl::validate_config(micl::load_config(path, overrides), path.parent_path());
      int errors = 0;
      for (const auto& d : diagnostics) {
        const bool error = d.severity == micl::ConfigDiagnostic::Severity::kError;
        errors += error;
        std::cout << (error ? "error" : "warning") << (d.key.empty() ? "" : " [" + d.key + "]") << ": "
                  << d.message << "\n";
      }
      if (diagnostics.empty()) std::cout << "ok\n";
      return errors ? 2 : 0;
    } else if (*fixture) {
      spec.task = micl::parse_task(task_name);
      micl::Json patch = micl::Json::object();
      for (const auto& o : overrides) micl::apply_override(patch, o);
      micl::make_fixture(out_dir, spec, patch);
      std::cout << "wrote " << out_dir << "\n";
    }
  } catch (const micl::Error& e) {
    std::cerr << "micl: " << e.what() << " (" << micl::to_string(e.code()) << ")\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "micl: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
