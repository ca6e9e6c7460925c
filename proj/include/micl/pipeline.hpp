#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "micl/eval.hpp"
#include "micl/retrieval.hpp"
#include "micl/scoring.hpp"
#include "micl/synthetic.hpp"
#include "micl/trainer.hpp"
#include "micl/util.hpp"

namespace micl {

/// Environment variable that overrides scoring.endpoint.
inline constexpr const char* kEndpointEnv = "MICL_SCORER_ENDPOINT";
/// Created with O_EXCL in the work directory for the lifetime of a run.
/// Contents: {"pid": <int>, "started": <unix seconds>}.
inline constexpr const char* kLockFile = ".micl.lock";

/// Every key the pipeline understands, with its default.
Json default_config();

/// Applies "dotted.key=value". The value is parsed as JSON when it parses,
/// otherwise taken as a string. Intermediate objects are created.
void apply_override(Json& config, const std::string& assignment);

/// Reads a JSON config, merges it over the defaults, applies overrides, then
/// the endpoint environment variable.
Json load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

struct EvalSpec {
  /// Retriever modes: qimi, qtmt, qimit, mmices (unsupervised) and msier
  /// (the trained adapter over the training pairs).
  std::vector<std::string> modes;
  std::vector<std::size_t> shot_counts;
  OrderPolicy order = OrderPolicy::kAscending;
  std::size_t mmices_n_visual = 50;
  std::optional<double> mask_rate;
  bool permutations = false;
};

struct PipelineConfig {
  Json raw;
  /// Relative paths in the config resolve against this directory.
  std::filesystem::path base_dir;
  std::filesystem::path workdir;
  std::uint64_t seed = 0;
  Task task = Task::kCaptioning;
  std::filesystem::path memory_manifest;
  std::filesystem::path query_manifest;
  std::optional<std::filesystem::path> latent;
  SimilarityConfig retrieval;
  std::size_t shortlist_n = 50;
  unsigned threads = 1;
  std::string scorer = "synthetic";
  std::string endpoint;
  HttpScorerOptions http;
  TrainConfig train;
  EvalSpec eval;

  /// Throws kConfig naming the offending key.
  static PipelineConfig from_json(const Json& config, const std::filesystem::path& base_dir);
};

struct ConfigDiagnostic {
  enum class Severity { kError, kWarning };
  Severity severity = Severity::kError;
  std::string key;
  std::string message;
};

/// Empty iff the config is runnable and free of warnings. Only checks that
/// declared input files exist; never reads them.
std::vector<ConfigDiagnostic> validate_config(const Json& config,
                                              const std::filesystem::path& base_dir);

enum class Stage { kIngest, kRetrieve, kScore, kMine, kTrain, kEval, kReport };

std::string_view to_string(Stage stage);
Stage parse_stage(std::string_view name);
const std::vector<Stage>& all_stages();

struct StageOutcome {
  Stage stage;
  bool skipped = false;
  std::string message;
};

/// Artifact layout under the work directory.
namespace artifacts {
inline const std::filesystem::path kMemory = "corpus/memory";
inline const std::filesystem::path kQueries = "corpus/queries";
inline const std::filesystem::path kShortlists = "shortlists.jsonl";
inline const std::filesystem::path kScores = "scores.jsonl";
/// Suffixed per scorer: cache/scores_<hash of scorer name>.jsonl.
inline const std::filesystem::path kScoreCache = "cache/scores.jsonl";
inline const std::filesystem::path kMining = "mining.jsonl";
inline const std::filesystem::path kCheckpoint = "adapter.ckpt";
inline const std::filesystem::path kTrainLog = "train_log.jsonl";
inline const std::filesystem::path kEval = "eval.json";
inline const std::filesystem::path kPredictions = "predictions";
inline const std::filesystem::path kReportJson = "report.json";
inline const std::filesystem::path kReportText = "report.txt";
}  // namespace artifacts

/// One pipeline invocation. Holds the work-directory lock until destroyed.
///
/// Each stage writes `<stage>.meta.json` next to its artifacts with
/// {stage, config_hash, seed, inputs: {path: sha256}, outputs: {path: sha256}}.
/// A stage is skipped when the recorded config hash and input hashes match
/// and the outputs are intact. Outputs with other provenance are refused
/// (kStaleArtifact) unless `force` is set.
class Pipeline {
 public:
  Pipeline(PipelineConfig config, bool force, std::ostream& log);
  ~Pipeline();
  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;

  StageOutcome run(Stage stage);
  std::vector<StageOutcome> run_all();

  const PipelineConfig& config() const noexcept { return config_; }

 private:
  struct Plan;
  Plan plan(Stage stage) const;
  void execute(Stage stage);
  void ingest();
  void retrieve();
  void score();
  void mine();
  void train();
  void evaluate();
  void report();

  std::filesystem::path path(const std::filesystem::path& rel) const { return config_.workdir / rel; }

  PipelineConfig config_;
  bool force_;
  std::ostream& log_;
  std::filesystem::path lock_path_;
};

/// Writes a synthetic corpus and a ready-to-run config.json into `dir`.
void make_fixture(const std::filesystem::path& dir, const SyntheticSpec& spec,
                  const Json& config_patch = Json::object());

}  // namespace micl
