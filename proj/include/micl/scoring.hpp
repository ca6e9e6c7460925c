#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "micl/corpus.hpp"
#include "micl/retrieval.hpp"

namespace micl {

/// Mean per-target-token NLL of the query target given one candidate as
/// the in-context example. Lower means the candidate helps more.
struct ScoreRecord {
  std::string query_id;
  std::string candidate_id;
  double nll = 0.0;

  bool operator==(const ScoreRecord&) const = default;
};

struct ScorePair {
  const ExampleRecord* query;
  const ExampleRecord* candidate;
};

class Scorer {
 public:
  virtual ~Scorer() = default;
  /// One NLL per pair, in input order.
  virtual std::vector<double> score(Task task, std::span<const ScorePair> pairs) = 0;
  virtual std::string name() const = 0;
};

/// 1 - cos(latent_query, latent_candidate), computed with a scalar loop.
double synthetic_score(const ExampleRecord& query, const ExampleRecord& candidate,
                       const EmbeddingMatrix& latent);
double synthetic_score(const std::string& query_id, const std::string& candidate_id,
                       const EmbeddingMatrix& latent);

/// Deterministic stand-in for an MLLM scorer: a hidden "helpfulness"
/// embedding per record id decides how useful a candidate is.
class SyntheticScorer final : public Scorer {
 public:
  explicit SyntheticScorer(EmbeddingMatrix latent) : latent_(std::move(latent)) {}

  std::vector<double> score(Task task, std::span<const ScorePair> pairs) override;
  std::string name() const override { return "synthetic"; }
  const EmbeddingMatrix& latent() const noexcept { return latent_; }
  std::size_t calls() const noexcept { return calls_; }

 private:
  EmbeddingMatrix latent_;
  std::size_t calls_ = 0;
};

struct HttpScorerOptions {
  std::size_t batch_size = 16;
  /// Upper bound on concurrent requests.
  unsigned max_in_flight = 4;
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{200};
  std::chrono::seconds timeout{300};
};

/// Client for the scorer service: POST /v1/score.
///
/// Request:  {"task", "items": [{"query": {"image_ref", "text"?, "answer"?},
///            "candidate": {"image_ref", "text", "answer"?}, "template_id"}]}
/// Response: {"scores": [{"nll", "token_count"}], "nll_reduction"?: "mean"|"sum"}
///
/// Sum-reduced NLLs are divided by token_count so ScoreRecords always hold
/// per-token means; the reduction seen last is reported by reduction().
class HttpScorer final : public Scorer {
 public:
  explicit HttpScorer(std::string endpoint, HttpScorerOptions options = {});

  std::vector<double> score(Task task, std::span<const ScorePair> pairs) override;
  std::string name() const override { return "http:" + endpoint_; }

  /// Scores an arbitrary assembled prefix against candidate answers, used
  /// for rank classification at evaluation time. Items carry
  /// {"prompt", "target", "template_id", "image_refs"?}.
  std::vector<double> score_prompts(Task task, std::span<const std::string> prompts,
                                    std::span<const std::string> targets,
                                    std::span<const std::vector<std::string>> image_refs = {});

  std::size_t requests() const noexcept { return requests_.load(); }
  std::string reduction() const;

 private:
  nlohmann::json post_with_retry(const std::string& path, const nlohmann::json& body,
                                 const std::string& what);
  std::vector<double> parse_scores(const nlohmann::json& response, std::size_t expected,
                                   const std::string& what);
  std::vector<double> run_batches(Task task, std::size_t count,
                                  const std::function<nlohmann::json(std::size_t)>& item,
                                  const std::function<std::string(std::size_t)>& describe);

  std::string endpoint_;
  HttpScorerOptions options_;
  std::atomic<std::size_t> requests_{0};
  std::atomic<bool> saw_sum_{false};
};

/// Shortlists keyed back to the records they were computed for.
struct ScoringJob {
  const Corpus* queries;
  const Corpus* memory;
  std::vector<RetrievalResult> shortlists;
};

/// One ScoreRecord per (query, candidate) pair, sorted by (query_id,
/// candidate_id). Pairs already in `cache_path` are not re-requested; new
/// scores are merged into the cache, which is rewritten sorted.
std::vector<ScoreRecord> score_candidates(const ScoringJob& job, Scorer& scorer,
                                          const std::optional<std::filesystem::path>& cache_path = {});

std::vector<ScoreRecord> read_scores(const std::filesystem::path& path);
void write_scores(const std::filesystem::path& path, std::vector<ScoreRecord> records);

struct MiningResult {
  std::string query_id;
  /// Lowest NLL first.
  std::vector<std::string> positives;
  /// Highest NLL first.
  std::vector<std::string> negatives;

  bool operator==(const MiningResult&) const = default;
};

/// Top-K lowest-NLL candidates become positives, top-K highest-NLL become
/// negatives; ties break by ascending candidate id. With fewer than 2K
/// candidates positives are filled first and the sets stay disjoint.
MiningResult mine_examples(std::span<const ScoreRecord> scores, std::size_t k);

/// Groups records by query id (first-appearance order) and mines each.
std::vector<MiningResult> mine_all(std::span<const ScoreRecord> scores, std::size_t k);

void write_mining(const std::filesystem::path& path, const std::vector<MiningResult>& results);
std::vector<MiningResult> read_mining(const std::filesystem::path& path);

}  // namespace micl
