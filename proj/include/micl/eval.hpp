#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "micl/corpus.hpp"
#include "micl/retrieval.hpp"
#include "micl/scoring.hpp"
#include "micl/util.hpp"

namespace micl {

/// Shot order inside the prompt. Retrieval ranks most-similar first;
/// kAscending reverses that so the best shot sits next to the query.
enum class OrderPolicy { kAscending, kDescending, kRandom };

std::string_view to_string(OrderPolicy policy);
OrderPolicy parse_order_policy(std::string_view s);

struct Shot {
  std::string example_id;
  std::string image_ref;
  /// Rendered example without its target.
  std::string input;
  /// Empty when masked.
  std::string target;
  double similarity = 0.0;

  std::string rendered() const;
};

struct PromptSet {
  std::string query_id;
  Task task = Task::kCaptioning;
  std::string query_image_ref;
  std::vector<Shot> shots;
  /// The query rendered without its target.
  std::string query_suffix;

  /// Shots in stored order, each followed by the chunk separator, then the
  /// query suffix.
  std::string text() const;
  std::vector<std::string> image_refs() const;
};

/// Builds the prompt for `query` from the top `shots` retrieved candidates.
/// Fewer candidates than requested clamps the count and appends a diagnostic.
/// kRandom shuffles with a generator seeded from `seed` and the query id.
PromptSet assemble_prompt_set(const ExampleRecord& query, const RetrievalResult& retrieval,
                              const Corpus& memory, std::size_t shots,
                              OrderPolicy policy = OrderPolicy::kAscending,
                              std::uint64_t seed = 0,
                              std::vector<Diagnostic>* diagnostics = nullptr);

/// Empties the targets of floor(rate * shots) shots picked uniformly with
/// `seed`. Captioning only.
PromptSet mask_ablation(const PromptSet& prompt, double rate, std::uint64_t seed);

/// Reorders shots: out.shots[i] = prompt.shots[order[i]].
PromptSet permute_shots(const PromptSet& prompt, std::span<const std::size_t> order);

// ---- metrics ----

/// Lowercase, punctuation stripped, whitespace split.
std::vector<std::string> caption_tokens(std::string_view text);

/// Corpus-level CIDEr-D (n = 1..4, sigma = 6, clipped, x10), averaged over
/// queries. Document frequencies come from the references.
double cider_d(std::span<const std::string> predictions,
               std::span<const std::vector<std::string>> references);
/// Per-query CIDEr-D values for the same corpus.
std::vector<double> cider_d_per_query(std::span<const std::string> predictions,
                                      std::span<const std::vector<std::string>> references);

/// Lowercase, punctuation removed, articles dropped, whitespace collapsed.
std::string normalize_answer(std::string_view answer);
/// min(#matching ground-truth answers / 3, 1).
double vqa_accuracy(std::string_view prediction, std::span<const std::string> answers);

/// P(score_pos > score_neg) + 0.5 P(tie), computed from midranks.
double auc_roc(std::span<const double> scores, std::span<const int> labels);

// ---- studies ----

/// The 3! shot orders of {0, 1, 2}, lexicographic.
std::vector<std::array<std::size_t, 3>> shot_permutations();

struct PermutationStudy {
  std::vector<std::array<std::size_t, 3>> orders;
  std::vector<double> per_order;
  double mean = 0.0;
  /// Population standard deviation over the six orders.
  double stddev = 0.0;
};

/// `per_order` holds the metric for each order of shot_permutations().
PermutationStudy permutation_study(std::span<const double> per_order);
PermutationStudy permutation_study(
    const std::function<double(const std::array<std::size_t, 3>&)>& evaluate);

struct MetricReport {
  Task task = Task::kCaptioning;
  std::string metric;
  std::vector<std::string> modes;
  std::vector<std::size_t> shot_counts;
  /// values[mode][shots]; absent cells are missing, never filled in.
  std::map<std::string, std::map<std::size_t, double>> values;
  Json metadata = Json::object();
  std::vector<std::string> diagnostics;

  std::optional<double> cell(const std::string& mode, std::size_t shots) const;
  /// Mean over the shot rows; nullopt if any row is missing for the mode.
  std::optional<double> average(const std::string& mode) const;
};

std::string_view metric_name(Task task);

/// Shapes (mode, shots) -> value cells into a report; missing cells are
/// recorded as diagnostics.
MetricReport shot_sweep_report(Task task, std::span<const std::string> modes,
                               std::span<const std::size_t> shot_counts,
                               const std::map<std::string, std::map<std::size_t, double>>& cells,
                               Json metadata = Json::object());

Json to_json(const MetricReport& report);
/// Rows are shot counts plus Avg, columns are modes; "-" marks absent cells.
std::string render_table(const MetricReport& report);

// ---- predictions and generation ----

struct PredictionRecord {
  std::string query_id;
  /// Generated text, or a class score rendered as a JSON number.
  Json output;

  bool operator==(const PredictionRecord&) const = default;
};

void write_predictions(const std::filesystem::path& path,
                       const std::vector<PredictionRecord>& records);
std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path);

/// Produces outputs for assembled prompts: text for captioning and VQA, a
/// class score (higher means hateful) for rank classification.
class Generator {
 public:
  virtual ~Generator() = default;
  virtual std::vector<std::string> generate(std::span<const PromptSet> prompts) = 0;
  virtual std::vector<double> class_scores(std::span<const PromptSet> prompts) = 0;
  virtual std::string name() const = 0;
};

/// Offline stand-in: copies the target of the shot with the lowest
/// synthetic NLL; the class score sums +-(1 - nll) over yes/no shots.
class SyntheticGenerator final : public Generator {
 public:
  explicit SyntheticGenerator(EmbeddingMatrix latent) : latent_(std::move(latent)) {}
  std::vector<std::string> generate(std::span<const PromptSet> prompts) override;
  std::vector<double> class_scores(std::span<const PromptSet> prompts) override;
  std::string name() const override { return "synthetic"; }

 private:
  EmbeddingMatrix latent_;
};

/// POST /v1/generate {"task", "prompt", "image_refs", "template_id"} ->
/// {"completion"}. Class scores go through /v1/score as
/// nll("no") - nll("yes") for the assembled prompt.
class HttpGenerator final : public Generator {
 public:
  explicit HttpGenerator(std::string endpoint, HttpScorerOptions options = {});
  std::vector<std::string> generate(std::span<const PromptSet> prompts) override;
  std::vector<double> class_scores(std::span<const PromptSet> prompts) override;
  std::string name() const override { return "http:" + endpoint_; }

 private:
  std::string endpoint_;
  HttpScorerOptions options_;
  std::atomic<std::size_t> requests_{0};
};

/// Scores predictions against the queries' references with the task metric.
double evaluate_predictions(Task task, const Corpus& queries,
                            const std::vector<PredictionRecord>& predictions);

}  // namespace micl
