#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "micl/adapter.hpp"
#include "micl/optim.hpp"
#include "micl/retrieval.hpp"
#include "micl/scoring.hpp"
#include "micl/util.hpp"

namespace micl {

struct TrainConfig {
  std::size_t epochs = 30;
  double peak_lr = 1e-5;
  /// Defaults to 10% of the total step count when unset.
  std::optional<std::size_t> warmup_steps;
  std::size_t batch_size = 32;
  std::size_t k = 5;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  AdamWConfig adamw;
  /// Modality pairs whose fused similarity the loss is computed over.
  std::vector<PairWeight> pairs = SimilarityConfig::from_mode(SimilarityMode::kQIMIT).pairs;
  std::array<bool, kAdapterSlots> freeze{};

  std::size_t warmup_for(std::size_t total_steps) const;
  Json to_json() const;
  static TrainConfig from_json(const Json& j);
  std::string hash() const { return json_hash(to_json()); }
};

/// Throws kInvalidArgument on epochs, batch_size, k, or peak_lr out of range.
void validate(const TrainConfig& cfg);

struct TrainingTriple {
  std::string query_id;
  std::string positive_id;
  std::string negative_id;

  bool operator==(const TrainingTriple&) const = default;
};

/// N_b queries, each with one sampled positive and one sampled hard negative.
struct TrainingBatch {
  std::vector<TrainingTriple> items;

  bool operator==(const TrainingBatch&) const = default;
};

/// s[j][c]: similarity of query j with context slot c, where slot 2i is
/// query i's positive and slot 2i+1 its negative.
using SimilarityTable = std::vector<std::vector<double>>;

/// Mean over queries of -log softmax(s[j] / T)[2j]. Each query sees its own
/// hard negative plus both examples of every other query: 2N_b - 1 negatives.
double contrastive_loss(const SimilarityTable& s, double temperature);

/// dL/ds for the table above (softmax minus one-hot, scaled by 1/(N_b T)).
SimilarityTable contrastive_loss_similarity_grad(const SimilarityTable& s, double temperature);

/// Resolves batch ids to records. Queries and candidates may live in the
/// same corpus. Both corpora must outlive the source.
class BatchSource {
 public:
  BatchSource(const Corpus& queries, const Corpus& memory);

  const Corpus& queries() const noexcept { return *queries_; }
  const Corpus& memory() const noexcept { return *memory_; }
  const ExampleRecord& query(const std::string& id) const;
  const ExampleRecord& candidate(const std::string& id) const;

 private:
  const Corpus* queries_;
  const Corpus* memory_;
  std::unordered_map<std::string, std::size_t> query_index_;
  std::unordered_map<std::string, std::size_t> memory_index_;
};

SimilarityTable batch_similarities(const TrainingBatch& batch, const BatchSource& source,
                                   const ProjectionAdapter& adapter,
                                   std::span<const PairWeight> pairs);

double contrastive_loss(const TrainingBatch& batch, const BatchSource& source,
                        const ProjectionAdapter& adapter, std::span<const PairWeight> pairs,
                        double temperature);

struct LossGradient {
  double loss = 0.0;
  /// Indexed by AdapterSlot; frozen slots hold zeros.
  std::array<Matrix, kAdapterSlots> grads;
};

/// Analytic gradient of the loss w.r.t. every unfrozen projection, chained
/// through the cosine and the normalization Jacobian (I - e e^T) / ||z||.
LossGradient contrastive_loss_grad(const TrainingBatch& batch, const BatchSource& source,
                                   const ProjectionAdapter& adapter,
                                   std::span<const PairWeight> pairs, double temperature);

/// Draws batches without replacement within an epoch. Positives and
/// negatives are picked uniformly from each query's mined sets.
class BatchSampler {
 public:
  BatchSampler(std::vector<MiningResult> mining, std::size_t batch_size, std::uint64_t seed);

  std::size_t eligible() const noexcept { return mining_.size(); }
  std::size_t batches_per_epoch() const noexcept;
  /// Queries skipped for having an empty positive or negative set.
  const std::vector<std::string>& diagnostics() const noexcept { return diagnostics_; }

  std::vector<TrainingBatch> next_epoch();

 private:
  std::vector<MiningResult> mining_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::string> diagnostics_;
};

/// Picks one positive and one negative for each listed mining entry.
TrainingBatch sample_batch(Rng& rng, std::span<const MiningResult* const> chosen);

struct StepLog {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct AdapterOptimizerState {
  std::size_t step = 0;
  std::array<AdamWState, kAdapterSlots> slots;
};

struct TrainResult {
  ProjectionAdapter adapter;
  AdapterOptimizerState optimizer;
  std::vector<StepLog> log;
  std::vector<double> epoch_mean_loss;
  std::size_t total_steps = 0;
  std::size_t warmup_steps = 0;
  std::vector<std::string> diagnostics;
};

/// Full loop: epochs x ceil(eligible / N_b) AdamW steps on the mean batch
/// loss. Starts from `initial` (identity when absent); freeze flags from
/// the config are applied to the adapter.
TrainResult train(const Corpus& corpus, std::span<const MiningResult> mining,
                  const TrainConfig& cfg,
                  const std::optional<ProjectionAdapter>& initial = std::nullopt);

/// Mines every query's scores with cfg.k, then trains.
TrainResult train(const Corpus& corpus, std::span<const ScoreRecord> scores,
                  const TrainConfig& cfg);

void write_train_log(const std::filesystem::path& path, const std::vector<StepLog>& log);

struct Checkpoint {
  ProjectionAdapter adapter;
  std::optional<AdapterOptimizerState> optimizer;
  std::string cfg_hash;
  std::map<std::string, std::string> corpus_metadata;
};

/// JSON header line + little-endian f64 payload (matrices in slot order,
/// then m and v per slot when optimizer state is present).
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace micl
