#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "micl/adapter.hpp"
#include "micl/corpus.hpp"

namespace micl {

enum class SimilarityMode { kQIMI, kQTMT, kQIMIT, kCustom };

std::string_view to_string(SimilarityMode mode);
SimilarityMode parse_similarity_mode(std::string_view name);

struct PairWeight {
  Modality query;
  Modality memory;
  double weight = 1.0;

  bool operator==(const PairWeight&) const = default;
};

struct SimilarityConfig {
  SimilarityMode mode = SimilarityMode::kQIMIT;
  std::vector<PairWeight> pairs;
  /// Supervised mode when set: query rows go through the query-side
  /// matrices and memory rows through the context-side matrices.
  std::shared_ptr<const ProjectionAdapter> adapter;

  static SimilarityConfig from_mode(SimilarityMode mode);
  /// Image-question queries: (image, image) + (text, text).
  static SimilarityConfig vqa_default();
  static SimilarityConfig custom(std::vector<PairWeight> pairs);

  SimilarityConfig with_adapter(std::shared_ptr<const ProjectionAdapter> a) const {
    SimilarityConfig copy = *this;
    copy.adapter = std::move(a);
    return copy;
  }
};

struct ScoredCandidate {
  std::string id;
  double score = 0.0;

  bool operator==(const ScoredCandidate&) const = default;
};

struct RetrievalResult {
  std::string query_id;
  /// Descending score, ties ascending by id.
  std::vector<ScoredCandidate> ranked;

  bool operator==(const RetrievalResult&) const = default;
};

/// Strict weak order used everywhere a ranking is produced.
inline bool ranks_before(const ScoredCandidate& a, const ScoredCandidate& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

struct RetrievalOptions {
  /// Drops the memory item whose id equals the query id (leave-one-out).
  bool exclude_self = false;
  unsigned threads = 1;
};

/// Dot product with 32-bit lane accumulation and a 64-bit reduction.
double dot_f32(std::span<const float> a, std::span<const float> b);

/// Sum over configured pairs of weight * cos(query modality, memory modality).
double fused_similarity(const ExampleRecord& query, const Corpus& query_corpus,
                        const ExampleRecord& memory_item, const Corpus& memory,
                        const SimilarityConfig& cfg);

/// Exact search over a memory corpus. The memory-side vectors are prepared
/// once at construction; scores are bit-identical to fused_similarity.
class Retriever {
 public:
  Retriever(const Corpus& memory, SimilarityConfig cfg);

  const Corpus& memory() const noexcept { return *memory_; }
  const SimilarityConfig& config() const noexcept { return cfg_; }

  /// Score of the query against every memory record, in memory order.
  std::vector<double> score_all(const ExampleRecord& query, const Corpus& query_corpus) const;

  RetrievalResult topk(const ExampleRecord& query, const Corpus& query_corpus,
                       std::size_t k, const RetrievalOptions& options = {}) const;

  std::vector<RetrievalResult> topk_all(const Corpus& queries, std::size_t k,
                                        const RetrievalOptions& options = {}) const;

 private:
  struct PreparedPair {
    PairWeight pair;
    // One prepared row per memory record, dim floats each.
    std::vector<float> rows;
  };

  const Corpus* memory_;
  SimilarityConfig cfg_;
  std::size_t dim_ = 0;
  std::vector<PreparedPair> prepared_;
};

RetrievalResult retrieve_topk(const ExampleRecord& query, const Corpus& query_corpus,
                              const Corpus& memory, const SimilarityConfig& cfg,
                              std::size_t k, const RetrievalOptions& options = {});

struct ShortlistResult {
  /// One entry per training record, in corpus order.
  std::vector<RetrievalResult> shortlists;
  std::vector<std::string> warnings;
};

/// Top-n leave-one-out neighbours of every record within its own corpus.
ShortlistResult shortlist_candidates(const Corpus& train, const SimilarityConfig& cfg,
                                     std::size_t n = 50, unsigned threads = 1);

/// Two-stage retrieval: image-image cosine keeps `n_visual` candidates, then
/// text-side cosine re-ranks them (query text vs memory text when the query
/// has admissible text, else query image vs memory text).
RetrievalResult mmices_retrieve(const ExampleRecord& query, const Corpus& query_corpus,
                                const Corpus& memory, std::size_t n_visual, std::size_t k,
                                std::shared_ptr<const ProjectionAdapter> adapter = nullptr,
                                const RetrievalOptions& options = {});

nlohmann::json to_json(const RetrievalResult& result);
RetrievalResult retrieval_from_json(const nlohmann::json& row);
void write_retrievals(const std::filesystem::path& path,
                      const std::vector<RetrievalResult>& results);
std::vector<RetrievalResult> read_retrievals(const std::filesystem::path& path);

}  // namespace micl
