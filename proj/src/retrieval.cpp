#include "micl/retrieval.hpp"

#include <algorithm>
#include <cctype>

#include "micl/error.hpp"
#include "micl/util.hpp"

namespace micl {

namespace {

std::vector<float> prepare(const ExampleRecord& record, const Corpus& corpus, Side side,
                           Modality modality, const ProjectionAdapter* adapter) {
  if (!admissible_input(record, corpus, side, modality)) {
    throw Error(ErrorCode::kUnresolvableModality,
                "record '" + record.id + "' has no usable " + std::string(to_string(modality)) +
                    " embedding on the " + (side == Side::kQuery ? "query" : "memory") +
                    " side");
  }
  const auto row = *corpus.embedding(record, modality);
  std::vector<double> z;
  if (adapter) {
    z = project(adapter->matrix(adapter_slot(side, modality)), row);
  } else {
    z.assign(row.begin(), row.end());
  }
  z = normalized(std::move(z));
  return std::vector<float>(z.begin(), z.end());
}

void check_pairs(const SimilarityConfig& cfg) {
  if (cfg.pairs.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "similarity config has no modality pairs");
  }
}

}  // namespace

std::string_view to_string(SimilarityMode mode) {
  switch (mode) {
    case SimilarityMode::kQIMI: return "QIMI";
    case SimilarityMode::kQTMT: return "QTMT";
    case SimilarityMode::kQIMIT: return "QIMIT";
    case SimilarityMode::kCustom: return "custom";
  }
  return "custom";
}

SimilarityMode parse_similarity_mode(std::string_view raw) {
  // Config files spell modes in lower case.
  std::string name(raw);
  if (name != "custom") {
    for (char& c : name) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  }
  if (name == "QIMI") return SimilarityMode::kQIMI;
  if (name == "QTMT") return SimilarityMode::kQTMT;
  if (name == "QIMIT") return SimilarityMode::kQIMIT;
  if (name == "custom") return SimilarityMode::kCustom;
  throw Error(ErrorCode::kParse, "unknown similarity mode '" + std::string(raw) + "'");
}

SimilarityConfig SimilarityConfig::from_mode(SimilarityMode mode) {
  SimilarityConfig cfg;
  cfg.mode = mode;
  switch (mode) {
    case SimilarityMode::kQIMI:
      cfg.pairs = {{Modality::kImage, Modality::kImage, 1.0}};
      break;
    case SimilarityMode::kQTMT:
      cfg.pairs = {{Modality::kText, Modality::kText, 1.0}};
      break;
    case SimilarityMode::kQIMIT:
      cfg.pairs = {{Modality::kImage, Modality::kImage, 1.0},
                   {Modality::kImage, Modality::kText, 1.0}};
      break;
    case SimilarityMode::kCustom:
      throw Error(ErrorCode::kInvalidArgument, "custom mode needs explicit pair weights");
  }
  return cfg;
}

SimilarityConfig SimilarityConfig::vqa_default() {
  return custom({{Modality::kImage, Modality::kImage, 1.0},
                 {Modality::kText, Modality::kText, 1.0}});
}

SimilarityConfig SimilarityConfig::custom(std::vector<PairWeight> pairs) {
  SimilarityConfig cfg;
  cfg.mode = SimilarityMode::kCustom;
  cfg.pairs = std::move(pairs);
  return cfg;
}

double dot_f32(std::span<const float> a, std::span<const float> b) {
  constexpr std::size_t kLanes = 8;
  float lanes[kLanes] = {};
  const std::size_t n = a.size();
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) lanes[l] += a[i + l] * b[i + l];
  }
  double sum = 0.0;
  for (float lane : lanes) sum += lane;
  for (; i < n; ++i) sum += static_cast<double>(a[i] * b[i]);
  return sum;
}

double fused_similarity(const ExampleRecord& query, const Corpus& query_corpus,
                        const ExampleRecord& memory_item, const Corpus& memory,
                        const SimilarityConfig& cfg) {
  check_pairs(cfg);
  const ProjectionAdapter* adapter = cfg.adapter.get();
  double total = 0.0;
  for (const auto& p : cfg.pairs) {
    const auto q = prepare(query, query_corpus, Side::kQuery, p.query, adapter);
    const auto m = prepare(memory_item, memory, Side::kContext, p.memory, adapter);
    total += p.weight * dot_f32(q, m);
  }
  return total;
}

Retriever::Retriever(const Corpus& memory, SimilarityConfig cfg)
    : memory_(&memory), cfg_(std::move(cfg)) {
  check_pairs(cfg_);
  for (const auto& p : cfg_.pairs) {
    PreparedPair prepared{p, {}};
    for (const auto& r : memory.records) {
      auto v = prepare(r, memory, Side::kContext, p.memory, cfg_.adapter.get());
      if (dim_ == 0) dim_ = v.size();
      prepared.rows.insert(prepared.rows.end(), v.begin(), v.end());
    }
    prepared_.push_back(std::move(prepared));
  }
}

std::vector<double> Retriever::score_all(const ExampleRecord& query,
                                         const Corpus& query_corpus) const {
  const std::size_t n = memory_->records.size();
  std::vector<double> scores(n, 0.0);
  for (const auto& p : prepared_) {
    const auto q = prepare(query, query_corpus, Side::kQuery, p.pair.query, cfg_.adapter.get());
    if (n > 0 && q.size() != dim_) {
      throw Error(ErrorCode::kDimensionMismatch, "query and memory embedding dims differ");
    }
    const std::span<const float> rows(p.rows);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] += p.pair.weight * dot_f32(q, rows.subspan(i * dim_, dim_));
    }
  }
  return scores;
}

RetrievalResult Retriever::topk(const ExampleRecord& query, const Corpus& query_corpus,
                                std::size_t k, const RetrievalOptions& options) const {
  if (k == 0) throw Error(ErrorCode::kInvalidArgument, "k must be positive");
  if (memory_->records.empty()) throw Error(ErrorCode::kEmptyMemory, "memory is empty");
  const auto scores = score_all(query, query_corpus);
  std::vector<ScoredCandidate> all;
  all.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto& id = memory_->records[i].id;
    if (options.exclude_self && id == query.id) continue;
    all.push_back({id, scores[i]});
  }
  const std::size_t keep = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(),
                    ranks_before);
  all.resize(keep);
  return {query.id, std::move(all)};
}

std::vector<RetrievalResult> Retriever::topk_all(const Corpus& queries, std::size_t k,
                                                 const RetrievalOptions& options) const {
  std::vector<RetrievalResult> out(queries.records.size());
  parallel_for(out.size(), options.threads, [&](std::size_t i) {
    out[i] = topk(queries.records[i], queries, k, options);
  });
  return out;
}

RetrievalResult retrieve_topk(const ExampleRecord& query, const Corpus& query_corpus,
                              const Corpus& memory, const SimilarityConfig& cfg,
                              std::size_t k, const RetrievalOptions& options) {
  if (memory.records.empty()) throw Error(ErrorCode::kEmptyMemory, "memory is empty");
  return Retriever(memory, cfg).topk(query, query_corpus, k, options);
}

ShortlistResult shortlist_candidates(const Corpus& train, const SimilarityConfig& cfg,
                                     std::size_t n, unsigned threads) {
  if (n == 0) throw Error(ErrorCode::kInvalidArgument, "shortlist size must be positive");
  ShortlistResult result;
  if (train.records.empty()) return result;
  if (train.records.size() < n + 1) {
    result.warnings.push_back("corpus has " + std::to_string(train.records.size()) +
                              " records; shortlists clamped to " +
                              std::to_string(train.records.size() - 1) + " candidates");
  }
  RetrievalOptions options;
  options.exclude_self = true;
  options.threads = threads;
  result.shortlists = Retriever(train, cfg).topk_all(train, n, options);
  return result;
}

RetrievalResult mmices_retrieve(const ExampleRecord& query, const Corpus& query_corpus,
                                const Corpus& memory, std::size_t n_visual, std::size_t k,
                                std::shared_ptr<const ProjectionAdapter> adapter,
                                const RetrievalOptions& options) {
  if (k == 0) throw Error(ErrorCode::kInvalidArgument, "k must be positive");
  if (n_visual < k) throw Error(ErrorCode::kInvalidArgument, "n_visual must be >= k");
  auto visual = SimilarityConfig::from_mode(SimilarityMode::kQIMI).with_adapter(adapter);
  const auto stage1 = retrieve_topk(query, query_corpus, memory, visual, n_visual, options);

  const Modality query_side = admissible_input(query, query_corpus, Side::kQuery, Modality::kText)
                                  ? Modality::kText
                                  : Modality::kImage;
  auto textual = SimilarityConfig::custom({{query_side, Modality::kText, 1.0}})
                     .with_adapter(std::move(adapter));

  std::unordered_map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < memory.records.size(); ++i) position[memory.records[i].id] = i;

  std::vector<ScoredCandidate> reranked;
  reranked.reserve(stage1.ranked.size());
  for (const auto& c : stage1.ranked) {
    const auto& item = memory.records[position.at(c.id)];
    reranked.push_back({c.id, fused_similarity(query, query_corpus, item, memory, textual)});
  }
  std::sort(reranked.begin(), reranked.end(), ranks_before);
  if (reranked.size() > k) reranked.resize(k);
  return {query.id, std::move(reranked)};
}

nlohmann::json to_json(const RetrievalResult& result) {
  Json ranked = Json::array();
  for (const auto& c : result.ranked) ranked.push_back({{"id", c.id}, {"score", c.score}});
  return {{"query_id", result.query_id}, {"ranked", std::move(ranked)}};
}

RetrievalResult retrieval_from_json(const nlohmann::json& row) {
  RetrievalResult r;
  try {
    r.query_id = row.at("query_id").get<std::string>();
    for (const auto& c : row.at("ranked")) {
      r.ranked.push_back({c.at("id").get<std::string>(), c.at("score").get<double>()});
    }
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("bad retrieval row: ") + e.what());
  }
  return r;
}

void write_retrievals(const std::filesystem::path& path,
                      const std::vector<RetrievalResult>& results) {
  std::vector<Json> rows;
  rows.reserve(results.size());
  for (const auto& r : results) rows.push_back(to_json(r));
  write_jsonl(path, rows);
}

std::vector<RetrievalResult> read_retrievals(const std::filesystem::path& path) {
  std::vector<RetrievalResult> out;
  for (const auto& row : read_jsonl(path)) out.push_back(retrieval_from_json(row));
  return out;
}

}  // namespace micl
