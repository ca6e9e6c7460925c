#include "micl/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "micl/error.hpp"
#include "micl/util.hpp"

namespace micl {

double synthetic_score(const ExampleRecord& query, const ExampleRecord& candidate,
                       const EmbeddingMatrix& latent) {
  return synthetic_score(query.id, candidate.id, latent);
}

double synthetic_score(const std::string& query_id, const std::string& candidate_id,
                       const EmbeddingMatrix& latent) {
  const auto a = latent.row(query_id);
  const auto b = latent.row(candidate_id);
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    throw Error(ErrorCode::kZeroNorm, "zero latent row for '" + query_id + "' or '" +
                                          candidate_id + "'");
  }
  const double cos = std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
  return 1.0 - cos;
}

std::vector<double> SyntheticScorer::score(Task, std::span<const ScorePair> pairs) {
  ++calls_;
  std::vector<double> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(synthetic_score(*p.query, *p.candidate, latent_));
  return out;
}

std::vector<ScoreRecord> score_candidates(const ScoringJob& job, Scorer& scorer,
                                          const std::optional<std::filesystem::path>& cache_path) {
  using Key = std::pair<std::string, std::string>;
  std::map<Key, double> cache;
  if (cache_path && std::filesystem::exists(*cache_path)) {
    for (auto& r : read_scores(*cache_path)) cache[{r.query_id, r.candidate_id}] = r.nll;
  }

  std::unordered_map<std::string, const ExampleRecord*> query_by_id;
  for (const auto& r : job.queries->records) query_by_id[r.id] = &r;
  std::unordered_map<std::string, const ExampleRecord*> memory_by_id;
  for (const auto& r : job.memory->records) memory_by_id[r.id] = &r;
  auto lookup = [](const auto& map, const std::string& id, const char* what) {
    auto it = map.find(id);
    if (it == map.end()) {
      throw Error(ErrorCode::kDanglingKey, std::string(what) + " '" + id + "' not in corpus");
    }
    return it->second;
  };

  std::vector<Key> wanted;
  // Pending pairs grouped by task so each scorer call is single-task.
  std::map<Task, std::vector<ScorePair>> pending;
  std::map<Task, std::vector<Key>> pending_keys;
  for (const auto& shortlist : job.shortlists) {
    const auto* q = lookup(query_by_id, shortlist.query_id, "query");
    for (const auto& c : shortlist.ranked) {
      Key key{shortlist.query_id, c.id};
      wanted.push_back(key);
      if (cache.count(key)) continue;
      const auto* m = lookup(memory_by_id, c.id, "candidate");
      pending[q->task].push_back({q, m});
      pending_keys[q->task].push_back(key);
    }
  }

  bool dirty = false;
  for (auto& [task, pairs] : pending) {
    const auto nll = scorer.score(task, pairs);
    if (nll.size() != pairs.size()) {
      throw Error(ErrorCode::kMalformedResponse,
                  scorer.name() + " returned " + std::to_string(nll.size()) + " scores for " +
                      std::to_string(pairs.size()) + " pairs");
    }
    const auto& keys = pending_keys[task];
    for (std::size_t i = 0; i < nll.size(); ++i) {
      if (!std::isfinite(nll[i]) || nll[i] < 0.0) {
        throw Error(ErrorCode::kMalformedResponse,
                    "invalid nll for (" + keys[i].first + ", " + keys[i].second + ")");
      }
      cache[keys[i]] = nll[i];
      dirty = true;
    }
  }

  if (cache_path && (dirty || !std::filesystem::exists(*cache_path))) {
    std::vector<ScoreRecord> all;
    all.reserve(cache.size());
    for (const auto& [key, nll] : cache) all.push_back({key.first, key.second, nll});
    write_scores(*cache_path, std::move(all));
  }

  std::sort(wanted.begin(), wanted.end());
  wanted.erase(std::unique(wanted.begin(), wanted.end()), wanted.end());
  std::vector<ScoreRecord> out;
  out.reserve(wanted.size());
  for (const auto& key : wanted) out.push_back({key.first, key.second, cache.at(key)});
  return out;
}

std::vector<ScoreRecord> read_scores(const std::filesystem::path& path) {
  std::vector<ScoreRecord> out;
  for (const auto& row : read_jsonl(path)) {
    try {
      out.push_back({row.at("query_id").get<std::string>(),
                     row.at("candidate_id").get<std::string>(), row.at("nll").get<double>()});
    } catch (const Json::exception& e) {
      throw Error(ErrorCode::kParse, path.string() + ": bad score row: " + e.what());
    }
  }
  return out;
}

void write_scores(const std::filesystem::path& path, std::vector<ScoreRecord> records) {
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
    return std::tie(a.query_id, a.candidate_id) < std::tie(b.query_id, b.candidate_id);
  });
  std::vector<Json> rows;
  rows.reserve(records.size());
  for (const auto& r : records) {
    rows.push_back({{"query_id", r.query_id}, {"candidate_id", r.candidate_id}, {"nll", r.nll}});
  }
  write_jsonl(path, rows);
}

MiningResult mine_examples(std::span<const ScoreRecord> scores, std::size_t k) {
  if (k == 0) throw Error(ErrorCode::kInvalidArgument, "mining K must be positive");
  if (scores.empty()) throw Error(ErrorCode::kInvalidArgument, "no scored candidates to mine");
  std::vector<const ScoreRecord*> order;
  order.reserve(scores.size());
  for (const auto& s : scores) order.push_back(&s);
  std::sort(order.begin(), order.end(), [](const ScoreRecord* a, const ScoreRecord* b) {
    if (a->nll != b->nll) return a->nll < b->nll;
    return a->candidate_id < b->candidate_id;
  });

  MiningResult result;
  result.query_id = scores.front().query_id;
  const std::size_t n_pos = std::min(k, order.size());
  for (std::size_t i = 0; i < n_pos; ++i) result.positives.push_back(order[i]->candidate_id);

  // Negatives are the highest-NLL slice with ties still ascending by id.
  // Short lists draw them only from what positives left over.
  const bool short_list = order.size() < 2 * k;
  std::vector<const ScoreRecord*> rest(
      order.begin() + static_cast<std::ptrdiff_t>(short_list ? n_pos : 0), order.end());
  std::sort(rest.begin(), rest.end(), [](const ScoreRecord* a, const ScoreRecord* b) {
    if (a->nll != b->nll) return a->nll > b->nll;
    return a->candidate_id < b->candidate_id;
  });
  const std::size_t n_neg = std::min(k, rest.size());
  for (std::size_t i = 0; i < n_neg; ++i) result.negatives.push_back(rest[i]->candidate_id);
  return result;
}

std::vector<MiningResult> mine_all(std::span<const ScoreRecord> scores, std::size_t k) {
  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<ScoreRecord>> grouped;
  for (const auto& s : scores) {
    auto [it, inserted] = grouped.try_emplace(s.query_id);
    if (inserted) order.push_back(s.query_id);
    it->second.push_back(s);
  }
  std::vector<MiningResult> out;
  out.reserve(order.size());
  for (const auto& id : order) out.push_back(mine_examples(grouped[id], k));
  return out;
}

void write_mining(const std::filesystem::path& path, const std::vector<MiningResult>& results) {
  std::vector<Json> rows;
  rows.reserve(results.size());
  for (const auto& r : results) {
    rows.push_back(
        {{"query_id", r.query_id}, {"positives", r.positives}, {"negatives", r.negatives}});
  }
  write_jsonl(path, rows);
}

std::vector<MiningResult> read_mining(const std::filesystem::path& path) {
  std::vector<MiningResult> out;
  for (const auto& row : read_jsonl(path)) {
    try {
      out.push_back({row.at("query_id").get<std::string>(),
                     row.at("positives").get<std::vector<std::string>>(),
                     row.at("negatives").get<std::vector<std::string>>()});
    } catch (const Json::exception& e) {
      throw Error(ErrorCode::kParse, path.string() + ": bad mining row: " + e.what());
    }
  }
  return out;
}

}  // namespace micl
