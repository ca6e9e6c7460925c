#include "micl/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <unordered_map>

#include "micl/error.hpp"
#include "micl/prompt.hpp"

namespace micl {

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string image_ref_of(const ExampleRecord& r) { return r.image_key.value_or(r.id); }

using NgramCounts = std::map<std::vector<std::string>, double>;

std::array<NgramCounts, 4> ngram_counts(const std::vector<std::string>& tokens) {
  std::array<NgramCounts, 4> out;
  for (std::size_t n = 1; n <= 4; ++n) {
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
      out[n - 1][std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + n)] += 1.0;
    }
  }
  return out;
}

struct TfIdf {
  std::array<NgramCounts, 4> vec;
  std::array<double, 4> norm{};
  double length = 0.0;
};

TfIdf tfidf(const std::vector<std::string>& tokens,
            const std::map<std::vector<std::string>, double>& df, double ref_len) {
  TfIdf out;
  const auto counts = ngram_counts(tokens);
  for (std::size_t n = 0; n < 4; ++n) {
    for (const auto& [gram, tf] : counts[n]) {
      auto it = df.find(gram);
      const double d = std::log(std::max(1.0, it == df.end() ? 0.0 : it->second));
      const double v = tf * (ref_len - d);
      out.vec[n][gram] = v;
      out.norm[n] += v * v;
    }
    out.norm[n] = std::sqrt(out.norm[n]);
  }
  out.length = static_cast<double>(tokens.size());
  return out;
}

double cider_sim(const TfIdf& hyp, const TfIdf& ref) {
  constexpr double kSigma = 6.0;
  const double delta = hyp.length - ref.length;
  double total = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    double val = 0.0;
    for (const auto& [gram, v] : hyp.vec[n]) {
      auto it = ref.vec[n].find(gram);
      if (it != ref.vec[n].end()) val += std::min(v, it->second) * it->second;
    }
    if (hyp.norm[n] != 0.0 && ref.norm[n] != 0.0) {
      val /= hyp.norm[n] * ref.norm[n];
    } else {
      val = 0.0;
    }
    total += val * std::exp(-(delta * delta) / (2.0 * kSigma * kSigma));
  }
  return total / 4.0;
}

}  // namespace

std::string_view to_string(OrderPolicy policy) {
  switch (policy) {
    case OrderPolicy::kAscending: return "ascending";
    case OrderPolicy::kDescending: return "descending";
    case OrderPolicy::kRandom: return "random";
  }
  return "ascending";
}

OrderPolicy parse_order_policy(std::string_view s) {
  if (s == "ascending") return OrderPolicy::kAscending;
  if (s == "descending") return OrderPolicy::kDescending;
  if (s == "random") return OrderPolicy::kRandom;
  throw Error(ErrorCode::kInvalidArgument, "unknown order policy '" + std::string(s) + "'");
}

std::string Shot::rendered() const { return target.empty() ? input : input + " " + target; }

std::string PromptSet::text() const {
  std::string out;
  for (const auto& s : shots) {
    out += s.rendered();
    out += kChunkSeparator;
  }
  out += query_suffix;
  return out;
}

std::vector<std::string> PromptSet::image_refs() const {
  std::vector<std::string> out;
  for (const auto& s : shots) out.push_back(s.image_ref);
  out.push_back(query_image_ref);
  return out;
}

PromptSet assemble_prompt_set(const ExampleRecord& query, const RetrievalResult& retrieval,
                              const Corpus& memory, std::size_t shots, OrderPolicy policy,
                              std::uint64_t seed, std::vector<Diagnostic>* diagnostics) {
  PromptSet out;
  out.query_id = query.id;
  out.task = query.task;
  out.query_image_ref = image_ref_of(query);
  out.query_suffix = render_example(query.task, query, false);

  std::size_t n = shots;
  if (retrieval.ranked.size() < shots) {
    n = retrieval.ranked.size();
    if (diagnostics) {
      diagnostics->push_back({query.id, "requested " + std::to_string(shots) + " shots, only " +
                                            std::to_string(n) + " candidates available"});
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto& cand = retrieval.ranked[i];
    const ExampleRecord* ex = memory.find(cand.id);
    if (!ex) {
      throw Error(ErrorCode::kDanglingKey,
                  "retrieved id '" + cand.id + "' for query '" + query.id + "' not in memory");
    }
    auto target = target_text(*ex);
    if (!target) {
      throw Error(ErrorCode::kMissingField, "shot '" + ex->id + "' has no target");
    }
    out.shots.push_back({ex->id, image_ref_of(*ex), render_example(query.task, *ex, false),
                         std::move(*target), cand.score});
  }
  switch (policy) {
    case OrderPolicy::kDescending:
      break;
    case OrderPolicy::kAscending:
      std::reverse(out.shots.begin(), out.shots.end());
      break;
    case OrderPolicy::kRandom: {
      Rng rng(seed ^ fnv1a(query.id));
      rng.shuffle(out.shots);
      break;
    }
  }
  return out;
}

PromptSet mask_ablation(const PromptSet& prompt, double rate, std::uint64_t seed) {
  if (prompt.task != Task::kCaptioning) {
    throw Error(ErrorCode::kInvalidArgument, "caption masking applies to captioning prompts");
  }
  if (!(rate >= 0.0 && rate <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "mask rate must be in [0, 1]");
  }
  PromptSet out = prompt;
  const auto masked =
      static_cast<std::size_t>(std::floor(rate * static_cast<double>(prompt.shots.size())));
  std::vector<std::size_t> idx(prompt.shots.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed ^ fnv1a(prompt.query_id));
  rng.shuffle(idx);
  for (std::size_t i = 0; i < masked; ++i) out.shots[idx[i]].target.clear();
  return out;
}

PromptSet permute_shots(const PromptSet& prompt, std::span<const std::size_t> order) {
  if (order.size() != prompt.shots.size()) {
    throw Error(ErrorCode::kInvalidArgument, "permutation size differs from shot count");
  }
  std::vector<bool> seen(order.size(), false);
  PromptSet out = prompt;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] >= order.size() || seen[order[i]]) {
      throw Error(ErrorCode::kInvalidArgument, "not a permutation");
    }
    seen[order[i]] = true;
    out.shots[i] = prompt.shots[order[i]];
  }
  return out;
}

std::vector<std::string> caption_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isspace(c) || std::ispunct(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<double> cider_d_per_query(std::span<const std::string> predictions,
                                      std::span<const std::vector<std::string>> references) {
  if (predictions.size() != references.size()) {
    throw Error(ErrorCode::kInvalidArgument, "predictions and references differ in length");
  }
  std::vector<std::vector<std::vector<std::string>>> ref_tokens(references.size());
  std::map<std::vector<std::string>, double> df;
  for (std::size_t i = 0; i < references.size(); ++i) {
    if (references[i].empty()) {
      throw Error(ErrorCode::kInvalidArgument, "query #" + std::to_string(i) + " has no references");
    }
    std::set<std::vector<std::string>> grams;
    for (const auto& r : references[i]) {
      ref_tokens[i].push_back(caption_tokens(r));
      for (const auto& counts : ngram_counts(ref_tokens[i].back())) {
        for (const auto& [g, _] : counts) grams.insert(g);
      }
    }
    for (const auto& g : grams) df[g] += 1.0;
  }
  const double ref_len = std::log(static_cast<double>(references.size()));
  std::vector<double> out;
  out.reserve(predictions.size());
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const TfIdf hyp = tfidf(caption_tokens(predictions[i]), df, ref_len);
    double sum = 0.0;
    for (const auto& r : ref_tokens[i]) sum += cider_sim(hyp, tfidf(r, df, ref_len));
    out.push_back(10.0 * sum / static_cast<double>(ref_tokens[i].size()));
  }
  return out;
}

double cider_d(std::span<const std::string> predictions,
               std::span<const std::vector<std::string>> references) {
  const auto per = cider_d_per_query(predictions, references);
  if (per.empty()) throw Error(ErrorCode::kInvalidArgument, "empty reference set");
  return std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(per.size());
}

std::string normalize_answer(std::string_view answer) {
  std::string out;
  for (const auto& tok : caption_tokens(answer)) {
    if (tok == "a" || tok == "an" || tok == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

double vqa_accuracy(std::string_view prediction, std::span<const std::string> answers) {
  if (answers.empty()) throw Error(ErrorCode::kInvalidArgument, "no ground-truth answers");
  const std::string p = normalize_answer(prediction);
  std::size_t matches = 0;
  for (const auto& a : answers) matches += normalize_answer(a) == p;
  return std::min(static_cast<double>(matches) / 3.0, 1.0);
}

double auc_roc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw Error(ErrorCode::kInvalidArgument, "scores and labels differ in length");
  }
  std::size_t pos = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) {
      throw Error(ErrorCode::kInvalidArgument, "labels must be 0 or 1");
    }
    if (!std::isfinite(scores[i])) throw Error(ErrorCode::kNonFinite, "non-finite score");
    pos += labels[i] == 1;
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) {
    throw Error(ErrorCode::kInvalidArgument, "auc_roc needs both classes");
  }
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t) {
      if (labels[idx[t]] == 1) rank_sum += midrank;
    }
    i = j;
  }
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

std::vector<std::array<std::size_t, 3>> shot_permutations() {
  std::array<std::size_t, 3> perm{0, 1, 2};
  std::vector<std::array<std::size_t, 3>> out;
  do {
    out.push_back(perm);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return out;
}

PermutationStudy permutation_study(std::span<const double> per_order) {
  PermutationStudy out;
  out.orders = shot_permutations();
  if (per_order.size() != out.orders.size()) {
    throw Error(ErrorCode::kInvalidArgument,
                "permutation study needs " + std::to_string(out.orders.size()) +
                    " results, got " + std::to_string(per_order.size()));
  }
  out.per_order.assign(per_order.begin(), per_order.end());
  out.mean = std::accumulate(per_order.begin(), per_order.end(), 0.0) /
             static_cast<double>(per_order.size());
  double var = 0.0;
  for (double v : per_order) var += (v - out.mean) * (v - out.mean);
  out.stddev = std::sqrt(var / static_cast<double>(per_order.size()));
  return out;
}

PermutationStudy permutation_study(
    const std::function<double(const std::array<std::size_t, 3>&)>& evaluate) {
  std::vector<double> values;
  for (const auto& p : shot_permutations()) values.push_back(evaluate(p));
  return permutation_study(values);
}

std::optional<double> MetricReport::cell(const std::string& mode, std::size_t shots) const {
  auto m = values.find(mode);
  if (m == values.end()) return std::nullopt;
  auto c = m->second.find(shots);
  if (c == m->second.end()) return std::nullopt;
  return c->second;
}

std::optional<double> MetricReport::average(const std::string& mode) const {
  if (shot_counts.empty()) return std::nullopt;
  double sum = 0.0;
  for (std::size_t s : shot_counts) {
    auto v = cell(mode, s);
    if (!v) return std::nullopt;
    sum += *v;
  }
  return sum / static_cast<double>(shot_counts.size());
}

std::string_view metric_name(Task task) {
  switch (task) {
    case Task::kCaptioning: return "CIDEr-D";
    case Task::kVqa: return "vqa_accuracy";
    case Task::kRankClassification: return "auc_roc";
  }
  return "CIDEr-D";
}

MetricReport shot_sweep_report(Task task, std::span<const std::string> modes,
                               std::span<const std::size_t> shot_counts,
                               const std::map<std::string, std::map<std::size_t, double>>& cells,
                               Json metadata) {
  MetricReport out;
  out.task = task;
  out.metric = metric_name(task);
  out.modes.assign(modes.begin(), modes.end());
  out.shot_counts.assign(shot_counts.begin(), shot_counts.end());
  out.metadata = std::move(metadata);
  for (const auto& mode : modes) {
    for (std::size_t s : shot_counts) {
      auto m = cells.find(mode);
      const double* v = nullptr;
      if (m != cells.end()) {
        auto c = m->second.find(s);
        if (c != m->second.end()) v = &c->second;
      }
      if (!v) {
        out.diagnostics.push_back("missing cell: mode " + mode + ", " + std::to_string(s) +
                                  " shots");
        continue;
      }
      if (!std::isfinite(*v)) {
        throw Error(ErrorCode::kNonFinite,
                    "non-finite metric for mode " + mode + ", " + std::to_string(s) + " shots");
      }
      out.values[mode][s] = *v;
    }
  }
  return out;
}

Json to_json(const MetricReport& report) {
  Json rows = Json::array();
  for (std::size_t s : report.shot_counts) {
    Json values = Json::object();
    for (const auto& m : report.modes) {
      auto v = report.cell(m, s);
      values[m] = v ? Json(*v) : Json(nullptr);
    }
    rows.push_back({{"shots", s}, {"values", std::move(values)}});
  }
  Json avg = Json::object();
  for (const auto& m : report.modes) {
    auto v = report.average(m);
    avg[m] = v ? Json(*v) : Json(nullptr);
  }
  return {{"task", to_string(report.task)},
          {"metric", report.metric},
          {"modes", report.modes},
          {"shot_counts", report.shot_counts},
          {"rows", std::move(rows)},
          {"avg", std::move(avg)},
          {"metadata", report.metadata},
          {"diagnostics", report.diagnostics}};
}

std::string render_table(const MetricReport& report) {
  auto fmt = [](std::optional<double> v) -> std::string {
    if (!v) return "-";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", *v);
    return buf;
  };
  std::vector<std::vector<std::string>> grid;
  grid.push_back({"Shots"});
  for (const auto& m : report.modes) grid[0].push_back(m);
  for (std::size_t s : report.shot_counts) {
    std::vector<std::string> row{std::to_string(s)};
    for (const auto& m : report.modes) row.push_back(fmt(report.cell(m, s)));
    grid.push_back(std::move(row));
  }
  std::vector<std::string> avg{"Avg"};
  for (const auto& m : report.modes) avg.push_back(fmt(report.average(m)));
  grid.push_back(std::move(avg));

  std::vector<std::size_t> width(grid[0].size(), 0);
  for (const auto& row : grid) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::string out = report.metric + "\n";
  for (const auto& row : grid) {
    std::string line = row[0] + std::string(width[0] - row[0].size(), ' ');
    for (std::size_t c = 1; c < row.size(); ++c) {
      line += "  ";
      line += std::string(width[c] - row[c].size(), ' ') + row[c];
    }
    out += line + "\n";
  }
  return out;
}

void write_predictions(const std::filesystem::path& path,
                       const std::vector<PredictionRecord>& records) {
  std::vector<Json> rows;
  rows.reserve(records.size());
  for (const auto& r : records) rows.push_back({{"query_id", r.query_id}, {"output", r.output}});
  write_jsonl(path, rows);
}

std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path) {
  std::vector<PredictionRecord> out;
  for (const auto& j : read_jsonl(path)) {
    if (!j.contains("query_id") || !j["query_id"].is_string() || !j.contains("output")) {
      throw Error(ErrorCode::kMissingField, path.string() + ": prediction needs query_id and output");
    }
    out.push_back({j["query_id"].get<std::string>(), j["output"]});
  }
  return out;
}

std::vector<std::string> SyntheticGenerator::generate(std::span<const PromptSet> prompts) {
  std::vector<std::string> out;
  out.reserve(prompts.size());
  for (const auto& p : prompts) {
    const Shot* best = nullptr;
    double best_nll = 0.0;
    for (const auto& s : p.shots) {
      if (s.target.empty()) continue;
      const double nll = synthetic_score(p.query_id, s.example_id, latent_);
      if (!best || nll < best_nll || (nll == best_nll && s.example_id < best->example_id)) {
        best = &s;
        best_nll = nll;
      }
    }
    out.push_back(best ? best->target : std::string());
  }
  return out;
}

std::vector<double> SyntheticGenerator::class_scores(std::span<const PromptSet> prompts) {
  std::vector<double> out;
  out.reserve(prompts.size());
  for (const auto& p : prompts) {
    double score = 0.0;
    for (const auto& s : p.shots) {
      if (s.target.empty()) continue;
      const double w = 1.0 - synthetic_score(p.query_id, s.example_id, latent_);
      score += s.target == "yes" ? w : -w;
    }
    out.push_back(score);
  }
  return out;
}

double evaluate_predictions(Task task, const Corpus& queries,
                            const std::vector<PredictionRecord>& predictions) {
  std::unordered_map<std::string, const PredictionRecord*> by_id;
  for (const auto& p : predictions) {
    if (!by_id.emplace(p.query_id, &p).second) {
      throw Error(ErrorCode::kDuplicateId, "duplicate prediction for '" + p.query_id + "'");
    }
  }
  auto lookup = [&](const ExampleRecord& q) -> const Json& {
    auto it = by_id.find(q.id);
    if (it == by_id.end()) {
      throw Error(ErrorCode::kMissingField, "no prediction for query '" + q.id + "'");
    }
    return it->second->output;
  };
  switch (task) {
    case Task::kCaptioning: {
      std::vector<std::string> preds;
      std::vector<std::vector<std::string>> refs;
      for (const auto& q : queries.records) {
        preds.push_back(lookup(q).get<std::string>());
        if (!q.answers.empty()) {
          refs.push_back(q.answers);
        } else if (q.text) {
          refs.push_back({*q.text});
        } else {
          throw Error(ErrorCode::kMissingField, "query '" + q.id + "' has no reference captions");
        }
      }
      return cider_d(preds, refs);
    }
    case Task::kVqa: {
      if (queries.records.empty()) throw Error(ErrorCode::kInvalidArgument, "no queries");
      double sum = 0.0;
      for (const auto& q : queries.records) {
        sum += vqa_accuracy(lookup(q).get<std::string>(), q.answers);
      }
      return sum / static_cast<double>(queries.records.size());
    }
    case Task::kRankClassification: {
      std::vector<double> scores;
      std::vector<int> labels;
      for (const auto& q : queries.records) {
        if (!q.label) throw Error(ErrorCode::kMissingField, "query '" + q.id + "' has no label");
        scores.push_back(lookup(q).get<double>());
        labels.push_back(*q.label);
      }
      return auc_roc(scores, labels);
    }
  }
  return 0.0;
}

}  // namespace micl
