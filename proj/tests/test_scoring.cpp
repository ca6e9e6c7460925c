#include "doctest.h"
#include "micl/error.hpp"
#include "micl/prompt.hpp"
#include "micl/scoring.hpp"
#include "support.hpp"

using namespace micl;

namespace {

ExampleRecord rec(std::string id, Task task, std::optional<std::string> text,
                  std::vector<std::string> answers = {}, std::optional<int> label = std::nullopt) {
  ExampleRecord r;
  r.id = std::move(id);
  r.task = task;
  r.image_key = "img_" + r.id;
  r.text = std::move(text);
  r.answers = std::move(answers);
  r.label = label;
  return r;
}

std::vector<ScoreRecord> scores_for(const std::string& q, const std::vector<std::pair<std::string, double>>& v) {
  std::vector<ScoreRecord> out;
  for (const auto& [id, nll] : v) out.push_back({q, id, nll});
  return out;
}

/// Counts calls so cache behaviour is observable.
class CountingScorer final : public Scorer {
 public:
  explicit CountingScorer(EmbeddingMatrix latent) : inner_(std::move(latent)) {}
  std::vector<double> score(Task task, std::span<const ScorePair> pairs) override {
    calls += pairs.size();
    return inner_.score(task, pairs);
  }
  std::string name() const override { return "counting"; }
  std::size_t calls = 0;

 private:
  SyntheticScorer inner_;
};

EmbeddingMatrix random_latent(Rng& rng, const std::vector<std::string>& ids, std::size_t dim) {
  EmbeddingMatrix m(Modality::kText, dim);
  for (const auto& id : ids) m.append(id, testing::random_row(rng, dim));
  return m;
}

}  // namespace

TEST_SUITE("scoring") {

TEST_CASE("table 1 templates render byte for byte") {
  CHECK(render_example(Task::kCaptioning, rec("a", Task::kCaptioning, "a red bus"), true) ==
        "<image> Output: a red bus");
  CHECK(render_example(Task::kVqa, rec("b", Task::kVqa, "what color?", {"red"}), true) ==
        "<image> Question: what color? Short answer: red");
  CHECK(render_example(Task::kRankClassification, rec("c", Task::kRankClassification, "t", {}, 0), true) ==
        "<image> is an image with: ‘t’ written on it. Is it hateful? Answer: no");
  CHECK(render_example(Task::kRankClassification, rec("c", Task::kRankClassification, "t", {}, 1), true) ==
        "<image> is an image with: ‘t’ written on it. Is it hateful? Answer: yes");
}

TEST_CASE("targets can be omitted or overridden") {
  const auto vqa = rec("b", Task::kVqa, "what color?", {"red", "blue", "blue"});
  CHECK(render_example(Task::kVqa, vqa, false) == "<image> Question: what color? Short answer:");
  CHECK(render_example(Task::kVqa, vqa, true) == "<image> Question: what color? Short answer: blue");
  CHECK(render_example(Task::kVqa, vqa, true, "") == "<image> Question: what color? Short answer:");
  CHECK_THROWS_AS(render_example(Task::kVqa, rec("x", Task::kVqa, std::nullopt, {"a"}), true), Error);
}

TEST_CASE("one-shot scoring layout") {
  const auto shot = rec("s", Task::kCaptioning, "a cat");
  const auto query = rec("q", Task::kCaptioning, "a dog");
  const auto p = render_prompt(Task::kCaptioning, shot, &query, false);
  CHECK(p.prompt == "<image> Output: a cat<|endofchunk|><image> Output:");
  REQUIRE(p.target);
  CHECK(*p.target == "a dog");
}

TEST_CASE("synthetic scorer closed forms and oracle") {
  EmbeddingMatrix latent(Modality::kText, 3);
  latent.append("a", std::vector<float>{1, 2, 2});
  latent.append("b", std::vector<float>{1, 2, 2});
  latent.append("c", std::vector<float>{-2, -4, -4});
  CHECK(synthetic_score("a", "b", latent) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(synthetic_score("a", "c", latent) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK_THROWS_AS(synthetic_score("a", "zz", latent), Error);

  Rng rng(17);
  std::vector<std::string> ids;
  for (int i = 0; i < 40; ++i) ids.push_back("r" + std::to_string(i));
  const auto lat = random_latent(rng, ids, 12);
  for (int t = 0; t < 100; ++t) {
    const auto& x = ids[rng.uniform_index(ids.size())];
    const auto& y = ids[rng.uniform_index(ids.size())];
    const double ref = 1.0 - testing::scalar_cosine(lat.row(x), lat.row(y));
    CHECK(std::abs(synthetic_score(x, y, lat) - ref) < 1e-9);
  }
}

TEST_CASE("score_candidates with the synthetic scorer and a cache") {
  testing::TempDir dir("scoring_cache");
  Rng rng(23);
  const Corpus mem = testing::random_corpus(rng, {.count = 8});
  const Corpus qs = testing::random_corpus(rng, {.count = 3, .prefix = "q"});
  std::vector<std::string> ids;
  for (const auto* c : {&mem, &qs}) {
    for (const auto& r : c->records) ids.push_back(r.id);
  }
  const auto latent = random_latent(rng, ids, 6);

  ScoringJob empty{&qs, &mem, {}};
  CountingScorer counter(latent);
  CHECK(score_candidates(empty, counter).empty());

  ScoringJob job{&qs, &mem, {}};
  for (std::size_t i = 0; i < 3; ++i) {
    RetrievalResult r{qs.records[i].id, {}};
    for (std::size_t j = 0; j < 4; ++j) r.ranked.push_back({mem.records[(i + 2 * j) % 8].id, 0.0});
    job.shortlists.push_back(r);
  }
  const auto cache = dir / "cache.jsonl";
  const auto first = score_candidates(job, counter, cache);
  REQUIRE(first.size() == 12);
  CHECK(counter.calls == 12);
  for (const auto& s : first) {
    const double ref = 1.0 - testing::scalar_cosine(latent.row(s.query_id), latent.row(s.candidate_id));
    CHECK(std::abs(s.nll - ref) < 1e-9);
  }
  CHECK(std::is_sorted(first.begin(), first.end(), [](const auto& a, const auto& b) {
    return std::tie(a.query_id, a.candidate_id) < std::tie(b.query_id, b.candidate_id);
  }));

  const auto second = score_candidates(job, counter, cache);
  CHECK(counter.calls == 12);
  CHECK(second == first);
  CHECK(read_scores(cache) == first);

  write_scores(dir / "s.jsonl", first);
  CHECK(read_scores(dir / "s.jsonl") == first);
}

TEST_CASE("mining hand cases") {
  const auto s = scores_for("q", {{"a", 0.1}, {"b", 0.5}, {"c", 0.9}, {"d", 1.2}});
  auto m = mine_examples(s, 1);
  CHECK(m.positives == std::vector<std::string>{"a"});
  CHECK(m.negatives == std::vector<std::string>{"d"});
  m = mine_examples(s, 2);
  CHECK(m.positives == std::vector<std::string>{"a", "b"});
  CHECK(m.negatives == std::vector<std::string>{"d", "c"});

  // Fewer than 2K candidates: positives first, sets stay disjoint.
  m = mine_examples(scores_for("q", {{"a", 0.3}, {"b", 0.1}, {"c", 0.2}}), 2);
  CHECK(m.positives == std::vector<std::string>{"b", "c"});
  CHECK(m.negatives == std::vector<std::string>{"a"});

  // Ties break by ascending id in both slices, so a fully tied list of at
  // least 2K candidates yields the same id on both sides.
  m = mine_examples(scores_for("q", {{"z", 0.5}, {"y", 0.5}, {"x", 0.5}, {"w", 0.5}}), 1);
  CHECK(m.positives == std::vector<std::string>{"w"});
  CHECK(m.negatives == std::vector<std::string>{"w"});
}

TEST_CASE("mining matches full-sort slices and is monotone-invariant") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 10 + rng.uniform_index(60);
    const std::size_t k = 1 + rng.uniform_index(5);  // 2K <= n keeps the slices disjoint
    std::vector<ScoreRecord> s;
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse values force ties.
      s.push_back({"q", testing::pad_id("c", rng.uniform_index(1000)) + "_" + std::to_string(i),
                   std::round(rng.uniform() * 20.0) / 10.0});
    }
    auto asc = s;
    std::sort(asc.begin(), asc.end(), [](const auto& a, const auto& b) {
      return a.nll < b.nll || (a.nll == b.nll && a.candidate_id < b.candidate_id);
    });
    auto desc = s;
    std::sort(desc.begin(), desc.end(), [](const auto& a, const auto& b) {
      return a.nll > b.nll || (a.nll == b.nll && a.candidate_id < b.candidate_id);
    });
    const auto m = mine_examples(s, k);
    REQUIRE(m.positives.size() == k);
    for (std::size_t i = 0; i < k; ++i) {
      CHECK(m.positives[i] == asc[i].candidate_id);
      CHECK(m.negatives[i] == desc[i].candidate_id);
    }
    auto warped = s;
    for (auto& r : warped) r.nll = std::exp(3.0 * r.nll) + 0.5;
    CHECK(mine_examples(warped, k) == m);
  }
}

TEST_CASE("mine_all groups per query and persists") {
  testing::TempDir dir("mining_io");
  auto s = scores_for("q2", {{"a", 0.4}, {"b", 0.2}});
  const auto s1 = scores_for("q1", {{"c", 0.9}, {"d", 0.1}});
  s.insert(s.end(), s1.begin(), s1.end());
  const auto all = mine_all(s, 1);
  REQUIRE(all.size() == 2);
  CHECK(all[0].query_id == "q2");
  CHECK(all[0].positives == std::vector<std::string>{"b"});
  CHECK(all[1].negatives == std::vector<std::string>{"c"});
  write_mining(dir / "m.jsonl", all);
  CHECK(read_mining(dir / "m.jsonl") == all);
}

}  // TEST_SUITE
