// Acceptance checks: one PASS/FAIL line per criterion, exit status 0 iff all pass.
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

#include "micl/error.hpp"
#include "micl/eval.hpp"
#include "micl/optim.hpp"
#include "micl/pipeline.hpp"
#include "micl/prompt.hpp"
#include "micl/scoring.hpp"
#include "micl/synthetic.hpp"
#include "micl/trainer.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace micl;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

// ---------------------------------------------------------------- 1

Outcome loss_closed_forms() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::size_t nb : {1u, 2u, 8u}) {
    const SimilarityTable s(nb, std::vector<double>(2 * nb, 0.37));
    worst = std::max(worst, std::abs(contrastive_loss(s, 1.0) - std::log(2.0 * nb)));
  }
  const SimilarityTable asym = {{0.8, 0.2}};
  worst = std::max(worst, std::abs(contrastive_loss(asym, 1.0) - std::log1p(std::exp(-0.6))));
  const double secs = seconds_since(t0);
  return {worst <= 1e-9 && secs < 1.0, fmt("max error %.3g, %.3f s", worst, secs)};
}

// ---------------------------------------------------------------- 2

Outcome gradient_check() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  double worst = 0.0;
  const int configs = 120;
  for (int i = 0; i < configs; ++i) {
    auto g = oracle::random_grad_case(rng, 8, 4);
    // Some configurations freeze a random subset.
    if (i % 4 == 3) g.adapter.frozen[rng.uniform_index(kAdapterSlots)] = true;
    worst = std::max(worst, oracle::max_gradient_error(g, 1e-6));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-5 && secs < 30.0,
          fmt("%g configs, max relative error %.3g, %.2f s", configs, worst, secs)};
}

// ---------------------------------------------------------------- 3 and 4

struct RandomCase {
  Corpus memory;
  Corpus queries;
  std::size_t k;
  std::size_t n_visual;
};

RandomCase random_case(Rng& rng) {
  RandomCase c;
  const std::size_t n = 1 + rng.uniform_index(500);
  const std::size_t dim = 1 + rng.uniform_index(64);
  c.memory = testing::random_corpus(rng, {.count = n, .dim = dim, .task = Task::kVqa});
  c.queries = testing::random_corpus(rng, {.count = 3, .dim = dim, .task = Task::kVqa, .prefix = "q"});
  // Exact duplicates exercise the id tie-break.
  if (n > 4) {
    for (int d = 0; d < 3; ++d) {
      const std::size_t src = rng.uniform_index(n);
      auto r = c.memory.records[src];
      r.id = "dup" + std::to_string(d) + "_" + r.id;
      const auto img = c.memory.image_embeddings->row(*r.image_key);
      r.image_key = "img_" + r.id;
      c.memory.image_embeddings->append(*r.image_key, std::vector<float>(img.begin(), img.end()));
      const auto txt = c.memory.text_embeddings->row(c.memory.records[src].id);
      c.memory.text_embeddings->append(r.id, std::vector<float>(txt.begin(), txt.end()));
      c.memory.records.push_back(r);
    }
  }
  if (rng.uniform() < 0.5) {
    c.memory = normalize_corpus(c.memory);
    c.queries = normalize_corpus(c.queries);
  }
  c.k = 1 + rng.uniform_index(20);
  c.n_visual = c.k + rng.uniform_index(60);
  return c;
}

RetrievalResult mmices_oracle(const ExampleRecord& q, const Corpus& qc, const Corpus& mem, std::size_t n_visual,
                              std::size_t k) {
  const auto stage1 =
      testing::full_sort_oracle(q, qc, mem, SimilarityConfig::from_mode(SimilarityMode::kQIMI), n_visual);
  const auto text = SimilarityConfig::custom({{Modality::kText, Modality::kText, 1.0}});
  std::vector<ScoredCandidate> all;
  for (const auto& c : stage1.ranked) all.push_back({c.id, fused_similarity(q, qc, *mem.find(c.id), mem, text)});
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.score > b.score || (a.score == b.score && a.id < b.id);
  });
  if (all.size() > k) all.resize(k);
  return {q.id, all};
}

std::string bytes_of(const std::vector<RetrievalResult>& rs) {
  std::string out;
  for (const auto& r : rs) out += to_json(r).dump() + "\n";
  return out;
}

Outcome retrieval_oracle(std::vector<RandomCase>& corpora) {
  const auto t0 = Clock::now();
  Rng rng(77);
  std::size_t checked = 0, mismatches = 0;
  const SimilarityMode modes[] = {SimilarityMode::kQIMI, SimilarityMode::kQTMT, SimilarityMode::kQIMIT};
  for (int t = 0; t < 1000; ++t) {
    corpora.push_back(random_case(rng));
    const auto& c = corpora.back();
    for (auto mode : modes) {
      const auto cfg = SimilarityConfig::from_mode(mode);
      const Retriever retriever(c.memory, cfg);
      for (const auto& q : c.queries.records) {
        ++checked;
        if (!(retriever.topk(q, c.queries, c.k) == testing::full_sort_oracle(q, c.queries, c.memory, cfg, c.k))) {
          ++mismatches;
        }
      }
    }
    for (const auto& q : c.queries.records) {
      ++checked;
      if (!(mmices_retrieve(q, c.queries, c.memory, c.n_visual, c.k) ==
            mmices_oracle(q, c.queries, c.memory, c.n_visual, c.k))) {
        ++mismatches;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 60.0,
          fmt("%g corpora, %g query results, %g mismatches", 1000, static_cast<double>(checked),
              static_cast<double>(mismatches)) +
              fmt(", %.1f s", secs)};
}

Outcome identity_equivalence(const std::vector<RandomCase>& corpora) {
  std::size_t mismatches = 0;
  for (const auto& c : corpora) {
    const auto dim = c.memory.image_embeddings->dim();
    auto id = std::make_shared<const ProjectionAdapter>(ProjectionAdapter::identity(dim));
    for (auto mode : {SimilarityMode::kQIMI, SimilarityMode::kQTMT, SimilarityMode::kQIMIT}) {
      const auto cfg = SimilarityConfig::from_mode(mode);
      const auto plain = Retriever(c.memory, cfg).topk_all(c.queries, c.k);
      const auto sup = Retriever(c.memory, cfg.with_adapter(id)).topk_all(c.queries, c.k);
      if (bytes_of(plain) != bytes_of(sup)) ++mismatches;
    }
    std::vector<RetrievalResult> plain, sup;
    for (const auto& q : c.queries.records) {
      plain.push_back(mmices_retrieve(q, c.queries, c.memory, c.n_visual, c.k));
      sup.push_back(mmices_retrieve(q, c.queries, c.memory, c.n_visual, c.k, id));
    }
    if (bytes_of(plain) != bytes_of(sup)) ++mismatches;
  }
  return {mismatches == 0,
          fmt("%g corpora x 4 modes, %g byte mismatches", static_cast<double>(corpora.size()),
              static_cast<double>(mismatches))};
}

// ---------------------------------------------------------------- 5

Outcome synthetic_gain() {
  const auto t0 = Clock::now();
  SyntheticSpec spec;  // 2000 memory, 200 queries, dim 64
  auto data = make_synthetic(spec);
  data.memory = normalize_corpus(data.memory);
  data.queries = normalize_corpus(data.queries);

  const auto qimit = SimilarityConfig::from_mode(SimilarityMode::kQIMIT);
  const auto shortlists = shortlist_candidates(data.memory, qimit, 50);
  SyntheticScorer scorer(data.latent);
  const auto scores = score_candidates({&data.memory, &data.memory, shortlists.shortlists}, scorer);
  TrainConfig cfg;  // K 5, 30 epochs, N_b 32, peak lr 1e-5
  const auto result = train(data.memory, scores, cfg);

  const bool loss_down = result.epoch_mean_loss.back() < result.epoch_mean_loss.front();
  auto adapter = std::make_shared<const ProjectionAdapter>(result.adapter);
  const Retriever base(data.memory, qimit);
  const Retriever sup(data.memory, qimit.with_adapter(adapter));
  int agree_base = 0, agree_sup = 0;
  for (const auto& q : data.queries.records) {
    // Oracle: the memory item with the lowest synthetic NLL, ties by id.
    const ExampleRecord* best = nullptr;
    double best_nll = 0.0;
    for (const auto& m : data.memory.records) {
      const double nll = synthetic_score(q, m, data.latent);
      if (!best || nll < best_nll || (nll == best_nll && m.id < best->id)) {
        best = &m;
        best_nll = nll;
      }
    }
    agree_base += base.topk(q, data.queries, 1).ranked[0].id == best->id;
    agree_sup += sup.topk(q, data.queries, 1).ranked[0].id == best->id;
  }
  const double secs = seconds_since(t0);
  const bool gain = agree_sup >= 2 * agree_base && agree_sup > 0;
  return {loss_down && gain && secs < 600.0,
          fmt("epoch loss %.6f -> %.6f", result.epoch_mean_loss.front(), result.epoch_mean_loss.back()) +
              fmt(", top-1 agreement QIMIT %g vs MSIER %g of 200", agree_base, agree_sup) +
              fmt(", %.1f s", secs)};
}

// ---------------------------------------------------------------- 6

Outcome metric_oracles() {
  Rng rng(606);
  const std::vector<std::string> vocab = {"a", "man", "riding", "horse", "on", "beach", "two", "dogs",
                                          "play", "with", "frisbee", "red", "car", "parked", "street"};
  auto sentence = [&](std::size_t max_len) {
    std::string s;
    const std::size_t n = 1 + rng.uniform_index(max_len);
    for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + vocab[rng.uniform_index(vocab.size())];
    return s;
  };
  double cider_err = 0.0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + rng.uniform_index(15);
    std::vector<std::string> preds;
    std::vector<std::vector<std::string>> refs(n);
    for (std::size_t i = 0; i < n; ++i) {
      preds.push_back(sentence(10));
      for (std::size_t j = 0; j < 1 + rng.uniform_index(5); ++j) refs[i].push_back(sentence(12));
    }
    cider_err = std::max(cider_err, std::abs(cider_d(preds, refs) - oracle::cider_d(preds, refs)));
  }
  double auc_err = 0.0;
  for (int t = 0; t < 50; ++t) {
    std::vector<double> s;
    std::vector<int> y;
    for (int i = 0; i < 60; ++i) {
      s.push_back(std::round(rng.normal() * 4.0) / 4.0);
      y.push_back(i < 2 ? i : static_cast<int>(rng.uniform_index(2)));
    }
    auc_err = std::max(auc_err, std::abs(auc_roc(s, y) - oracle::auc_pairs(s, y)));
  }
  bool vqa_ok = true;
  for (int m = 0; m <= 10; ++m) {
    std::vector<std::string> answers(10, "other");
    for (int i = 0; i < m; ++i) answers[i] = "two";
    vqa_ok = vqa_ok && vqa_accuracy("two", answers) == std::min(m / 3.0, 1.0);
  }
  return {cider_err <= 1e-6 && auc_err <= 1e-12 && vqa_ok,
          fmt("CIDEr-D max error %.3g, AUC max error %.3g", cider_err, auc_err) +
              (vqa_ok ? ", VQA table exact" : ", VQA table mismatch")};
}

// ---------------------------------------------------------------- 7

Outcome prompt_fidelity() {
  ExampleRecord cap{"c", Task::kCaptioning, "i", "a red bus", {}, false, {}};
  ExampleRecord vqa{"v", Task::kVqa, "i", "what color?", {"red"}, false, {}};
  ExampleRecord hm{"h", Task::kRankClassification, "i", "t", {}, false, 0};
  bool ok = render_example(Task::kCaptioning, cap, true) == "<image> Output: a red bus" &&
            render_example(Task::kVqa, vqa, true) == "<image> Question: what color? Short answer: red" &&
            render_example(Task::kRankClassification, hm, true) ==
                "<image> is an image with: ‘t’ written on it. Is it hateful? Answer: no";
  Corpus mem;
  const char* caps[] = {"a dog on a couch", "two dogs in the snow", "a puppy with a ball", "a dog running"};
  RetrievalResult r{"q", {}};
  for (int i = 0; i < 4; ++i) {
    const std::string id = "s" + std::to_string(i + 1);
    mem.records.push_back({id, Task::kCaptioning, "img_" + id, caps[i], {}, false, {}});
    r.ranked.push_back({id, 0.9 - 0.1 * i});
  }
  const ExampleRecord q{"q", Task::kCaptioning, "img_q", "unseen", {}, false, {}};
  const auto golden = read_file(fs::path(MICL_TEST_DATA_DIR) / "golden" / "four_shot_captioning.txt");
  const bool four = assemble_prompt_set(q, r, mem, 4).text() == golden;
  return {ok && four, std::string(ok ? "templates match" : "template mismatch") +
                          (four ? ", 4-shot golden matches" : ", 4-shot golden differs")};
}

// ---------------------------------------------------------------- 8

Outcome mining_correctness() {
  Rng rng(808);
  int failures = 0;
  const int trials = 500;
  for (int t = 0; t < trials; ++t) {
    const std::size_t n = 2 + rng.uniform_index(80);
    const std::size_t k = 1 + rng.uniform_index(std::min<std::size_t>(10, n / 2));
    std::vector<ScoreRecord> s;
    for (std::size_t i = 0; i < n; ++i) {
      s.push_back({"q", testing::pad_id("c", i), t % 2 ? std::round(rng.uniform() * 8) / 8 : rng.uniform() * 5});
    }
    rng.shuffle(s);
    auto by = [&](bool ascending) {
      auto v = s;
      std::sort(v.begin(), v.end(), [&](const auto& a, const auto& b) {
        if (a.nll != b.nll) return ascending ? a.nll < b.nll : a.nll > b.nll;
        return a.candidate_id < b.candidate_id;
      });
      std::vector<std::string> ids;
      for (std::size_t i = 0; i < k; ++i) ids.push_back(v[i].candidate_id);
      return ids;
    };
    const auto m = mine_examples(s, k);
    if (m.positives != by(true) || m.negatives != by(false)) ++failures;
    auto warped = s;
    for (auto& r : warped) r.nll = std::sqrt(r.nll) * 3.0 + std::exp(r.nll);
    if (!(mine_examples(warped, k) == m)) ++failures;
  }
  const auto hand = mine_examples(std::vector<ScoreRecord>{{"q", "a", 0.1}, {"q", "b", 0.5}, {"q", "c", 0.9}, {"q", "d", 1.2}}, 1);
  const bool low_positive = hand.positives == std::vector<std::string>{"a"} && hand.negatives == std::vector<std::string>{"d"};
  return {failures == 0 && low_positive,
          fmt("%g random score sets, %g failures", trials, failures) +
              (low_positive ? ", lowest NLL is positive" : ", low NLL not positive")};
}

// ---------------------------------------------------------------- 9

Outcome determinism() {
  std::vector<std::string> problems;
  Rng rng(909);

  // Adapters from two identical training runs.
  const Corpus c = normalize_corpus(testing::random_corpus(rng, {.count = 200, .dim = 16}));
  const auto sl = shortlist_candidates(c, SimilarityConfig::from_mode(SimilarityMode::kQIMIT), 20);
  EmbeddingMatrix latent(Modality::kText, 4);
  for (const auto& r : c.records) latent.append(r.id, testing::random_row(rng, 4));
  SyntheticScorer scorer(latent);
  const auto scores = score_candidates({&c, &c, sl.shortlists}, scorer);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.peak_lr = 1e-3;
  const auto a = train(c, scores, cfg);
  const auto b = train(c, scores, cfg);
  if (!a.adapter.bit_equal(b.adapter)) problems.push_back("adapters differ");

  testing::TempDir dir("acceptance");
  save_checkpoint({a.adapter, a.optimizer, cfg.hash(), c.metadata}, dir / "a.ckpt");
  if (!load_checkpoint(dir / "a.ckpt").adapter.bit_equal(a.adapter)) problems.push_back("checkpoint round-trip");
  persist_corpus(c, dir / "corpus");
  if (!(load_corpus(dir / "corpus") == c)) problems.push_back("corpus round-trip");

  // Whole pipeline twice on the bundled fixture, then a no-op rerun.
  std::vector<std::string> reports;
  bool all_skipped = true;
  for (const char* name : {"one", "two"}) {
    const fs::path fx = dir / name;
    fs::copy(fs::path(MICL_SOURCE_DIR) / "fixtures" / "synthetic", fx, fs::copy_options::recursive);
    fs::remove_all(fx / "run");
    const auto pcfg = PipelineConfig::from_json(load_config(fx / "config.json"), fx);
    std::ostringstream log;
    {
      Pipeline p(pcfg, false, log);
      p.run_all();
    }
    reports.push_back(read_file(fx / "run" / "report.txt") + read_file(fx / "run" / "adapter.ckpt"));
    Pipeline again(pcfg, false, log);
    for (const auto& o : again.run_all()) all_skipped = all_skipped && o.skipped;
  }
  if (reports[0] != reports[1]) problems.push_back("pipeline reports differ");
  if (!all_skipped) problems.push_back("rerun was not a no-op");

  std::string detail = "adapters, checkpoint, corpus, reports bit-identical; rerun skipped every stage";
  if (!problems.empty()) {
    detail.clear();
    for (const auto& p : problems) detail += (detail.empty() ? "" : "; ") + p;
  }
  return {problems.empty(), detail};
}

// ---------------------------------------------------------------- 10

Outcome schedule_and_optimizer() {
  TrainConfig cfg;
  const std::size_t total = 30 * 63;
  const std::size_t warmup = cfg.warmup_for(total);
  const double at_peak = lr_at_step(warmup, total, warmup, cfg.peak_lr);
  const double at_end = lr_at_step(total, total, warmup, cfg.peak_lr);

  AdamWConfig no_decay;
  no_decay.weight_decay = 0.0;
  double err = 0.0;
  {
    std::vector<double> p = {0.0};
    AdamWState st;
    adamw_step(p, std::vector<double>{1.0}, st, 1, 1e-5, no_decay);
    err = std::max(err, std::abs(p[0] - (-1e-5 / (1.0 + 1e-8))));
  }
  {
    std::vector<double> p = {0.25, -1.0};
    AdamWState st;
    adamw_step(p, std::vector<double>{0.0, 0.0}, st, 1, 1e-5, no_decay);
    err = std::max({err, std::abs(p[0] - 0.25), std::abs(p[1] + 1.0)});
  }
  {
    AdamWConfig wd;
    wd.weight_decay = 0.01;
    std::vector<double> p = {1.0};
    AdamWState st;
    adamw_step(p, std::vector<double>{0.0}, st, 1, 1e-5, wd);
    err = std::max(err, std::abs(p[0] - 0.9999999));
  }
  const bool ok = at_peak == 1e-5 && at_end < 1e-9 * cfg.peak_lr && err <= 1e-12;
  return {ok, fmt("lr at warmup end %.3g, at final step %.3g, AdamW max error %.3g", at_peak, at_end, err)};
}

}  // namespace

int main() {
  std::vector<RandomCase> corpora;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"loss closed forms", loss_closed_forms},
      {"gradient correctness", gradient_check},
      {"retrieval oracle equivalence", [&] { return retrieval_oracle(corpora); }},
      {"identity equivalence", [&] { return identity_equivalence(corpora); }},
      {"synthetic MSIER gain", synthetic_gain},
      {"metric oracles", metric_oracles},
      {"prompt fidelity", prompt_fidelity},
      {"mining correctness", mining_correctness},
      {"determinism and persistence", determinism},
      {"schedule and optimizer", schedule_and_optimizer},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << i + 1 << " " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
