#include <httplib.h>

#include <atomic>
#include <mutex>
#include <thread>

#include "doctest.h"
#include "micl/error.hpp"
#include "micl/eval.hpp"
#include "micl/scoring.hpp"
#include "support.hpp"

using namespace micl;

namespace {

/// Local scorer service on an ephemeral port.
class FakeService {
 public:
  FakeService() {
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeService() {
    server_.stop();
    thread_.join();
  }
  httplib::Server& server() { return server_; }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_); }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

HttpScorerOptions fast(std::size_t batch = 16, unsigned in_flight = 4, int attempts = 3) {
  HttpScorerOptions o;
  o.batch_size = batch;
  o.max_in_flight = in_flight;
  o.max_attempts = attempts;
  o.initial_backoff = std::chrono::milliseconds(1);
  o.timeout = std::chrono::seconds(5);
  return o;
}

// nll encodes the candidate index so ordering is checkable.
Json echo_scores(const Json& body) {
  Json scores = Json::array();
  for (const auto& item : body["items"]) {
    const std::string text = item["candidate"]["text"];
    scores.push_back({{"nll", std::stod(text.substr(text.find(' ') + 1))}, {"token_count", 3}});
  }
  return {{"scores", scores}};
}

struct Pairs {
  Corpus queries;
  Corpus memory;
  std::vector<ScorePair> pairs;
};

Pairs make_pairs(std::size_t n, Task task = Task::kCaptioning) {
  Rng rng(1);
  Pairs p;
  p.queries = testing::random_corpus(rng, {.count = 1, .task = task, .prefix = "q"});
  p.memory = testing::random_corpus(rng, {.count = n, .task = task});
  for (const auto& m : p.memory.records) p.pairs.push_back({&p.queries.records[0], &m});
  return p;
}

}  // namespace

TEST_SUITE("http") {

TEST_CASE("batched concurrent scoring keeps input order and the in-flight bound") {
  FakeService svc;
  std::atomic<int> in_flight{0}, peak{0};
  std::mutex mu;
  std::vector<Json> bodies;
  svc.server().Post("/v1/score", [&](const httplib::Request& req, httplib::Response& res) {
    const int now = ++in_flight;
    int seen = peak.load();
    while (now > seen && !peak.compare_exchange_weak(seen, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    const Json body = Json::parse(req.body);
    {
      std::lock_guard lock(mu);
      bodies.push_back(body);
    }
    res.set_content(echo_scores(body).dump(), "application/json");
    --in_flight;
  });

  auto p = make_pairs(11);
  HttpScorer scorer(svc.endpoint(), fast(2, 3));
  const auto nll = scorer.score(Task::kCaptioning, p.pairs);
  REQUIRE(nll.size() == 11);
  for (std::size_t i = 0; i < 11; ++i) CHECK(nll[i] == doctest::Approx(static_cast<double>(i)));
  CHECK(scorer.requests() == 6);
  CHECK(peak.load() <= 3);
  CHECK(peak.load() >= 2);

  const Json& b = bodies.front();
  CHECK(b["task"] == "captioning");
  const Json& item = b["items"][0];
  CHECK(item["template_id"] == "captioning/v1");
  CHECK(item["query"]["image_ref"].get<std::string>().rfind("img_q", 0) == 0);
  CHECK(item["candidate"].contains("text"));
}

TEST_CASE("transient failures are retried, persistent ones surface") {
  FakeService svc;
  std::atomic<int> hits{0};
  svc.server().Post("/v1/score", [&](const httplib::Request& req, httplib::Response& res) {
    if (++hits <= 2) {
      res.status = 503;
      return;
    }
    res.set_content(echo_scores(Json::parse(req.body)).dump(), "application/json");
  });
  auto p = make_pairs(2);
  HttpScorer ok(svc.endpoint(), fast(16, 1, 3));
  CHECK(ok.score(Task::kCaptioning, p.pairs).size() == 2);
  CHECK(ok.requests() == 3);

  hits = 0;
  HttpScorer fails(svc.endpoint(), fast(16, 1, 2));
  try {
    fails.score(Task::kCaptioning, p.pairs);
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kTransport);
    CHECK(std::string(e.what()).find("q00000") != std::string::npos);
  }
}

TEST_CASE("unreachable endpoint is a transport error") {
  std::string endpoint;
  {
    FakeService svc;
    endpoint = svc.endpoint();
  }
  auto p = make_pairs(1);
  HttpScorer scorer(endpoint, fast(16, 1, 2));
  CHECK_THROWS_AS(scorer.score(Task::kCaptioning, p.pairs), Error);
}

TEST_CASE("malformed responses are rejected") {
  FakeService svc;
  std::string reply;
  svc.server().Post("/v1/score", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(reply, "application/json");
  });
  auto p = make_pairs(2);
  HttpScorer scorer(svc.endpoint(), fast());
  for (const char* bad : {"not json", "{\"scores\": [{\"nll\": 1}]}", "{\"scores\": [{\"nll\": -1}, {\"nll\": 1}]}",
                          "{\"scores\": [{\"x\": 1}, {\"nll\": 1}]}",
                          "{\"scores\": [{\"nll\": 1}, {\"nll\": 1}], \"nll_reduction\": \"sum\"}"}) {
    reply = bad;
    try {
      scorer.score(Task::kCaptioning, p.pairs);
      FAIL("accepted " << bad);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kMalformedResponse);
    }
  }
}

TEST_CASE("sum-reduced nll is divided by the token count") {
  FakeService svc;
  svc.server().Post("/v1/score", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"scores": [{"nll": 6.0, "token_count": 4}], "nll_reduction": "sum"})",
                    "application/json");
  });
  auto p = make_pairs(1);
  HttpScorer scorer(svc.endpoint(), fast());
  CHECK(scorer.score(Task::kCaptioning, p.pairs)[0] == doctest::Approx(1.5));
  CHECK(scorer.reduction() == "sum");
}

TEST_CASE("vqa items carry the answers being scored") {
  FakeService svc;
  Json last;
  svc.server().Post("/v1/score", [&](const httplib::Request& req, httplib::Response& res) {
    last = Json::parse(req.body);
    res.set_content(R"({"scores": [{"nll": 0.5, "token_count": 1}]})", "application/json");
  });
  auto p = make_pairs(1, Task::kVqa);
  HttpScorer scorer(svc.endpoint(), fast());
  scorer.score(Task::kVqa, p.pairs);
  const Json& item = last["items"][0];
  CHECK(item["template_id"] == "vqa/v1");
  CHECK(item["query"]["text"] == "question 0?");
  CHECK(item["query"]["answer"] == "a0");
  CHECK(item["candidate"]["answer"] == "a0");
}

TEST_CASE("cache hits make no requests") {
  testing::TempDir dir("http_cache");
  FakeService svc;
  std::atomic<int> hits{0};
  svc.server().Post("/v1/score", [&](const httplib::Request& req, httplib::Response& res) {
    ++hits;
    res.set_content(echo_scores(Json::parse(req.body)).dump(), "application/json");
  });
  auto p = make_pairs(5);
  ScoringJob job{&p.queries, &p.memory, {}};
  RetrievalResult r{p.queries.records[0].id, {}};
  for (const auto& m : p.memory.records) r.ranked.push_back({m.id, 0.0});
  job.shortlists.push_back(r);
  HttpScorer scorer(svc.endpoint(), fast(2, 2));
  const auto first = score_candidates(job, scorer, dir / "c.jsonl");
  const int after_first = hits.load();
  CHECK(after_first == 3);
  CHECK(score_candidates(job, scorer, dir / "c.jsonl") == first);
  CHECK(hits.load() == after_first);
}

TEST_CASE("generator protocol") {
  FakeService svc;
  Json last_generate;
  std::mutex mu;
  svc.server().Post("/v1/generate", [&](const httplib::Request& req, httplib::Response& res) {
    const Json body = Json::parse(req.body);
    {
      std::lock_guard lock(mu);
      last_generate = body;
    }
    res.set_content(Json{{"completion", "echo " + body["image_refs"].back().get<std::string>()}}.dump(),
                    "application/json");
  });
  svc.server().Post("/v1/score", [&](const httplib::Request& req, httplib::Response& res) {
    Json scores = Json::array();
    const Json body = Json::parse(req.body);
    for (const auto& item : body["items"]) {
      scores.push_back({{"nll", item["target"] == "yes" ? 0.25 : 1.0}, {"token_count", 1}});
    }
    res.set_content(Json{{"scores", scores}}.dump(), "application/json");
  });

  PromptSet p;
  p.query_id = "q";
  p.task = Task::kCaptioning;
  p.query_image_ref = "img_q";
  p.shots.push_back({"s", "img_s", "<image> Output:", "a cat", 0.9});
  p.query_suffix = "<image> Output:";
  HttpGenerator gen(svc.endpoint(), fast());
  const std::vector<PromptSet> prompts = {p};
  CHECK(gen.generate(prompts) == std::vector<std::string>{"echo img_q"});
  CHECK(last_generate["prompt"] == "<image> Output: a cat<|endofchunk|><image> Output:");
  CHECK(last_generate["image_refs"] == Json::array({"img_s", "img_q"}));
  CHECK(last_generate["template_id"] == "captioning/v1");

  p.task = Task::kRankClassification;
  const std::vector<PromptSet> rc = {p};
  CHECK(gen.class_scores(rc)[0] == doctest::Approx(0.75));
}

}  // TEST_SUITE
