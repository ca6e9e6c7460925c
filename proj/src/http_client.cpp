#include <httplib.h>

#include <cmath>
#include <thread>

#include "micl/error.hpp"
#include "micl/eval.hpp"
#include "micl/prompt.hpp"
#include "micl/scoring.hpp"
#include "micl/util.hpp"

namespace micl {

namespace {

Json image_ref(const ExampleRecord& r) {
  return r.image_key ? Json(*r.image_key) : Json(r.id);
}

// POSTs JSON, retrying transport failures and non-200 replies with
// exponential backoff. A fresh client per attempt keeps workers independent.
Json post_json(const std::string& endpoint, const std::string& path, const Json& body,
               const HttpScorerOptions& options, std::atomic<std::size_t>& requests,
               const std::string& what) {
  const std::string payload = body.dump();
  std::string last_error;
  auto backoff = options.initial_backoff;
  for (int attempt = 1; attempt <= options.max_attempts; ++attempt) {
    httplib::Client client(endpoint);
    client.set_connection_timeout(options.timeout);
    client.set_read_timeout(options.timeout);
    client.set_write_timeout(options.timeout);
    ++requests;
    auto res = client.Post(path, payload, "application/json");
    if (res && res->status == 200) {
      try {
        return Json::parse(res->body);
      } catch (const Json::parse_error& e) {
        throw Error(ErrorCode::kMalformedResponse,
                    endpoint + path + " returned invalid JSON for " + what + ": " + e.what());
      }
    }
    last_error = res ? "HTTP " + std::to_string(res->status) : httplib::to_string(res.error());
    if (attempt < options.max_attempts) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }
  throw Error(ErrorCode::kTransport, endpoint + path + " failed for " + what + " after " +
                                         std::to_string(options.max_attempts) +
                                         " attempts: " + last_error);
}

}  // namespace

HttpScorer::HttpScorer(std::string endpoint, HttpScorerOptions options)
    : endpoint_(std::move(endpoint)), options_(options) {
  if (options_.batch_size == 0) options_.batch_size = 1;
  if (options_.max_attempts < 1) options_.max_attempts = 1;
}

std::string HttpScorer::reduction() const { return saw_sum_ ? "sum" : "mean"; }

Json HttpScorer::post_with_retry(const std::string& path, const Json& body,
                                 const std::string& what) {
  return post_json(endpoint_, path, body, options_, requests_, what);
}

std::vector<double> HttpScorer::parse_scores(const Json& response, std::size_t expected,
                                             const std::string& what) {
  if (!response.is_object() || !response.contains("scores") ||
      !response["scores"].is_array() || response["scores"].size() != expected) {
    throw Error(ErrorCode::kMalformedResponse,
                "scorer response for " + what + " lacks " + std::to_string(expected) + " scores");
  }
  const bool sum = response.value("nll_reduction", "mean") == "sum";
  if (sum) saw_sum_ = true;
  std::vector<double> out;
  out.reserve(expected);
  for (const auto& s : response["scores"]) {
    if (!s.is_object() || !s.contains("nll") || !s["nll"].is_number()) {
      throw Error(ErrorCode::kMalformedResponse, "score entry without numeric nll for " + what);
    }
    double nll = s["nll"].get<double>();
    const double tokens = s.value("token_count", 0.0);
    if (sum) {
      if (!(tokens > 0)) {
        throw Error(ErrorCode::kMalformedResponse,
                    "sum-reduced nll without positive token_count for " + what);
      }
      nll /= tokens;
    }
    if (!std::isfinite(nll) || nll < 0.0) {
      throw Error(ErrorCode::kMalformedResponse, "negative or non-finite nll for " + what);
    }
    out.push_back(nll);
  }
  return out;
}

std::vector<double> HttpScorer::run_batches(
    Task task, std::size_t count, const std::function<Json(std::size_t)>& item,
    const std::function<std::string(std::size_t)>& describe) {
  std::vector<double> out(count, 0.0);
  const std::size_t batches = (count + options_.batch_size - 1) / options_.batch_size;
  parallel_for(batches, options_.max_in_flight, [&](std::size_t b) {
    const std::size_t begin = b * options_.batch_size;
    const std::size_t end = std::min(count, begin + options_.batch_size);
    Json items = Json::array();
    for (std::size_t i = begin; i < end; ++i) items.push_back(item(i));
    Json body = {{"task", to_string(task)}, {"items", std::move(items)}};
    const std::string what = describe(begin);
    const auto scores = parse_scores(post_with_retry("/v1/score", body, what), end - begin, what);
    std::copy(scores.begin(), scores.end(), out.begin() + static_cast<std::ptrdiff_t>(begin));
  });
  return out;
}

std::vector<double> HttpScorer::score(Task task, std::span<const ScorePair> pairs) {
  const std::string template_id(prompt_template(task).id);
  return run_batches(
      task, pairs.size(),
      [&](std::size_t i) {
        const auto& q = *pairs[i].query;
        const auto& c = *pairs[i].candidate;
        Json query = {{"image_ref", image_ref(q)}};
        // The query's target span is what the scorer evaluates.
        if (q.text) query["text"] = *q.text;
        if (auto t = target_text(q); t && task != Task::kCaptioning) query["answer"] = *t;
        Json candidate = {{"image_ref", image_ref(c)}, {"text", c.text.value_or("")}};
        if (auto t = target_text(c); t && task != Task::kCaptioning) candidate["answer"] = *t;
        return Json{{"query", std::move(query)},
                    {"candidate", std::move(candidate)},
                    {"template_id", template_id}};
      },
      [&](std::size_t i) {
        return "pair (" + pairs[i].query->id + ", " + pairs[i].candidate->id + ")";
      });
}

std::vector<double> HttpScorer::score_prompts(
    Task task, std::span<const std::string> prompts, std::span<const std::string> targets,
    std::span<const std::vector<std::string>> image_refs) {
  if (prompts.size() != targets.size() || (!image_refs.empty() && image_refs.size() != prompts.size())) {
    throw Error(ErrorCode::kInvalidArgument, "prompts, targets and image refs differ in length");
  }
  const std::string template_id(prompt_template(task).id);
  return run_batches(
      task, prompts.size(),
      [&](std::size_t i) {
        Json item = {{"prompt", prompts[i]}, {"target", targets[i]}, {"template_id", template_id}};
        if (!image_refs.empty()) item["image_refs"] = image_refs[i];
        return item;
      },
      [&](std::size_t i) { return "prompt #" + std::to_string(i); });
}

}  // namespace micl

namespace micl {

HttpGenerator::HttpGenerator(std::string endpoint, HttpScorerOptions options)
    : endpoint_(std::move(endpoint)), options_(options) {
  if (options_.max_attempts < 1) options_.max_attempts = 1;
}

std::vector<std::string> HttpGenerator::generate(std::span<const PromptSet> prompts) {
  std::vector<std::string> out(prompts.size());
  parallel_for(prompts.size(), options_.max_in_flight, [&](std::size_t i) {
    const auto& p = prompts[i];
    const Json body = {{"task", to_string(p.task)},
                       {"prompt", p.text()},
                       {"image_refs", p.image_refs()},
                       {"template_id", prompt_template(p.task).id}};
    const std::string what = "query '" + p.query_id + "'";
    const Json res = post_json(endpoint_, "/v1/generate", body, options_, requests_, what);
    if (!res.is_object() || !res.contains("completion") || !res["completion"].is_string()) {
      throw Error(ErrorCode::kMalformedResponse, "generator response lacks completion for " + what);
    }
    out[i] = res["completion"].get<std::string>();
  });
  return out;
}

std::vector<double> HttpGenerator::class_scores(std::span<const PromptSet> prompts) {
  std::vector<std::string> texts;
  std::vector<std::string> targets;
  std::vector<std::vector<std::string>> refs;
  for (const auto& p : prompts) {
    for (const char* answer : {"yes", "no"}) {
      texts.push_back(p.text());
      targets.emplace_back(answer);
      refs.push_back(p.image_refs());
    }
  }
  HttpScorer scorer(endpoint_, options_);
  const auto nll = scorer.score_prompts(Task::kRankClassification, texts, targets, refs);
  std::vector<double> out;
  for (std::size_t i = 0; i < prompts.size(); ++i) out.push_back(nll[2 * i + 1] - nll[2 * i]);
  return out;
}

}  // namespace micl
