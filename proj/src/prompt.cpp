#include "micl/prompt.hpp"

#include <map>

#include "micl/error.hpp"

namespace micl {

namespace {

constexpr PromptTemplate kCaptioning{Task::kCaptioning, "captioning/v1",
                                     "<image> Output: [caption]", "[caption]"};
constexpr PromptTemplate kVqa{Task::kVqa, "vqa/v1",
                              "<image> Question: [question] Short answer: [answer]",
                              "[answer]"};
constexpr PromptTemplate kRankClassification{
    Task::kRankClassification, "rank_classification/v1",
    "<image> is an image with: ‘[text]’ written on it. Is it hateful? Answer: [answer]",
    "[answer]"};

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

[[noreturn]] void missing(const ExampleRecord& r, std::string_view field) {
  throw Error(ErrorCode::kMissingField,
              "record '" + r.id + "' lacks " + std::string(field) + " required by the " +
                  std::string(to_string(r.task)) + " prompt");
}

}  // namespace

const PromptTemplate& prompt_template(Task task) {
  switch (task) {
    case Task::kCaptioning: return kCaptioning;
    case Task::kVqa: return kVqa;
    case Task::kRankClassification: return kRankClassification;
  }
  return kCaptioning;
}

std::optional<std::string> target_text(const ExampleRecord& record) {
  switch (record.task) {
    case Task::kCaptioning:
      if (record.text) return record.text;
      if (!record.answers.empty()) return record.answers.front();
      return std::nullopt;
    case Task::kVqa: {
      if (record.answers.empty()) return std::nullopt;
      // Majority answer; earliest occurrence wins ties.
      std::map<std::string, int> counts;
      for (const auto& a : record.answers) ++counts[a];
      const std::string* best = &record.answers.front();
      for (const auto& a : record.answers) {
        if (counts[a] > counts[*best]) best = &a;
      }
      return *best;
    }
    case Task::kRankClassification:
      if (!record.answers.empty()) return record.answers.front();
      if (record.label) return std::string(*record.label == 1 ? "yes" : "no");
      return std::nullopt;
  }
  return std::nullopt;
}

std::string render_example(Task task, const ExampleRecord& example, bool include_target,
                           std::optional<std::string_view> target_override) {
  const auto& tpl = prompt_template(task);
  std::string text(tpl.text);
  // Drop " [target]" and re-append it only when requested.
  text.resize(text.size() - tpl.target_placeholder.size() - 1);
  switch (task) {
    case Task::kCaptioning:
      break;
    case Task::kVqa:
      if (!example.text) missing(example, "question text");
      replace_all(text, "[question]", *example.text);
      break;
    case Task::kRankClassification:
      if (!example.text) missing(example, "meme text");
      replace_all(text, "[text]", *example.text);
      break;
  }
  if (include_target) {
    std::string target;
    if (target_override) {
      target = *target_override;
    } else {
      auto t = target_text(example);
      if (!t) missing(example, std::string("target ") + std::string(tpl.target_placeholder));
      target = std::move(*t);
    }
    if (!target.empty()) {
      text.push_back(' ');
      text += target;
    }
  }
  return text;
}

RenderedPrompt render_prompt(Task task, const ExampleRecord& example,
                             const ExampleRecord* query, bool include_target) {
  RenderedPrompt out;
  if (!query) {
    out.prompt = render_example(task, example, include_target);
    out.target = target_text(example);
    return out;
  }
  out.prompt = render_example(task, example, true);
  out.prompt += kChunkSeparator;
  out.prompt += render_example(task, *query, include_target);
  out.target = target_text(*query);
  return out;
}

}  // namespace micl
