#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "micl/corpus.hpp"

namespace micl {

/// Task prompt with placeholders <image>, [caption], [question], [answer],
/// [text]. The target placeholder is always the final token and is the
/// span an MLLM scorer computes NLL over.
struct PromptTemplate {
  Task task;
  std::string_view id;
  std::string_view text;
  std::string_view target_placeholder;
};

const PromptTemplate& prompt_template(Task task);

/// Placed after every in-context example when shots are concatenated.
inline constexpr std::string_view kChunkSeparator = "<|endofchunk|>";

/// Text an example contributes as its target: the caption, the majority
/// VQA answer, or the yes/no hateful label. nullopt when unavailable.
std::optional<std::string> target_text(const ExampleRecord& record);

/// Renders one example. With include_target the target span is appended
/// after a single space; an empty target renders like include_target=false.
/// Throws kMissingField when the task's input fields are absent.
std::string render_example(Task task, const ExampleRecord& example, bool include_target,
                           std::optional<std::string_view> target_override = std::nullopt);

struct RenderedPrompt {
  std::string prompt;
  std::optional<std::string> target;
};

/// Without a query: the example alone, target included or omitted.
/// With a query: the one-shot scoring layout, i.e. the example with its
/// target, the chunk separator, then the query (target per include_target);
/// the returned target is the query's target span.
RenderedPrompt render_prompt(Task task, const ExampleRecord& example,
                             const ExampleRecord* query, bool include_target);

}  // namespace micl
