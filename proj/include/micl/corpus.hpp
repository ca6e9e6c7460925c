#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace micl {

enum class Task { kCaptioning, kVqa, kRankClassification };
enum class Modality { kImage, kText };

std::string_view to_string(Task task);
std::string_view to_string(Modality modality);
Task parse_task(std::string_view name);
Modality parse_modality(std::string_view name);

/// One memory or query item. Text is kept verbatim; tokenization is the
/// concern of whoever consumes it.
struct ExampleRecord {
  std::string id;
  Task task = Task::kCaptioning;
  std::optional<std::string> image_key;
  std::optional<std::string> text;
  /// VQA ground-truth answers, reference captions, or a single answer string.
  std::vector<std::string> answers;
  /// Distinguishes `"answer": "x"` from `"answer": ["x"]` so persistence is lossless.
  bool answer_is_list = false;
  std::optional<int> label;

  bool operator==(const ExampleRecord&) const = default;
};

/// Dense row-major matrix of 32-bit embeddings keyed by record key.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  EmbeddingMatrix(Modality modality, std::size_t dim);

  Modality modality() const noexcept { return modality_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t count() const noexcept { return keys_.size(); }
  const std::vector<std::string>& keys() const noexcept { return keys_; }
  std::span<const float> data() const noexcept { return data_; }

  /// Appends a row; throws kDuplicateId for a repeated key and
  /// kDimensionMismatch for a wrong-length row.
  void append(const std::string& key, std::span<const float> row);

  std::span<const float> row(std::size_t index) const;
  std::span<float> mutable_row(std::size_t index);
  std::optional<std::size_t> find(const std::string& key) const;
  /// Throws kDanglingKey naming the key when absent.
  std::span<const float> row(const std::string& key) const;

  std::optional<std::string> encoder;

  bool operator==(const EmbeddingMatrix& other) const;

 private:
  Modality modality_ = Modality::kImage;
  std::size_t dim_ = 0;
  std::vector<float> data_;
  std::vector<std::string> keys_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Memory D or a query set. Image rows are keyed by `image_key`; text rows
/// are keyed by record id.
struct Corpus {
  std::vector<ExampleRecord> records;
  std::optional<EmbeddingMatrix> image_embeddings;
  std::optional<EmbeddingMatrix> text_embeddings;
  std::map<std::string, std::string> metadata;

  const ExampleRecord* find(const std::string& id) const;
  /// Row for the record's modality; nullopt when the record or corpus lacks it.
  std::optional<std::span<const float>> embedding(const ExampleRecord& record,
                                                  Modality modality) const;

  bool operator==(const Corpus&) const = default;
};

struct Diagnostic {
  std::string record_id;
  std::string reason;

  bool operator==(const Diagnostic&) const = default;
};

// Embedding file: one JSON header line followed by little-endian f32 rows.
void write_embeddings(const EmbeddingMatrix& matrix, const std::filesystem::path& path);
EmbeddingMatrix read_embeddings(const std::filesystem::path& path);

/// Loads a JSONL manifest (head object + one record per line) and its
/// embedding files. Rows are kept as stored; call l2_normalize separately.
Corpus ingest_manifest(const std::filesystem::path& manifest_path);

EmbeddingMatrix l2_normalize(const EmbeddingMatrix& matrix);
/// Normalizes every matrix present and marks the corpus as normalized.
Corpus normalize_corpus(Corpus corpus);

std::vector<Diagnostic> validate_corpus(const Corpus& corpus);

void persist_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

/// Record <-> manifest line conversion, shared with the fixture generator.
nlohmann::json record_to_json(const ExampleRecord& record);
ExampleRecord record_from_json(const nlohmann::json& row);

}  // namespace micl
