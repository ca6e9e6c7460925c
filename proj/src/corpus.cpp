#include "micl/corpus.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "micl/error.hpp"
#include "micl/util.hpp"

namespace micl {

namespace {

constexpr std::string_view kEmbeddingMagic = "MICL1";
constexpr int kManifestVersion = 1;

std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
  return v;
}

bool row_is_finite(std::span<const float> row) {
  for (float x : row) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace

std::string_view to_string(Task task) {
  switch (task) {
    case Task::kCaptioning: return "captioning";
    case Task::kVqa: return "vqa";
    case Task::kRankClassification: return "rank_classification";
  }
  return "captioning";
}

std::string_view to_string(Modality modality) {
  return modality == Modality::kImage ? "image" : "text";
}

Task parse_task(std::string_view name) {
  if (name == "captioning") return Task::kCaptioning;
  if (name == "vqa") return Task::kVqa;
  if (name == "rank_classification") return Task::kRankClassification;
  throw Error(ErrorCode::kParse, "unknown task '" + std::string(name) + "'");
}

Modality parse_modality(std::string_view name) {
  if (name == "image") return Modality::kImage;
  if (name == "text") return Modality::kText;
  throw Error(ErrorCode::kParse, "unknown modality '" + std::string(name) + "'");
}

EmbeddingMatrix::EmbeddingMatrix(Modality modality, std::size_t dim)
    : modality_(modality), dim_(dim) {
  if (dim == 0) {
    throw Error(ErrorCode::kDimensionMismatch, "embedding dim must be positive");
  }
}

void EmbeddingMatrix::append(const std::string& key, std::span<const float> row) {
  if (row.size() != dim_) {
    throw Error(ErrorCode::kDimensionMismatch,
                "row '" + key + "' has " + std::to_string(row.size()) +
                    " components, expected " + std::to_string(dim_));
  }
  if (!index_.emplace(key, keys_.size()).second) {
    throw Error(ErrorCode::kDuplicateId, "duplicate embedding key '" + key + "'");
  }
  keys_.push_back(key);
  data_.insert(data_.end(), row.begin(), row.end());
}

std::span<const float> EmbeddingMatrix::row(std::size_t index) const {
  return std::span<const float>(data_).subspan(index * dim_, dim_);
}

std::span<float> EmbeddingMatrix::mutable_row(std::size_t index) {
  return std::span<float>(data_).subspan(index * dim_, dim_);
}

std::optional<std::size_t> EmbeddingMatrix::find(const std::string& key) const {
  auto it = index_.find(key);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::span<const float> EmbeddingMatrix::row(const std::string& key) const {
  auto idx = find(key);
  if (!idx) {
    throw Error(ErrorCode::kDanglingKey, std::string(to_string(modality_)) +
                                             " embedding key '" + key + "' not found");
  }
  return row(*idx);
}

bool EmbeddingMatrix::operator==(const EmbeddingMatrix& other) const {
  if (modality_ != other.modality_ || dim_ != other.dim_ || keys_ != other.keys_ ||
      encoder != other.encoder || data_.size() != other.data_.size()) {
    return false;
  }
  // Bitwise, so -0.0 vs 0.0 and NaN payloads count as differences.
  return data_.empty() ||
         std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0;
}

const ExampleRecord* Corpus::find(const std::string& id) const {
  for (const auto& r : records) {
    if (r.id == id) return &r;
  }
  return nullptr;
}

std::optional<std::span<const float>> Corpus::embedding(const ExampleRecord& record,
                                                        Modality modality) const {
  if (modality == Modality::kImage) {
    if (!record.image_key || !image_embeddings) return std::nullopt;
    auto idx = image_embeddings->find(*record.image_key);
    if (!idx) return std::nullopt;
    return image_embeddings->row(*idx);
  }
  if (!record.text || !text_embeddings) return std::nullopt;
  auto idx = text_embeddings->find(record.id);
  if (!idx) return std::nullopt;
  return text_embeddings->row(*idx);
}

void write_embeddings(const EmbeddingMatrix& matrix, const std::filesystem::path& path) {
  Json header = {{"magic", kEmbeddingMagic},
                 {"modality", to_string(matrix.modality())},
                 {"dim", matrix.dim()},
                 {"count", matrix.count()},
                 {"keys", matrix.keys()}};
  if (matrix.encoder) header["encoder"] = *matrix.encoder;
  std::string out = header.dump();
  out.push_back('\n');
  const auto data = matrix.data();
  const std::size_t offset = out.size();
  out.resize(offset + data.size() * sizeof(float));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::uint32_t bits = to_little_endian(std::bit_cast<std::uint32_t>(data[i]));
    std::memcpy(out.data() + offset + i * sizeof(float), &bits, sizeof(bits));
  }
  atomic_write(path, out);
}

EmbeddingMatrix read_embeddings(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const auto newline = bytes.find('\n');
  if (newline == std::string::npos) {
    throw Error(ErrorCode::kCorruptHeader, path.string() + ": missing header line");
  }
  Json header;
  try {
    header = Json::parse(bytes.substr(0, newline));
  } catch (const Json::parse_error&) {
    throw Error(ErrorCode::kCorruptHeader, path.string() + ": header is not JSON");
  }
  if (!header.is_object() || header.value("magic", "") != kEmbeddingMagic) {
    throw Error(ErrorCode::kCorruptHeader, path.string() + ": bad magic");
  }
  std::size_t dim = 0;
  std::size_t count = 0;
  std::vector<std::string> keys;
  Modality modality;
  try {
    dim = header.at("dim").get<std::size_t>();
    count = header.at("count").get<std::size_t>();
    keys = header.at("keys").get<std::vector<std::string>>();
    modality = parse_modality(header.at("modality").get<std::string>());
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kCorruptHeader, path.string() + ": " + e.what());
  }
  if (keys.size() != count) {
    throw Error(ErrorCode::kDimensionMismatch,
                path.string() + ": header lists " + std::to_string(keys.size()) +
                    " keys for count " + std::to_string(count));
  }
  const std::size_t payload = bytes.size() - newline - 1;
  const std::size_t expected = count * dim * sizeof(float);
  if (payload < expected) {
    throw Error(ErrorCode::kTruncated, path.string() + ": payload has " +
                                           std::to_string(payload) + " bytes, expected " +
                                           std::to_string(expected));
  }
  if (payload > expected) {
    throw Error(ErrorCode::kDimensionMismatch,
                path.string() + ": payload larger than header dim x count");
  }
  EmbeddingMatrix matrix(modality, dim);
  if (header.contains("encoder")) matrix.encoder = header["encoder"].get<std::string>();
  std::vector<float> row(dim);
  const char* p = bytes.data() + newline + 1;
  for (std::size_t r = 0; r < count; ++r) {
    for (std::size_t c = 0; c < dim; ++c) {
      std::uint32_t bits;
      std::memcpy(&bits, p, sizeof(bits));
      p += sizeof(bits);
      row[c] = std::bit_cast<float>(to_little_endian(bits));
    }
    matrix.append(keys[r], row);
  }
  return matrix;
}

Json record_to_json(const ExampleRecord& record) {
  Json row = {{"id", record.id}, {"task", to_string(record.task)}};
  if (record.image_key) row["image_key"] = *record.image_key;
  if (record.text) row["text"] = *record.text;
  if (record.answer_is_list) {
    row["answer"] = record.answers;
  } else if (!record.answers.empty()) {
    row["answer"] = record.answers.front();
  }
  if (record.label) row["label"] = *record.label;
  return row;
}

ExampleRecord record_from_json(const Json& row) {
  ExampleRecord r;
  try {
    r.id = row.at("id").get<std::string>();
    r.task = parse_task(row.at("task").get<std::string>());
    if (row.contains("image_key")) r.image_key = row["image_key"].get<std::string>();
    if (row.contains("text")) r.text = row["text"].get<std::string>();
    if (row.contains("answer")) {
      const auto& a = row["answer"];
      if (a.is_array()) {
        r.answer_is_list = true;
        r.answers = a.get<std::vector<std::string>>();
      } else {
        r.answers.push_back(a.get<std::string>());
      }
    }
    if (row.contains("label")) r.label = row["label"].get<int>();
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("bad record: ") + e.what());
  }
  return r;
}

Corpus ingest_manifest(const std::filesystem::path& manifest_path) {
  if (!std::filesystem::exists(manifest_path)) {
    throw Error(ErrorCode::kMissingFile, "manifest not found: " + manifest_path.string());
  }
  const auto rows = read_jsonl(manifest_path);
  if (rows.empty() || !rows.front().contains("micl_manifest")) {
    throw Error(ErrorCode::kParse, manifest_path.string() + ": missing manifest head object");
  }
  const Json& head = rows.front();
  if (head["micl_manifest"] != kManifestVersion) {
    throw Error(ErrorCode::kVersionMismatch,
                manifest_path.string() + ": unsupported manifest version");
  }
  const auto base = manifest_path.parent_path();
  Corpus corpus;
  if (head.contains("metadata")) {
    corpus.metadata = head["metadata"].get<std::map<std::string, std::string>>();
  }
  auto load = [&](const char* field) -> std::optional<EmbeddingMatrix> {
    if (!head.contains(field) || head[field].is_null()) return std::nullopt;
    const auto path = base / head[field].get<std::string>();
    if (!std::filesystem::exists(path)) {
      throw Error(ErrorCode::kMissingFile, "embedding file not found: " + path.string());
    }
    return read_embeddings(path);
  };
  corpus.image_embeddings = load("image_embeddings");
  corpus.text_embeddings = load("text_embeddings");
  if (corpus.image_embeddings && corpus.image_embeddings->modality() != Modality::kImage) {
    throw Error(ErrorCode::kCorruptHeader, "image_embeddings file holds text rows");
  }
  if (corpus.text_embeddings && corpus.text_embeddings->modality() != Modality::kText) {
    throw Error(ErrorCode::kCorruptHeader, "text_embeddings file holds image rows");
  }
  if (corpus.image_embeddings && corpus.text_embeddings &&
      corpus.image_embeddings->dim() != corpus.text_embeddings->dim()) {
    throw Error(ErrorCode::kDimensionMismatch,
                "image dim " + std::to_string(corpus.image_embeddings->dim()) +
                    " differs from text dim " +
                    std::to_string(corpus.text_embeddings->dim()));
  }

  std::set<std::string> seen;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    ExampleRecord r = record_from_json(rows[i]);
    if (!seen.insert(r.id).second) {
      throw Error(ErrorCode::kDuplicateId, "duplicate record id '" + r.id + "'");
    }
    if (r.image_key && (!corpus.image_embeddings ||
                        !corpus.image_embeddings->find(*r.image_key))) {
      throw Error(ErrorCode::kDanglingKey, "record '" + r.id + "' references image_key '" +
                                               *r.image_key + "' absent from the matrix");
    }
    if (r.text && corpus.text_embeddings && !corpus.text_embeddings->find(r.id)) {
      throw Error(ErrorCode::kDanglingKey,
                  "record '" + r.id + "' has text but no text embedding row '" + r.id + "'");
    }
    corpus.records.push_back(std::move(r));
  }

  auto diagnostics = validate_corpus(corpus);
  if (!diagnostics.empty()) {
    std::ostringstream msg;
    msg << manifest_path.string() << ": " << diagnostics.size() << " invalid record(s):";
    for (const auto& d : diagnostics) msg << " [" << d.record_id << ": " << d.reason << "]";
    throw Error(ErrorCode::kInvalidArgument, msg.str());
  }
  return corpus;
}

EmbeddingMatrix l2_normalize(const EmbeddingMatrix& matrix) {
  EmbeddingMatrix out = matrix;
  for (std::size_t r = 0; r < out.count(); ++r) {
    auto row = out.mutable_row(r);
    double sq = 0.0;
    for (float x : row) sq += static_cast<double>(x) * x;
    const double norm = std::sqrt(sq);
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      throw Error(ErrorCode::kZeroNorm, std::string(to_string(matrix.modality())) +
                                            " row '" + matrix.keys()[r] +
                                            "' has zero or non-finite norm");
    }
    for (float& x : row) x = static_cast<float>(x / norm);
  }
  return out;
}

Corpus normalize_corpus(Corpus corpus) {
  if (corpus.image_embeddings) corpus.image_embeddings = l2_normalize(*corpus.image_embeddings);
  if (corpus.text_embeddings) corpus.text_embeddings = l2_normalize(*corpus.text_embeddings);
  corpus.metadata["normalized"] = "true";
  return corpus;
}

std::vector<Diagnostic> validate_corpus(const Corpus& corpus) {
  std::vector<Diagnostic> out;
  std::set<std::string> seen;
  const bool labeled = [&] {
    auto it = corpus.metadata.find("labeled");
    return it == corpus.metadata.end() || it->second != "false";
  }();
  for (const auto& r : corpus.records) {
    if (!seen.insert(r.id).second) out.push_back({r.id, "duplicate id"});
    if (!r.image_key && !r.text) out.push_back({r.id, "no modality"});
    if (r.task == Task::kVqa && !r.text) out.push_back({r.id, "vqa record missing question text"});
    if (r.task == Task::kRankClassification && labeled && !r.label) {
      out.push_back({r.id, "rank_classification record missing label"});
    }
    if (r.label && *r.label != 0 && *r.label != 1) out.push_back({r.id, "label must be 0 or 1"});
    if (r.image_key &&
        (!corpus.image_embeddings || !corpus.image_embeddings->find(*r.image_key))) {
      out.push_back({r.id, "dangling image_key '" + *r.image_key + "'"});
    }
    if (r.text && corpus.text_embeddings && !corpus.text_embeddings->find(r.id)) {
      out.push_back({r.id, "missing text embedding row"});
    }
  }
  auto check_matrix = [&](const std::optional<EmbeddingMatrix>& m) {
    if (!m) return;
    const bool normalized = corpus.metadata.count("normalized") &&
                            corpus.metadata.at("normalized") == "true";
    for (std::size_t i = 0; i < m->count(); ++i) {
      auto row = m->row(i);
      if (!row_is_finite(row)) {
        out.push_back({m->keys()[i], std::string(to_string(m->modality())) + " row not finite"});
        continue;
      }
      if (normalized) {
        double sq = 0.0;
        for (float x : row) sq += static_cast<double>(x) * x;
        if (std::abs(std::sqrt(sq) - 1.0) > 1e-5) {
          out.push_back({m->keys()[i], std::string(to_string(m->modality())) +
                                           " row not unit-normalized"});
        }
      }
    }
  };
  check_matrix(corpus.image_embeddings);
  check_matrix(corpus.text_embeddings);
  if (corpus.image_embeddings && corpus.text_embeddings &&
      corpus.image_embeddings->encoder != corpus.text_embeddings->encoder) {
    out.push_back({"", "image and text embeddings come from different encoders"});
  }
  return out;
}

void persist_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Json head = {{"micl_manifest", kManifestVersion}, {"metadata", corpus.metadata}};
  if (corpus.image_embeddings) {
    write_embeddings(*corpus.image_embeddings, dir / "image.micl");
    head["image_embeddings"] = "image.micl";
  }
  if (corpus.text_embeddings) {
    write_embeddings(*corpus.text_embeddings, dir / "text.micl");
    head["text_embeddings"] = "text.micl";
  }
  std::vector<Json> rows;
  rows.reserve(corpus.records.size() + 1);
  rows.push_back(std::move(head));
  for (const auto& r : corpus.records) rows.push_back(record_to_json(r));
  write_jsonl(dir / "manifest.jsonl", rows);
}

Corpus load_corpus(const std::filesystem::path& dir) {
  return ingest_manifest(dir / "manifest.jsonl");
}

}  // namespace micl
