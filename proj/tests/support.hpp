#pragma once

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "micl/adapter.hpp"
#include "micl/corpus.hpp"
#include "micl/retrieval.hpp"
#include "micl/util.hpp"

namespace testing {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("micl_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

inline std::vector<float> random_row(micl::Rng& rng, std::size_t dim) {
  std::vector<float> v(dim);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

inline std::string pad_id(const std::string& prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%05zu", prefix.c_str(), i);
  return buf;
}

struct CorpusShape {
  std::size_t count = 10;
  std::size_t dim = 8;
  micl::Task task = micl::Task::kCaptioning;
  bool image = true;
  bool text = true;
  std::string prefix = "m";
};

/// Random corpus with unnormalized gaussian rows; image keys are "img_<id>".
inline micl::Corpus random_corpus(micl::Rng& rng, const CorpusShape& shape) {
  micl::Corpus c;
  if (shape.image) c.image_embeddings = micl::EmbeddingMatrix(micl::Modality::kImage, shape.dim);
  if (shape.text) c.text_embeddings = micl::EmbeddingMatrix(micl::Modality::kText, shape.dim);
  for (std::size_t i = 0; i < shape.count; ++i) {
    micl::ExampleRecord r;
    r.id = pad_id(shape.prefix, i);
    r.task = shape.task;
    if (shape.image) {
      r.image_key = "img_" + r.id;
      c.image_embeddings->append(*r.image_key, random_row(rng, shape.dim));
    }
    switch (shape.task) {
      case micl::Task::kCaptioning:
        r.text = "caption " + std::to_string(i);
        break;
      case micl::Task::kVqa:
        r.text = "question " + std::to_string(i) + "?";
        r.answer_is_list = true;
        r.answers = {"a" + std::to_string(i % 3), "a" + std::to_string(i % 3), "b"};
        break;
      case micl::Task::kRankClassification:
        r.text = "meme " + std::to_string(i);
        r.label = static_cast<int>(i % 2);
        break;
    }
    if (shape.text) c.text_embeddings->append(r.id, random_row(rng, shape.dim));
    c.records.push_back(std::move(r));
  }
  return c;
}

/// Plain double-precision cosine, independent of the library's kernels.
inline double scalar_cosine(std::span<const float> a, std::span<const float> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

/// Scores every memory item with the reference pairwise similarity, sorts the
/// whole list (score descending, id ascending) and cuts it at k.
inline micl::RetrievalResult full_sort_oracle(const micl::ExampleRecord& q, const micl::Corpus& qc,
                                              const micl::Corpus& memory,
                                              const micl::SimilarityConfig& cfg, std::size_t k,
                                              bool exclude_self = false) {
  std::vector<micl::ScoredCandidate> all;
  for (const auto& m : memory.records) {
    if (exclude_self && m.id == q.id) continue;
    all.push_back({m.id, micl::fused_similarity(q, qc, m, memory, cfg)});
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.score > b.score || (a.score == b.score && a.id < b.id);
  });
  if (all.size() > k) all.resize(k);
  return {q.id, all};
}

inline micl::Matrix random_matrix(micl::Rng& rng, std::size_t dim, double scale = 0.3) {
  micl::Matrix m = micl::Matrix::identity(dim);
  for (auto& x : m.values) x += scale * rng.normal();
  return m;
}

inline micl::ProjectionAdapter random_adapter(micl::Rng& rng, std::size_t dim) {
  micl::ProjectionAdapter a = micl::ProjectionAdapter::identity(dim);
  for (auto& m : a.matrices) m = random_matrix(rng, dim);
  return a;
}

}  // namespace testing
