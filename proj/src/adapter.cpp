#include "micl/adapter.hpp"

#include <cmath>
#include <cstring>

#include "micl/error.hpp"

namespace micl {

std::string_view to_string(AdapterSlot slot) {
  switch (slot) {
    case AdapterSlot::kQueryImage: return "query_image";
    case AdapterSlot::kQueryText: return "query_text";
    case AdapterSlot::kContextImage: return "context_image";
    case AdapterSlot::kContextText: return "context_text";
  }
  return "?";
}

AdapterSlot adapter_slot(Side side, Modality modality) {
  if (side == Side::kQuery) {
    return modality == Modality::kImage ? AdapterSlot::kQueryImage : AdapterSlot::kQueryText;
  }
  return modality == Modality::kImage ? AdapterSlot::kContextImage : AdapterSlot::kContextText;
}

Matrix Matrix::identity(std::size_t dim) {
  Matrix m = zeros(dim);
  for (std::size_t i = 0; i < dim; ++i) m.at(i, i) = 1.0;
  return m;
}

Matrix Matrix::zeros(std::size_t dim) { return Matrix{dim, std::vector<double>(dim * dim, 0.0)}; }

ProjectionAdapter ProjectionAdapter::identity(std::size_t dim) {
  ProjectionAdapter a;
  a.dim = dim;
  for (auto& m : a.matrices) m = Matrix::identity(dim);
  return a;
}

bool ProjectionAdapter::bit_equal(const ProjectionAdapter& other) const {
  if (dim != other.dim || frozen != other.frozen) return false;
  for (std::size_t s = 0; s < kAdapterSlots; ++s) {
    const auto& a = matrices[s].values;
    const auto& b = other.matrices[s].values;
    if (a.size() != b.size() ||
        (!a.empty() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0)) {
      return false;
    }
  }
  return true;
}

std::vector<double> project(const Matrix& w, std::span<const float> x) {
  if (w.dim != x.size()) {
    throw Error(ErrorCode::kDimensionMismatch,
                "adapter dim " + std::to_string(w.dim) + " vs embedding dim " +
                    std::to_string(x.size()));
  }
  std::vector<double> z(w.dim, 0.0);
  for (std::size_t r = 0; r < w.dim; ++r) {
    double acc = 0.0;
    const double* row = w.values.data() + r * w.dim;
    for (std::size_t c = 0; c < w.dim; ++c) acc += row[c] * static_cast<double>(x[c]);
    z[r] = acc;
  }
  return z;
}

std::vector<double> normalized(std::vector<double> z) {
  double sq = 0.0;
  for (double v : z) sq += v * v;
  const double norm = std::sqrt(sq);
  if (!(norm > 0.0) || !std::isfinite(norm)) {
    throw Error(ErrorCode::kZeroNorm, "zero vector after projection");
  }
  for (double& v : z) v /= norm;
  return z;
}

bool admissible_input(const ExampleRecord& record, const Corpus& corpus, Side side,
                      Modality modality) {
  if (side == Side::kQuery && modality == Modality::kText &&
      record.task == Task::kCaptioning) {
    return false;
  }
  return corpus.embedding(record, modality).has_value();
}

std::vector<double> encode(const ExampleRecord& record, const Corpus& corpus, Side side,
                           const ProjectionAdapter& adapter,
                           std::span<const Modality> modalities) {
  static constexpr Modality kAll[] = {Modality::kImage, Modality::kText};
  std::vector<double> sum(adapter.dim, 0.0);
  bool any = false;
  auto add = [&](Modality m) {
    auto row = corpus.embedding(record, m);
    if (!row) {
      throw Error(ErrorCode::kUnresolvableModality,
                  "record '" + record.id + "' has no " + std::string(to_string(m)) +
                      " embedding");
    }
    const auto z = project(adapter.matrix(adapter_slot(side, m)), *row);
    for (std::size_t i = 0; i < z.size(); ++i) sum[i] += z[i];
    any = true;
  };
  if (modalities.empty()) {
    for (Modality m : kAll) {
      if (admissible_input(record, corpus, side, m)) add(m);
    }
  } else {
    for (Modality m : modalities) add(m);
  }
  if (!any) {
    throw Error(ErrorCode::kUnresolvableModality,
                "record '" + record.id + "' has no usable modality");
  }
  return normalized(std::move(sum));
}

}  // namespace micl
