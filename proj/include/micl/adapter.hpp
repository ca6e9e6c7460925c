#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "micl/corpus.hpp"

namespace micl {

enum class Side { kQuery, kContext };

/// Slot order is fixed: it is also the payload order in checkpoints.
enum class AdapterSlot : std::size_t {
  kQueryImage = 0,
  kQueryText = 1,
  kContextImage = 2,
  kContextText = 3,
};
inline constexpr std::size_t kAdapterSlots = 4;

std::string_view to_string(AdapterSlot slot);
AdapterSlot adapter_slot(Side side, Modality modality);

/// Square row-major dim x dim matrix in 64-bit.
struct Matrix {
  std::size_t dim = 0;
  std::vector<double> values;

  static Matrix identity(std::size_t dim);
  static Matrix zeros(std::size_t dim);
  double& at(std::size_t r, std::size_t c) { return values[r * dim + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * dim + c]; }

  bool operator==(const Matrix&) const = default;
};

/// Per-side, per-modality bias-free projections applied to frozen
/// embeddings before normalization.
struct ProjectionAdapter {
  std::size_t dim = 0;
  std::array<Matrix, kAdapterSlots> matrices;
  std::array<bool, kAdapterSlots> frozen{};

  static ProjectionAdapter identity(std::size_t dim);

  const Matrix& matrix(AdapterSlot slot) const {
    return matrices[static_cast<std::size_t>(slot)];
  }
  Matrix& matrix(AdapterSlot slot) { return matrices[static_cast<std::size_t>(slot)]; }
  bool is_frozen(AdapterSlot slot) const { return frozen[static_cast<std::size_t>(slot)]; }

  /// Bitwise equality of every matrix and flag.
  bool bit_equal(const ProjectionAdapter& other) const;
};

/// z = W x in 64-bit.
std::vector<double> project(const Matrix& w, std::span<const float> x);
/// z / ||z||; throws kZeroNorm for a zero (or non-finite) vector.
std::vector<double> normalized(std::vector<double> z);

/// normalize(sum over modalities of W_side,modality * v_modality). When
/// `modalities` is empty, every modality the record carries (and that is an
/// admissible input on this side) is used.
std::vector<double> encode(const ExampleRecord& record, const Corpus& corpus, Side side,
                           const ProjectionAdapter& adapter,
                           std::span<const Modality> modalities = {});

/// Whether a record's modality can be used as retrieval input on a side.
/// Captions of captioning queries are targets, not inputs.
bool admissible_input(const ExampleRecord& record, const Corpus& corpus, Side side,
                      Modality modality);

}  // namespace micl
