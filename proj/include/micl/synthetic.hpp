#pragma once

#include <cstdint>
#include <filesystem>

#include "micl/corpus.hpp"

namespace micl {

/// Knobs for a seeded synthetic corpus whose helpfulness structure lives
/// in a hidden latent subspace of the embeddings.
struct SyntheticSpec {
  std::size_t memory = 2000;
  std::size_t queries = 200;
  std::size_t dim = 64;
  std::size_t latent_dim = 8;
  /// Energy share of the latent block in each embedding; the rest is a unit
  /// nuisance vector (background, composition) with no bearing on
  /// helpfulness.
  double latent_share = 0.4;
  /// Queries take the latent of a random memory item (their helpful twin),
  /// perturbed by this much; zero or negative draws an independent latent.
  double query_twin_noise = 0.1;
  /// Queries copy the nuisance of another random memory item (a distractor
  /// that looks alike but does not help), perturbed by this much; zero or
  /// negative draws independent nuisance.
  double query_distractor_noise = 0.45;
  /// Distractors are drawn among memory items whose latent cosine with the
  /// query is below this in magnitude, so they look alike but are unrelated.
  double distractor_latent_band = 0.1;
  /// How much of a caption's latent part agrees with its image's latent.
  double text_latent_share = 0.9;
  /// Deviation of a caption's nuisance from its image's nuisance.
  double text_nuisance_noise = 0.5;
  std::uint64_t seed = 7;
  Task task = Task::kCaptioning;
};

struct SyntheticData {
  Corpus memory;
  Corpus queries;
  /// Unit "helpfulness" rows keyed by record id for memory and queries.
  EmbeddingMatrix latent;
};

SyntheticData make_synthetic(const SyntheticSpec& spec);

/// Writes memory/, queries/ (manifest + embeddings) and latent.micl.
void write_synthetic(const SyntheticData& data, const std::filesystem::path& dir);

}  // namespace micl
