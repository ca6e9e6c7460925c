#include "micl/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "micl/error.hpp"
#include "micl/util.hpp"

namespace micl {

namespace {

constexpr std::array<std::array<std::string_view, 4>, 6> kSlotWords = {{
    {"red", "blue", "green", "yellow"},
    {"small", "large", "old", "shiny"},
    {"dog", "bus", "cake", "surfer"},
    {"sitting", "running", "parked", "standing"},
    {"near", "behind", "under", "beside"},
    {"beach", "street", "kitchen", "field"},
}};

std::vector<double> gaussian_unit(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  double sq = 0.0;
  do {
    sq = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      sq += x * x;
    }
  } while (sq == 0.0);
  const double norm = std::sqrt(sq);
  for (auto& x : v) x /= norm;
  return v;
}

// Random orthogonal basis (columns) via Gram-Schmidt on Gaussian vectors.
std::vector<std::vector<double>> random_basis(Rng& rng, std::size_t dim) {
  std::vector<std::vector<double>> basis;
  while (basis.size() < dim) {
    auto v = gaussian_unit(rng, dim);
    for (const auto& b : basis) {
      double d = 0.0;
      for (std::size_t i = 0; i < dim; ++i) d += v[i] * b[i];
      for (std::size_t i = 0; i < dim; ++i) v[i] -= d * b[i];
    }
    double sq = 0.0;
    for (double x : v) sq += x * x;
    if (sq < 1e-12) continue;
    const double norm = std::sqrt(sq);
    for (auto& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  return basis;
}

// basis * [sqrt(share) h ; sqrt(1 - share) n] with unit h and n, times a
// random positive scale so normalization has work to do.
std::vector<float> embed(const std::vector<std::vector<double>>& basis,
                         const std::vector<double>& latent, const std::vector<double>& nuisance,
                         double share, Rng& rng) {
  const std::size_t dim = basis.size();
  const std::size_t l = latent.size();
  std::vector<double> coords(dim);
  for (std::size_t i = 0; i < l; ++i) coords[i] = std::sqrt(share) * latent[i];
  for (std::size_t i = l; i < dim; ++i) coords[i] = std::sqrt(1.0 - share) * nuisance[i - l];
  const double scale = 0.5 + 2.0 * rng.uniform();
  std::vector<float> out(dim, 0.0f);
  for (std::size_t r = 0; r < dim; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < dim; ++c) acc += basis[c][r] * coords[c];
    out[r] = static_cast<float>(scale * acc);
  }
  return out;
}

std::vector<double> blend_unit(const std::vector<double>& anchor, double noise, Rng& rng) {
  auto v = gaussian_unit(rng, anchor.size());
  double sq = 0.0;
  for (std::size_t d = 0; d < v.size(); ++d) {
    v[d] = anchor[d] + noise * v[d];
    sq += v[d] * v[d];
  }
  for (double& x : v) x /= std::sqrt(sq);
  return v;
}

std::string_view slot_word(const std::vector<double>& h, std::size_t slot) {
  const std::size_t a = (2 * slot) % h.size();
  const std::size_t b = (2 * slot + 1) % h.size();
  const std::size_t quadrant = (h[a] > 0 ? 1 : 0) + (h[b] > 0 ? 2 : 0);
  return kSlotWords[slot][quadrant];
}

std::string caption_for(const std::vector<double>& h, Rng& rng, bool perturb) {
  std::string out = "a";
  const std::size_t swap = perturb ? rng.uniform_index(kSlotWords.size()) : kSlotWords.size();
  for (std::size_t s = 0; s < kSlotWords.size(); ++s) {
    out.push_back(' ');
    out += s == swap ? kSlotWords[s][rng.uniform_index(4)] : slot_word(h, s);
  }
  return out;
}

}  // namespace

SyntheticData make_synthetic(const SyntheticSpec& spec) {
  if (spec.latent_dim == 0 || spec.latent_dim >= spec.dim) {
    throw Error(ErrorCode::kInvalidArgument, "latent_dim must be in (0, dim)");
  }
  if (!(spec.latent_share > 0.0 && spec.latent_share < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "latent_share must be in (0, 1)");
  }
  Rng rng(spec.seed);
  // Image and text share one basis, as in a jointly trained encoder.
  const auto basis = random_basis(rng, spec.dim);
  const std::size_t nuisance_dim = spec.dim - spec.latent_dim;
  std::vector<std::vector<double>> memory_nuisance;

  SyntheticData data;
  data.latent = EmbeddingMatrix(Modality::kText, spec.latent_dim);
  data.latent.encoder = "synthetic-latent";
  for (Corpus* c : {&data.memory, &data.queries}) {
    c->image_embeddings = EmbeddingMatrix(Modality::kImage, spec.dim);
    c->text_embeddings = EmbeddingMatrix(Modality::kText, spec.dim);
    c->image_embeddings->encoder = "synthetic";
    c->text_embeddings->encoder = "synthetic";
    c->metadata = {{"encoder", "synthetic"},
                   {"dim", std::to_string(spec.dim)},
                   {"source", "synthetic seed " + std::to_string(spec.seed)}};
  }
  data.memory.metadata["split"] = "memory";
  data.queries.metadata["split"] = "queries";

  auto make = [&](Corpus& corpus, const std::string& prefix, std::size_t count, bool is_query) {
    for (std::size_t i = 0; i < count; ++i) {
      auto h = gaussian_unit(rng, spec.latent_dim);
      if (is_query && spec.query_twin_noise > 0.0 && !data.memory.records.empty()) {
        const auto twin = data.latent.row(rng.uniform_index(data.memory.records.size()));
        h = blend_unit(std::vector<double>(twin.begin(), twin.end()), spec.query_twin_noise, rng);
      }
      auto nuisance = gaussian_unit(rng, nuisance_dim);
      if (is_query && spec.query_distractor_noise > 0.0 && !memory_nuisance.empty()) {
        std::size_t pick = rng.uniform_index(memory_nuisance.size());
        for (int attempt = 0; attempt < 10000; ++attempt) {
          const auto row = data.latent.row(pick);
          double c = 0.0;
          for (std::size_t d = 0; d < spec.latent_dim; ++d) c += row[d] * h[d];
          if (std::abs(c) < spec.distractor_latent_band) break;
          pick = rng.uniform_index(memory_nuisance.size());
        }
        nuisance = blend_unit(memory_nuisance[pick], spec.query_distractor_noise, rng);
      }
      if (!is_query) memory_nuisance.push_back(nuisance);
      ExampleRecord r;
      r.id = prefix + std::to_string(i);
      r.task = spec.task;
      r.image_key = "img-" + r.id;

      // The caption (or question) sees the latent only partially.
      auto h_text = gaussian_unit(rng, spec.latent_dim);
      double sq = 0.0;
      for (std::size_t d = 0; d < spec.latent_dim; ++d) {
        h_text[d] = spec.text_latent_share * h[d] + (1.0 - spec.text_latent_share) * h_text[d];
        sq += h_text[d] * h_text[d];
      }
      for (double& x : h_text) x /= std::sqrt(sq);
      switch (spec.task) {
        case Task::kCaptioning:
          r.text = caption_for(h, rng, false);
          if (is_query) {
            r.answer_is_list = true;
            r.answers = {*r.text, caption_for(h, rng, true), caption_for(h, rng, true)};
          }
          break;
        case Task::kVqa: {
          r.text = "what is the " + std::string(slot_word(h, 0)) + " " +
                   std::string(slot_word(h, 2)) + " doing?";
          r.answer_is_list = true;
          for (int a = 0; a < 10; ++a) {
            r.answers.emplace_back(a < 7 ? slot_word(h, 3) : kSlotWords[3][rng.uniform_index(4)]);
          }
          break;
        }
        case Task::kRankClassification:
          r.text = std::string(slot_word(h, 1)) + " " + std::string(slot_word(h, 2)) + " " +
                   std::string(slot_word(h, 5));
          r.label = h[0] > 0 ? 1 : 0;
          break;
      }
      corpus.image_embeddings->append(*r.image_key,
                                      embed(basis, h, nuisance, spec.latent_share, rng));
      // Captions also describe what the image looks like, so they inherit its
      // nuisance.
      corpus.text_embeddings->append(
          r.id, embed(basis, h_text, blend_unit(nuisance, spec.text_nuisance_noise, rng),
                      spec.latent_share, rng));
      std::vector<float> hf(h.begin(), h.end());
      data.latent.append(r.id, hf);
      corpus.records.push_back(std::move(r));
    }
  };
  make(data.memory, "m", spec.memory, false);
  make(data.queries, "q", spec.queries, true);
  return data;
}

void write_synthetic(const SyntheticData& data, const std::filesystem::path& dir) {
  persist_corpus(data.memory, dir / "memory");
  persist_corpus(data.queries, dir / "queries");
  write_embeddings(data.latent, dir / "latent.micl");
}

}  // namespace micl
