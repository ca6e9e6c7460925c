#include "micl/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include "micl/error.hpp"

namespace micl {

namespace {

constexpr std::string_view kCheckpointMagic = "MICLCKPT";
constexpr int kCheckpointVersion = 1;

struct Encoded {
  std::span<const float> x;
  std::vector<double> u;
  double norm = 0.0;
};

Encoded encode_row(const Matrix& w, std::span<const float> x, const std::string& id) {
  Encoded e{x, project(w, x), 0.0};
  double sq = 0.0;
  for (double v : e.u) sq += v * v;
  e.norm = std::sqrt(sq);
  if (!(e.norm > 0.0) || !std::isfinite(e.norm)) {
    throw Error(ErrorCode::kZeroNorm, "record '" + id + "' projects to a zero vector");
  }
  for (double& v : e.u) v /= e.norm;
  return e;
}

std::span<const float> input_row(const ExampleRecord& r, const Corpus& corpus, Side side,
                                 Modality m) {
  if (!admissible_input(r, corpus, side, m)) {
    throw Error(ErrorCode::kUnresolvableModality,
                "record '" + r.id + "' has no usable " + std::string(to_string(m)) +
                    " embedding for training");
  }
  return *corpus.embedding(r, m);
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Encodings for one modality pair over a batch.
struct PairEncoding {
  PairWeight pair;
  std::vector<Encoded> queries;   // N_b
  std::vector<Encoded> contexts;  // 2 N_b: positive, negative per query
};

std::vector<PairEncoding> encode_batch(const TrainingBatch& batch, const BatchSource& source,
                                       const ProjectionAdapter& adapter,
                                       std::span<const PairWeight> pairs) {
  if (pairs.empty()) throw Error(ErrorCode::kInvalidArgument, "no modality pairs to train on");
  std::vector<PairEncoding> out;
  for (const auto& p : pairs) {
    PairEncoding enc{p, {}, {}};
    const auto& wq = adapter.matrix(adapter_slot(Side::kQuery, p.query));
    const auto& wc = adapter.matrix(adapter_slot(Side::kContext, p.memory));
    for (const auto& t : batch.items) {
      const auto& q = source.query(t.query_id);
      enc.queries.push_back(encode_row(wq, input_row(q, source.queries(), Side::kQuery, p.query), q.id));
      for (const auto* id : {&t.positive_id, &t.negative_id}) {
        const auto& c = source.candidate(*id);
        enc.contexts.push_back(
            encode_row(wc, input_row(c, source.memory(), Side::kContext, p.memory), c.id));
      }
    }
    out.push_back(std::move(enc));
  }
  return out;
}

SimilarityTable similarities(const std::vector<PairEncoding>& encodings, std::size_t n) {
  SimilarityTable s(n, std::vector<double>(2 * n, 0.0));
  for (const auto& enc : encodings) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t c = 0; c < 2 * n; ++c) {
        s[j][c] += enc.pair.weight * dot(enc.queries[j].u, enc.contexts[c].u);
      }
    }
  }
  return s;
}

// Back-propagates g = dL/du through u = z / ||z||, z = W x into dW.
void accumulate(Matrix& grad, const Encoded& e, const std::vector<double>& g) {
  const double ug = dot(e.u, g);
  const std::size_t dim = grad.dim;
  for (std::size_t r = 0; r < dim; ++r) {
    const double dz = (g[r] - e.u[r] * ug) / e.norm;
    if (dz == 0.0) continue;
    double* row = grad.values.data() + r * dim;
    for (std::size_t c = 0; c < dim; ++c) row[c] += dz * static_cast<double>(e.x[c]);
  }
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  char buf[8];
  std::memcpy(buf, &bits, 8);
  out.append(buf, 8);
}

double get_f64(const char* p) {
  std::uint64_t bits;
  std::memcpy(&bits, p, 8);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  return std::bit_cast<double>(bits);
}

}  // namespace

std::size_t TrainConfig::warmup_for(std::size_t total_steps) const {
  return warmup_steps.value_or(total_steps / 10);
}

Json TrainConfig::to_json() const {
  Json pairs_json = Json::array();
  for (const auto& p : pairs) {
    pairs_json.push_back(
        {{"query", to_string(p.query)}, {"memory", to_string(p.memory)}, {"weight", p.weight}});
  }
  Json freeze_json = Json::object();
  for (std::size_t s = 0; s < kAdapterSlots; ++s) {
    freeze_json[std::string(to_string(static_cast<AdapterSlot>(s)))] = freeze[s];
  }
  Json j = {{"epochs", epochs},
            {"peak_lr", peak_lr},
            {"warmup_steps", warmup_steps ? Json(*warmup_steps) : Json(nullptr)},
            {"batch_size", batch_size},
            {"k", k},
            {"temperature", temperature},
            {"seed", seed},
            {"beta1", adamw.beta1},
            {"beta2", adamw.beta2},
            {"epsilon", adamw.epsilon},
            {"weight_decay", adamw.weight_decay},
            {"pairs", std::move(pairs_json)},
            {"freeze", std::move(freeze_json)}};
  return j;
}

TrainConfig TrainConfig::from_json(const Json& j) {
  TrainConfig cfg;
  try {
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.peak_lr = j.value("peak_lr", cfg.peak_lr);
    if (j.contains("warmup_steps") && !j["warmup_steps"].is_null()) {
      cfg.warmup_steps = j["warmup_steps"].get<std::size_t>();
    }
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.k = j.value("k", cfg.k);
    cfg.temperature = j.value("temperature", cfg.temperature);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.adamw.beta1 = j.value("beta1", cfg.adamw.beta1);
    cfg.adamw.beta2 = j.value("beta2", cfg.adamw.beta2);
    cfg.adamw.epsilon = j.value("epsilon", cfg.adamw.epsilon);
    cfg.adamw.weight_decay = j.value("weight_decay", cfg.adamw.weight_decay);
    if (j.contains("pairs")) {
      cfg.pairs.clear();
      for (const auto& p : j["pairs"]) {
        cfg.pairs.push_back({parse_modality(p.at("query").get<std::string>()),
                             parse_modality(p.at("memory").get<std::string>()),
                             p.value("weight", 1.0)});
      }
    }
    if (j.contains("freeze")) {
      for (std::size_t s = 0; s < kAdapterSlots; ++s) {
        cfg.freeze[s] = j["freeze"].value(std::string(to_string(static_cast<AdapterSlot>(s))),
                                          false);
      }
    }
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("bad train config: ") + e.what());
  }
  return cfg;
}

void validate(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw Error(ErrorCode::kInvalidArgument, "epochs must be >= 1");
  if (cfg.batch_size < 1) throw Error(ErrorCode::kInvalidArgument, "batch_size must be >= 1");
  if (cfg.k < 1) throw Error(ErrorCode::kInvalidArgument, "K must be >= 1");
  if (!(cfg.peak_lr > 0)) throw Error(ErrorCode::kInvalidArgument, "peak_lr must be > 0");
  if (!(cfg.temperature > 0)) throw Error(ErrorCode::kInvalidArgument, "temperature must be > 0");
  if (cfg.pairs.empty()) throw Error(ErrorCode::kInvalidArgument, "no modality pairs");
}

double contrastive_loss(const SimilarityTable& s, double temperature) {
  const std::size_t n = s.size();
  if (n == 0) return 0.0;
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double max_logit = -INFINITY;
    for (double v : s[j]) max_logit = std::max(max_logit, v / temperature);
    double sum = 0.0;
    for (double v : s[j]) sum += std::exp(v / temperature - max_logit);
    total += max_logit + std::log(sum) - s[j][2 * j] / temperature;
  }
  return total / static_cast<double>(n);
}

SimilarityTable contrastive_loss_similarity_grad(const SimilarityTable& s, double temperature) {
  const std::size_t n = s.size();
  SimilarityTable g(n, std::vector<double>(2 * n, 0.0));
  for (std::size_t j = 0; j < n; ++j) {
    double max_logit = -INFINITY;
    for (double v : s[j]) max_logit = std::max(max_logit, v / temperature);
    double sum = 0.0;
    for (std::size_t c = 0; c < s[j].size(); ++c) {
      g[j][c] = std::exp(s[j][c] / temperature - max_logit);
      sum += g[j][c];
    }
    for (std::size_t c = 0; c < s[j].size(); ++c) {
      const double p = g[j][c] / sum - (c == 2 * j ? 1.0 : 0.0);
      g[j][c] = p / (temperature * static_cast<double>(n));
    }
  }
  return g;
}

BatchSource::BatchSource(const Corpus& queries, const Corpus& memory)
    : queries_(&queries), memory_(&memory) {
  for (std::size_t i = 0; i < queries.records.size(); ++i) query_index_[queries.records[i].id] = i;
  for (std::size_t i = 0; i < memory.records.size(); ++i) memory_index_[memory.records[i].id] = i;
}

const ExampleRecord& BatchSource::query(const std::string& id) const {
  auto it = query_index_.find(id);
  if (it == query_index_.end()) {
    throw Error(ErrorCode::kDanglingKey, "training query '" + id + "' not in corpus");
  }
  return queries_->records[it->second];
}

const ExampleRecord& BatchSource::candidate(const std::string& id) const {
  auto it = memory_index_.find(id);
  if (it == memory_index_.end()) {
    throw Error(ErrorCode::kDanglingKey, "training candidate '" + id + "' not in corpus");
  }
  return memory_->records[it->second];
}

SimilarityTable batch_similarities(const TrainingBatch& batch, const BatchSource& source,
                                   const ProjectionAdapter& adapter,
                                   std::span<const PairWeight> pairs) {
  return similarities(encode_batch(batch, source, adapter, pairs), batch.items.size());
}

double contrastive_loss(const TrainingBatch& batch, const BatchSource& source,
                        const ProjectionAdapter& adapter, std::span<const PairWeight> pairs,
                        double temperature) {
  return contrastive_loss(batch_similarities(batch, source, adapter, pairs), temperature);
}

LossGradient contrastive_loss_grad(const TrainingBatch& batch, const BatchSource& source,
                                   const ProjectionAdapter& adapter,
                                   std::span<const PairWeight> pairs, double temperature) {
  const std::size_t n = batch.items.size();
  const auto encodings = encode_batch(batch, source, adapter, pairs);
  const auto s = similarities(encodings, n);
  const auto g = contrastive_loss_similarity_grad(s, temperature);

  LossGradient out;
  out.loss = contrastive_loss(s, temperature);
  for (auto& m : out.grads) m = Matrix::zeros(adapter.dim);

  for (const auto& enc : encodings) {
    const auto q_slot = adapter_slot(Side::kQuery, enc.pair.query);
    const auto c_slot = adapter_slot(Side::kContext, enc.pair.memory);
    const double w = enc.pair.weight;
    if (!adapter.is_frozen(q_slot)) {
      for (std::size_t j = 0; j < n; ++j) {
        std::vector<double> gu(adapter.dim, 0.0);
        for (std::size_t c = 0; c < 2 * n; ++c) {
          const double coef = w * g[j][c];
          for (std::size_t d = 0; d < adapter.dim; ++d) gu[d] += coef * enc.contexts[c].u[d];
        }
        accumulate(out.grads[static_cast<std::size_t>(q_slot)], enc.queries[j], gu);
      }
    }
    if (!adapter.is_frozen(c_slot)) {
      for (std::size_t c = 0; c < 2 * n; ++c) {
        std::vector<double> gv(adapter.dim, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
          const double coef = w * g[j][c];
          for (std::size_t d = 0; d < adapter.dim; ++d) gv[d] += coef * enc.queries[j].u[d];
        }
        accumulate(out.grads[static_cast<std::size_t>(c_slot)], enc.contexts[c], gv);
      }
    }
  }
  return out;
}

TrainingBatch sample_batch(Rng& rng, std::span<const MiningResult* const> chosen) {
  TrainingBatch batch;
  batch.items.reserve(chosen.size());
  for (const auto* m : chosen) {
    if (m->positives.empty() || m->negatives.empty()) {
      throw Error(ErrorCode::kInvalidArgument,
                  "query '" + m->query_id + "' has no mined positive or negative");
    }
    const auto& pos = m->positives[rng.uniform_index(m->positives.size())];
    const auto& neg = m->negatives[rng.uniform_index(m->negatives.size())];
    batch.items.push_back({m->query_id, pos, neg});
  }
  return batch;
}

BatchSampler::BatchSampler(std::vector<MiningResult> mining, std::size_t batch_size,
                           std::uint64_t seed)
    : batch_size_(batch_size), rng_(seed) {
  if (batch_size == 0) throw Error(ErrorCode::kInvalidArgument, "batch size must be positive");
  for (auto& m : mining) {
    if (m.positives.empty() || m.negatives.empty()) {
      diagnostics_.push_back("skipping query '" + m.query_id +
                             "': empty positive or negative set");
      continue;
    }
    mining_.push_back(std::move(m));
  }
}

std::size_t BatchSampler::batches_per_epoch() const noexcept {
  return (mining_.size() + batch_size_ - 1) / batch_size_;
}

std::vector<TrainingBatch> BatchSampler::next_epoch() {
  std::vector<const MiningResult*> order;
  order.reserve(mining_.size());
  for (const auto& m : mining_) order.push_back(&m);
  rng_.shuffle(order);
  std::vector<TrainingBatch> batches;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size_) {
    const std::size_t end = std::min(order.size(), begin + batch_size_);
    batches.push_back(sample_batch(
        rng_, std::span<const MiningResult* const>(order.data() + begin, end - begin)));
  }
  return batches;
}

TrainResult train(const Corpus& corpus, std::span<const MiningResult> mining,
                  const TrainConfig& cfg, const std::optional<ProjectionAdapter>& initial) {
  validate(cfg);
  TrainResult result;
  BatchSampler sampler(std::vector<MiningResult>(mining.begin(), mining.end()), cfg.batch_size,
                       cfg.seed);
  result.diagnostics = sampler.diagnostics();
  if (sampler.eligible() == 0) {
    throw Error(ErrorCode::kInvalidArgument, "no query has both positives and negatives");
  }

  if (initial) {
    result.adapter = *initial;
  } else {
    std::size_t dim = 0;
    if (corpus.image_embeddings) dim = corpus.image_embeddings->dim();
    else if (corpus.text_embeddings) dim = corpus.text_embeddings->dim();
    if (dim == 0) throw Error(ErrorCode::kInvalidArgument, "corpus has no embeddings");
    result.adapter = ProjectionAdapter::identity(dim);
  }
  result.adapter.frozen = cfg.freeze;

  result.total_steps = cfg.epochs * sampler.batches_per_epoch();
  result.warmup_steps = cfg.warmup_for(result.total_steps);
  const BatchSource source(corpus, corpus);

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    const auto batches = sampler.next_epoch();
    for (const auto& batch : batches) {
      const double lr = lr_at_step(step, result.total_steps, result.warmup_steps, cfg.peak_lr);
      const auto lg = contrastive_loss_grad(batch, source, result.adapter, cfg.pairs,
                                            cfg.temperature);
      for (std::size_t s = 0; s < kAdapterSlots; ++s) {
        if (result.adapter.frozen[s]) continue;
        adamw_step(result.adapter.matrices[s].values, lg.grads[s].values,
                   result.optimizer.slots[s], step + 1, lr, cfg.adamw,
                   to_string(static_cast<AdapterSlot>(s)));
      }
      result.log.push_back({step, epoch, lr, lg.loss});
      epoch_loss += lg.loss;
      ++step;
    }
    result.epoch_mean_loss.push_back(epoch_loss / static_cast<double>(batches.size()));
  }
  result.optimizer.step = step;
  return result;
}

TrainResult train(const Corpus& corpus, std::span<const ScoreRecord> scores,
                  const TrainConfig& cfg) {
  validate(cfg);
  const auto mining = mine_all(scores, cfg.k);
  return train(corpus, mining, cfg);
}

void write_train_log(const std::filesystem::path& path, const std::vector<StepLog>& log) {
  std::vector<Json> rows;
  rows.reserve(log.size());
  for (const auto& l : log) {
    rows.push_back({{"step", l.step}, {"epoch", l.epoch}, {"lr", l.lr}, {"loss", l.loss}});
  }
  write_jsonl(path, rows);
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto& a = ckpt.adapter;
  Json frozen = Json::array();
  Json slots = Json::array();
  for (std::size_t s = 0; s < kAdapterSlots; ++s) {
    slots.push_back(to_string(static_cast<AdapterSlot>(s)));
    frozen.push_back(a.frozen[s]);
  }
  Json header = {{"magic", kCheckpointMagic},
                 {"version", kCheckpointVersion},
                 {"dim", a.dim},
                 {"slots", slots},
                 {"frozen", frozen},
                 {"cfg_hash", ckpt.cfg_hash},
                 {"corpus_metadata", ckpt.corpus_metadata},
                 {"has_optimizer_state", ckpt.optimizer.has_value()},
                 {"optimizer_step", ckpt.optimizer ? ckpt.optimizer->step : 0}};
  std::string out = header.dump();
  out.push_back('\n');
  const std::size_t n = a.dim * a.dim;
  for (const auto& m : a.matrices) {
    if (m.values.size() != n) {
      throw Error(ErrorCode::kDimensionMismatch, "adapter matrix has wrong size");
    }
    for (double v : m.values) put_f64(out, v);
  }
  if (ckpt.optimizer) {
    for (const auto& st : ckpt.optimizer->slots) {
      for (const auto* vec : {&st.m, &st.v}) {
        // Frozen slots never take a step and keep empty moments.
        for (std::size_t i = 0; i < n; ++i) put_f64(out, vec->empty() ? 0.0 : (*vec)[i]);
      }
    }
  }
  atomic_write(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const auto newline = bytes.find('\n');
  Json header;
  try {
    if (newline == std::string::npos) throw std::runtime_error("no header line");
    header = Json::parse(bytes.substr(0, newline));
  } catch (const std::exception&) {
    throw Error(ErrorCode::kCorruptHeader, "corrupt checkpoint header in " + path.string());
  }
  if (!header.is_object() || header.value("magic", "") != kCheckpointMagic) {
    throw Error(ErrorCode::kCorruptHeader, "bad checkpoint magic in " + path.string());
  }
  if (header.value("version", -1) != kCheckpointVersion) {
    throw Error(ErrorCode::kVersionMismatch, "unsupported checkpoint version in " + path.string());
  }
  Checkpoint ckpt;
  std::size_t dim = 0;
  bool has_state = false;
  try {
    dim = header.at("dim").get<std::size_t>();
    has_state = header.at("has_optimizer_state").get<bool>();
    ckpt.cfg_hash = header.at("cfg_hash").get<std::string>();
    ckpt.corpus_metadata = header.at("corpus_metadata").get<std::map<std::string, std::string>>();
    const auto frozen = header.at("frozen").get<std::vector<bool>>();
    if (frozen.size() != kAdapterSlots) throw std::runtime_error("frozen flag count");
    for (std::size_t s = 0; s < kAdapterSlots; ++s) ckpt.adapter.frozen[s] = frozen[s];
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kCorruptHeader, "corrupt checkpoint header in " + path.string() +
                                               ": " + e.what());
  }
  const std::size_t n = dim * dim;
  const std::size_t blocks = kAdapterSlots * (has_state ? 3 : 1);
  const std::size_t expected = blocks * n * sizeof(double);
  const std::size_t payload = bytes.size() - newline - 1;
  if (payload != expected) {
    throw Error(payload < expected ? ErrorCode::kTruncated : ErrorCode::kCorruptHeader,
                "corrupt checkpoint " + path.string() + ": payload " + std::to_string(payload) +
                    " bytes, expected " + std::to_string(expected));
  }
  const char* p = bytes.data() + newline + 1;
  auto read_block = [&](std::vector<double>& dst) {
    dst.resize(n);
    for (std::size_t i = 0; i < n; ++i, p += 8) dst[i] = get_f64(p);
  };
  ckpt.adapter.dim = dim;
  for (auto& m : ckpt.adapter.matrices) {
    m.dim = dim;
    read_block(m.values);
  }
  if (has_state) {
    AdapterOptimizerState st;
    st.step = header.value("optimizer_step", std::size_t{0});
    for (auto& slot : st.slots) {
      read_block(slot.m);
      read_block(slot.v);
    }
    ckpt.optimizer = std::move(st);
  }
  return ckpt;
}

}  // namespace micl
