#include "micl/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ostream>
#include <set>

#include "micl/error.hpp"
#include "micl/synthetic.hpp"

namespace micl {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

Json default_config() {
  TrainConfig train;
  Json train_json = train.to_json();
  // K and the seed come from mining.k and the global seed; pairs default to
  // the retrieval pairs.
  train_json.erase("k");
  train_json["seed"] = nullptr;
  train_json["pairs"] = nullptr;
  return {
      {"workdir", "run"},
      {"seed", 7},
      {"task", "captioning"},
      {"corpus", {{"memory", nullptr}, {"queries", nullptr}, {"latent", nullptr}}},
      {"retrieval", {{"mode", "qimit"}, {"pairs", nullptr}, {"shortlist_n", 50}, {"threads", 1}}},
      {"scoring",
       {{"scorer", "synthetic"},
        {"endpoint", nullptr},
        {"batch_size", 16},
        {"max_in_flight", 4},
        {"max_attempts", 3},
        {"initial_backoff_ms", 200},
        {"timeout_s", 300}}},
      {"mining", {{"k", 5}}},
      {"train", std::move(train_json)},
      {"eval",
       {{"modes", {"qimi", "qimit", "msier"}},
        {"shot_counts", {4, 8, 16, 32}},
        {"order", "ascending"},
        {"mmices_n_visual", 50},
        {"mask_rate", nullptr},
        {"permutations", false}}},
  };
}

void apply_override(Json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(ErrorCode::kConfig, "override '" + assignment + "' is not key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  Json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (part.empty()) throw Error(ErrorCode::kConfig, "empty segment in key '" + key + "'");
    if (!node->is_object()) {
      throw Error(ErrorCode::kConfig, "override '" + key + "' descends into a non-object");
    }
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = Json::object();
    start = dot + 1;
  }
}

Json load_config(const fs::path& path, const std::vector<std::string>& overrides) {
  Json user;
  try {
    user = Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw Error(ErrorCode::kConfig, path.string() + ": " + e.what());
  }
  if (!user.is_object()) throw Error(ErrorCode::kConfig, path.string() + ": not a JSON object");
  Json config = default_config();
  config.merge_patch(user);
  // merge_patch drops explicit nulls; defaults already carry them.
  for (const auto& o : overrides) apply_override(config, o);
  if (const char* env = std::getenv(kEndpointEnv); env && *env) {
    config["scoring"]["endpoint"] = env;
  }
  return config;
}

namespace {

fs::path resolve(const fs::path& base, const fs::path& p) {
  return p.is_absolute() ? p : base / p;
}

template <typename T>
T get(const Json& config, const std::string& dotted) {
  const Json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string part = dotted.substr(start, dot == std::string::npos ? dot : dot - start);
    if (!node->is_object() || !node->contains(part)) {
      throw Error(ErrorCode::kConfig, "missing config key '" + dotted + "'");
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  try {
    return node->get<T>();
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kConfig, "config key '" + dotted + "': " + e.what());
  }
}

bool is_null(const Json& config, const std::string& section, const std::string& key) {
  return !config.contains(section) || !config[section].contains(key) || config[section][key].is_null();
}

std::vector<PairWeight> parse_pairs(const Json& j, const std::string& key) {
  std::vector<PairWeight> out;
  if (!j.is_array()) throw Error(ErrorCode::kConfig, "'" + key + "' must be an array");
  try {
    for (const auto& p : j) {
      out.push_back({parse_modality(p.at("query").get<std::string>()),
                     parse_modality(p.at("memory").get<std::string>()), p.value("weight", 1.0)});
    }
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kConfig, "'" + key + "': " + e.what());
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfig, "'" + key + "': " + e.what());
  }
  return out;
}

const std::set<std::string>& known_modes() {
  static const std::set<std::string> modes = {"qimi", "qtmt", "qimit", "mmices", "msier"};
  return modes;
}

}  // namespace

PipelineConfig PipelineConfig::from_json(const Json& config, const fs::path& base_dir) {
  PipelineConfig out;
  out.raw = config;
  out.base_dir = base_dir;
  out.workdir = resolve(base_dir, get<std::string>(config, "workdir"));
  out.seed = get<std::uint64_t>(config, "seed");
  try {
    out.task = parse_task(get<std::string>(config, "task"));
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfig, std::string("task: ") + e.what());
  }
  if (is_null(config, "corpus", "memory") || is_null(config, "corpus", "queries")) {
    throw Error(ErrorCode::kConfig, "corpus.memory and corpus.queries are required");
  }
  out.memory_manifest = resolve(base_dir, get<std::string>(config, "corpus.memory"));
  out.query_manifest = resolve(base_dir, get<std::string>(config, "corpus.queries"));
  if (!is_null(config, "corpus", "latent")) {
    out.latent = resolve(base_dir, get<std::string>(config, "corpus.latent"));
  }

  if (!is_null(config, "retrieval", "pairs")) {
    out.retrieval = SimilarityConfig::custom(parse_pairs(config["retrieval"]["pairs"], "retrieval.pairs"));
  } else {
    const auto mode = get<std::string>(config, "retrieval.mode");
    if (mode == "mmices" || mode == "msier") {
      throw Error(ErrorCode::kConfig, "retrieval.mode must be a fused mode, not '" + mode + "'");
    }
    try {
      out.retrieval = mode == "vqa_default" ? SimilarityConfig::vqa_default()
                          : SimilarityConfig::from_mode(parse_similarity_mode(mode));
    } catch (const Error& e) {
      throw Error(ErrorCode::kConfig, std::string("retrieval.mode: ") + e.what());
    }
  }
  out.shortlist_n = get<std::size_t>(config, "retrieval.shortlist_n");
  out.threads = get<unsigned>(config, "retrieval.threads");

  out.scorer = get<std::string>(config, "scoring.scorer");
  if (!is_null(config, "scoring", "endpoint")) out.endpoint = get<std::string>(config, "scoring.endpoint");
  out.http.batch_size = get<std::size_t>(config, "scoring.batch_size");
  out.http.max_in_flight = get<unsigned>(config, "scoring.max_in_flight");
  out.http.max_attempts = get<int>(config, "scoring.max_attempts");
  out.http.initial_backoff = std::chrono::milliseconds(get<long>(config, "scoring.initial_backoff_ms"));
  out.http.timeout = std::chrono::seconds(get<long>(config, "scoring.timeout_s"));

  Json train = config.contains("train") ? config["train"] : Json::object();
  const bool explicit_pairs = train.contains("pairs") && !train["pairs"].is_null();
  const bool explicit_seed = train.contains("seed") && !train["seed"].is_null();
  if (!explicit_pairs) train.erase("pairs");
  if (!explicit_seed) train.erase("seed");
  out.train = TrainConfig::from_json(train);
  if (!explicit_pairs) out.train.pairs = out.retrieval.pairs;
  if (!explicit_seed) out.train.seed = out.seed;
  out.train.k = get<std::size_t>(config, "mining.k");

  out.eval.modes = get<std::vector<std::string>>(config, "eval.modes");
  out.eval.shot_counts = get<std::vector<std::size_t>>(config, "eval.shot_counts");
  try {
    out.eval.order = parse_order_policy(get<std::string>(config, "eval.order"));
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfig, std::string("eval.order: ") + e.what());
  }
  out.eval.mmices_n_visual = get<std::size_t>(config, "eval.mmices_n_visual");
  if (!is_null(config, "eval", "mask_rate")) out.eval.mask_rate = get<double>(config, "eval.mask_rate");
  out.eval.permutations = get<bool>(config, "eval.permutations");
  return out;
}

std::vector<ConfigDiagnostic> validate_config(const Json& config, const fs::path& base_dir) {
  using Severity = ConfigDiagnostic::Severity;
  std::vector<ConfigDiagnostic> out;
  auto error = [&](std::string key, std::string msg) {
    out.push_back({Severity::kError, std::move(key), std::move(msg)});
  };
  PipelineConfig cfg;
  try {
    cfg = PipelineConfig::from_json(config, base_dir);
  } catch (const Error& e) {
    error("", e.what());
    return out;
  }
  for (const auto& [key, p] : {std::pair<std::string, fs::path>{"corpus.memory", cfg.memory_manifest},
                               {"corpus.queries", cfg.query_manifest}}) {
    if (!fs::exists(p)) error(key, "file not found: " + p.string());
  }
  if (cfg.train.k == 0) error("mining.k", "K must be at least 1");
  if (cfg.shortlist_n == 0) error("retrieval.shortlist_n", "shortlist N must be at least 1");
  if (cfg.train.k > 0 && cfg.shortlist_n < 2 * cfg.train.k) {
    out.push_back({Severity::kWarning, "retrieval.shortlist_n",
                   "N = " + std::to_string(cfg.shortlist_n) + " < 2K = " +
                       std::to_string(2 * cfg.train.k) +
                       ": positive and negative sets may overlap"});
  }
  if (cfg.train.k > 0) {
    try {
      validate(cfg.train);
    } catch (const Error& e) {
      error("train", e.what());
    }
  }
  if (cfg.scorer == "synthetic") {
    if (!cfg.latent) {
      error("corpus.latent", "the synthetic scorer needs a latent matrix");
    } else if (!fs::exists(*cfg.latent)) {
      error("corpus.latent", "file not found: " + cfg.latent->string());
    }
  } else if (cfg.scorer == "http") {
    if (cfg.endpoint.empty()) {
      error("scoring.endpoint", std::string("http scorer needs an endpoint (or ") + kEndpointEnv + ")");
    }
  } else {
    error("scoring.scorer", "unknown scorer '" + cfg.scorer + "' (synthetic or http)");
  }
  if (cfg.http.batch_size == 0) error("scoring.batch_size", "must be at least 1");
  if (cfg.http.max_in_flight == 0) error("scoring.max_in_flight", "must be at least 1");
  if (cfg.eval.modes.empty()) error("eval.modes", "no retriever modes");
  for (const auto& m : cfg.eval.modes) {
    if (!known_modes().count(m)) error("eval.modes", "unknown mode '" + m + "'");
    if (m == "qtmt" && cfg.task == Task::kCaptioning) {
      error("eval.modes", "qtmt needs query text, which captioning queries do not expose");
    }
  }
  if (cfg.eval.shot_counts.empty()) error("eval.shot_counts", "no shot counts");
  if (cfg.eval.mask_rate) {
    if (!(*cfg.eval.mask_rate >= 0.0 && *cfg.eval.mask_rate <= 1.0)) {
      error("eval.mask_rate", "must be in [0, 1]");
    }
    if (cfg.task != Task::kCaptioning) error("eval.mask_rate", "caption masking needs the captioning task");
  }
  if (cfg.threads == 0) error("retrieval.threads", "must be at least 1");
  return out;
}

// ---------------------------------------------------------------- stages

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::kIngest: return "ingest";
    case Stage::kRetrieve: return "retrieve";
    case Stage::kScore: return "score";
    case Stage::kMine: return "mine";
    case Stage::kTrain: return "train";
    case Stage::kEval: return "eval";
    case Stage::kReport: return "report";
  }
  return "ingest";
}

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> stages = {Stage::kIngest, Stage::kRetrieve, Stage::kScore,
                                            Stage::kMine,   Stage::kTrain,    Stage::kEval,
                                            Stage::kReport};
  return stages;
}

Stage parse_stage(std::string_view name) {
  for (Stage s : all_stages()) {
    if (to_string(s) == name) return s;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown stage '" + std::string(name) + "'");
}

namespace {

Json pairs_json(const std::vector<PairWeight>& pairs) {
  Json out = Json::array();
  for (const auto& p : pairs) {
    out.push_back({{"query", to_string(p.query)}, {"memory", to_string(p.memory)}, {"weight", p.weight}});
  }
  return out;
}

// The manifest plus whatever embedding files its head line references.
std::vector<fs::path> manifest_files(const fs::path& manifest) {
  std::vector<fs::path> out{manifest};
  if (!fs::exists(manifest)) return out;
  const auto rows = read_jsonl(manifest);
  if (rows.empty()) return out;
  for (const char* key : {"image_embeddings", "text_embeddings"}) {
    if (rows.front().contains(key) && rows.front()[key].is_string()) {
      out.push_back(manifest.parent_path() / rows.front()[key].get<std::string>());
    }
  }
  return out;
}

}  // namespace

struct Pipeline::Plan {
  Json config;
  /// (path, producing stage or empty for external inputs)
  std::vector<std::pair<fs::path, std::string>> inputs;
  std::vector<fs::path> outputs;
};

Pipeline::Pipeline(PipelineConfig config, bool force, std::ostream& log)
    : config_(std::move(config)), force_(force), log_(log) {
  fs::create_directories(config_.workdir);
  lock_path_ = config_.workdir / kLockFile;
  const int fd = ::open(lock_path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    std::string holder;
    try {
      holder = read_file(lock_path_);
    } catch (const Error&) {
    }
    lock_path_.clear();
    throw Error(ErrorCode::kLocked, "work directory " + config_.workdir.string() +
                                        " is locked by another run " + holder +
                                        "; remove " + kLockFile + " if that run is gone");
  }
  const auto now = std::chrono::duration_cast<std::chrono::seconds>(
                       std::chrono::system_clock::now().time_since_epoch())
                       .count();
  const std::string body = Json{{"pid", ::getpid()}, {"started", now}}.dump() + "\n";
  [[maybe_unused]] auto written = ::write(fd, body.data(), body.size());
  ::close(fd);
}

Pipeline::~Pipeline() {
  if (!lock_path_.empty()) {
    std::error_code ec;
    fs::remove(lock_path_, ec);
  }
}

Pipeline::Plan Pipeline::plan(Stage stage) const {
  Plan p;
  const Json& raw = config_.raw;
  const fs::path mem = artifacts::kMemory;
  const fs::path qry = artifacts::kQueries;
  auto add_corpus = [&](const fs::path& rel) {
    for (const auto& f : manifest_files(path(rel / "manifest.jsonl"))) {
      p.inputs.emplace_back(rel / f.filename(), "ingest");
    }
  };
  switch (stage) {
    case Stage::kIngest:
      p.config = {{"corpus", {{"memory", config_.memory_manifest.string()},
                              {"queries", config_.query_manifest.string()}}},
                  {"task", raw["task"]}};
      for (const auto& f : manifest_files(config_.memory_manifest)) p.inputs.emplace_back(f, "");
      for (const auto& f : manifest_files(config_.query_manifest)) p.inputs.emplace_back(f, "");
      for (const auto& rel : {mem, qry}) {
        for (const char* f : {"manifest.jsonl", "image.micl", "text.micl"}) p.outputs.push_back(rel / f);
      }
      break;
    case Stage::kRetrieve:
      p.config = {{"pairs", pairs_json(config_.retrieval.pairs)}, {"shortlist_n", config_.shortlist_n}};
      add_corpus(mem);
      p.outputs = {artifacts::kShortlists};
      break;
    case Stage::kScore:
      p.config = {{"scorer", config_.scorer}, {"task", raw["task"]}};
      add_corpus(mem);
      p.inputs.emplace_back(artifacts::kShortlists, "retrieve");
      if (config_.scorer == "synthetic" && config_.latent) p.inputs.emplace_back(*config_.latent, "");
      p.outputs = {artifacts::kScores};
      break;
    case Stage::kMine:
      p.config = {{"k", config_.train.k}};
      p.inputs.emplace_back(artifacts::kScores, "score");
      p.outputs = {artifacts::kMining};
      break;
    case Stage::kTrain:
      p.config = config_.train.to_json();
      // Scores first so a missing scoring run is reported as such.
      p.inputs.emplace_back(artifacts::kScores, "score");
      p.inputs.emplace_back(artifacts::kMining, "mine");
      add_corpus(mem);
      p.outputs = {artifacts::kCheckpoint, artifacts::kTrainLog};
      break;
    case Stage::kEval: {
      p.config = {{"eval", raw["eval"]},
                  {"task", raw["task"]},
                  {"seed", config_.seed},
                  {"scorer", config_.scorer},
                  {"train_pairs", pairs_json(config_.train.pairs)}};
      add_corpus(mem);
      add_corpus(qry);
      const auto& modes = config_.eval.modes;
      if (std::find(modes.begin(), modes.end(), "msier") != modes.end()) {
        p.inputs.emplace_back(artifacts::kCheckpoint, "train");
      }
      if (config_.scorer == "synthetic" && config_.latent) p.inputs.emplace_back(*config_.latent, "");
      p.outputs = {artifacts::kEval};
      break;
    }
    case Stage::kReport:
      p.config = {{"modes", config_.eval.modes}, {"shot_counts", config_.eval.shot_counts}};
      p.inputs.emplace_back(artifacts::kEval, "eval");
      p.outputs = {artifacts::kReportJson, artifacts::kReportText};
      break;
  }
  p.config["stage"] = to_string(stage);
  p.config["seed"] = config_.seed;
  return p;
}

StageOutcome Pipeline::run(Stage stage) {
  const std::string name(to_string(stage));
  const Plan p = plan(stage);
  const std::string config_hash = json_hash(p.config);

  auto full = [&](const fs::path& f) { return f.is_absolute() ? f : path(f); };
  // Workdir-relative keys keep provenance portable across checkouts.
  auto key = [&](const fs::path& f) {
    return f.is_absolute() ? fs::relative(f, config_.workdir).generic_string() : f.generic_string();
  };

  Json inputs = Json::object();
  for (const auto& [f, producer] : p.inputs) {
    if (!fs::exists(full(f))) {
      if (producer.empty()) {
        throw Error(ErrorCode::kStageInputMissing,
                    "stage '" + name + "': input " + full(f).string() + " does not exist");
      }
      throw Error(ErrorCode::kStageInputMissing,
                  "stage '" + name + "': missing " + f.generic_string() + ", produced by the '" +
                      producer + "' stage; run `micl run " + producer + "` first");
    }
    inputs[key(f)] = file_sha256(full(f));
  }

  const fs::path meta_path = path(name + ".meta.json");
  bool any_output = false;
  for (const auto& f : p.outputs) any_output = any_output || fs::exists(full(f));
  if (fs::exists(meta_path)) {
    const Json meta = Json::parse(read_file(meta_path), nullptr, false);
    bool intact = meta.is_object() && meta.value("config_hash", "") == config_hash &&
                  meta.contains("inputs") && meta["inputs"] == inputs && meta.contains("outputs");
    if (intact) {
      for (const auto& [f, sha] : meta["outputs"].items()) {
        const fs::path file = path(f);
        if (!fs::exists(file) || file_sha256(file) != sha.get<std::string>()) intact = false;
      }
    }
    if (intact) {
      log_ << "[" << name << "] up to date, skipped\n";
      return {stage, true, "up to date"};
    }
    any_output = true;
  }
  if (any_output && !force_) {
    throw Error(ErrorCode::kStaleArtifact,
                "stage '" + name + "': existing artifacts in " + config_.workdir.string() +
                    " were produced from a different config or inputs; refusing to reuse or "
                    "overwrite them (rerun with --force to rebuild)");
  }

  log_ << "[" << name << "] running\n";
  try {
    execute(stage);
  } catch (const Error& e) {
    throw Error(e.code(), "stage '" + name + "': " + e.what());
  }

  Json outputs = Json::object();
  for (const auto& f : p.outputs) {
    if (fs::exists(full(f))) outputs[key(f)] = file_sha256(full(f));
  }
  if (stage == Stage::kEval && fs::exists(path(artifacts::kPredictions))) {
    std::vector<fs::path> extra;
    for (const auto& e : fs::directory_iterator(path(artifacts::kPredictions))) extra.push_back(e.path());
    std::sort(extra.begin(), extra.end());
    for (const auto& f : extra) outputs[key(f)] = file_sha256(f);
  }
  const Json meta = {{"stage", name},
                     {"config_hash", config_hash},
                     {"seed", config_.seed},
                     {"inputs", std::move(inputs)},
                     {"outputs", std::move(outputs)}};
  atomic_write(meta_path, meta.dump(2) + "\n");
  return {stage, false, "done"};
}

std::vector<StageOutcome> Pipeline::run_all() {
  std::vector<StageOutcome> out;
  for (Stage s : all_stages()) out.push_back(run(s));
  return out;
}

void Pipeline::execute(Stage stage) {
  switch (stage) {
    case Stage::kIngest: return ingest();
    case Stage::kRetrieve: return retrieve();
    case Stage::kScore: return score();
    case Stage::kMine: return mine();
    case Stage::kTrain: return train();
    case Stage::kEval: return evaluate();
    case Stage::kReport: return report();
  }
}

void Pipeline::ingest() {
  Corpus memory = normalize_corpus(ingest_manifest(config_.memory_manifest));
  Corpus queries = normalize_corpus(ingest_manifest(config_.query_manifest));
  for (const Corpus* c : {&memory, &queries}) {
    for (const auto& r : c->records) {
      if (r.task != config_.task) {
        throw Error(ErrorCode::kConfig, "record '" + r.id + "' has task " +
                                            std::string(to_string(r.task)) + ", config says " +
                                            std::string(to_string(config_.task)));
      }
    }
  }
  auto dim = [](const Corpus& c) -> std::optional<std::size_t> {
    if (c.image_embeddings) return c.image_embeddings->dim();
    if (c.text_embeddings) return c.text_embeddings->dim();
    return std::nullopt;
  };
  if (dim(memory) && dim(queries) && *dim(memory) != *dim(queries)) {
    throw Error(ErrorCode::kDimensionMismatch, "memory and query embeddings differ in dimension");
  }
  persist_corpus(memory, path(artifacts::kMemory));
  persist_corpus(queries, path(artifacts::kQueries));
  log_ << "[ingest] " << memory.records.size() << " memory, " << queries.records.size()
       << " queries\n";
}

void Pipeline::retrieve() {
  const Corpus memory = load_corpus(path(artifacts::kMemory));
  auto result = shortlist_candidates(memory, config_.retrieval, config_.shortlist_n, config_.threads);
  for (const auto& w : result.warnings) log_ << "[retrieve] warning: " << w << "\n";
  write_retrievals(path(artifacts::kShortlists), result.shortlists);
}

namespace {

std::unique_ptr<Scorer> make_scorer(const PipelineConfig& cfg) {
  if (cfg.scorer == "synthetic") {
    if (!cfg.latent) throw Error(ErrorCode::kConfig, "synthetic scorer needs corpus.latent");
    return std::make_unique<SyntheticScorer>(read_embeddings(*cfg.latent));
  }
  if (cfg.endpoint.empty()) throw Error(ErrorCode::kConfig, "http scorer needs scoring.endpoint");
  return std::make_unique<HttpScorer>(cfg.endpoint, cfg.http);
}

std::unique_ptr<Generator> make_generator(const PipelineConfig& cfg) {
  if (cfg.scorer == "synthetic") {
    if (!cfg.latent) throw Error(ErrorCode::kConfig, "synthetic generator needs corpus.latent");
    return std::make_unique<SyntheticGenerator>(read_embeddings(*cfg.latent));
  }
  if (cfg.endpoint.empty()) throw Error(ErrorCode::kConfig, "http generator needs scoring.endpoint");
  return std::make_unique<HttpGenerator>(cfg.endpoint, cfg.http);
}

}  // namespace

void Pipeline::score() {
  const Corpus memory = load_corpus(path(artifacts::kMemory));
  ScoringJob job{&memory, &memory, read_retrievals(path(artifacts::kShortlists))};
  auto scorer = make_scorer(config_);
  // One cache per scorer identity so switching backends never reuses scores.
  fs::path cache = path(artifacts::kScoreCache);
  cache.replace_filename("scores_" + sha256_hex(scorer->name()).substr(0, 12) + ".jsonl");
  const auto scores = score_candidates(job, *scorer, cache);
  write_scores(path(artifacts::kScores), scores);
  log_ << "[score] " << scores.size() << " pairs via " << scorer->name() << "\n";
  if (auto* http = dynamic_cast<HttpScorer*>(scorer.get()); http && http->reduction() == "sum") {
    log_ << "[score] scorer reported sum-reduced NLL; normalized by token count\n";
  }
}

void Pipeline::mine() {
  const auto scores = read_scores(path(artifacts::kScores));
  write_mining(path(artifacts::kMining), mine_all(scores, config_.train.k));
}

void Pipeline::train() {
  const Corpus memory = load_corpus(path(artifacts::kMemory));
  const auto mining = read_mining(path(artifacts::kMining));
  validate(config_.train);
  auto result = micl::train(memory, mining, config_.train);
  for (const auto& d : result.diagnostics) log_ << "[train] " << d << "\n";
  Checkpoint ckpt{result.adapter, result.optimizer, config_.train.hash(), memory.metadata};
  save_checkpoint(ckpt, path(artifacts::kCheckpoint));
  write_train_log(path(artifacts::kTrainLog), result.log);
  if (!result.epoch_mean_loss.empty()) {
    log_ << "[train] " << result.total_steps << " steps, epoch loss "
         << result.epoch_mean_loss.front() << " -> " << result.epoch_mean_loss.back() << "\n";
  }
}

void Pipeline::evaluate() {
  const Corpus memory = load_corpus(path(artifacts::kMemory));
  const Corpus queries = load_corpus(path(artifacts::kQueries));
  auto generator = make_generator(config_);
  const auto& spec = config_.eval;

  std::shared_ptr<const ProjectionAdapter> adapter;
  std::string checkpoint_sha;
  if (std::find(spec.modes.begin(), spec.modes.end(), "msier") != spec.modes.end()) {
    adapter = std::make_shared<const ProjectionAdapter>(
        load_checkpoint(path(artifacts::kCheckpoint)).adapter);
    checkpoint_sha = file_sha256(path(artifacts::kCheckpoint));
  }

  std::size_t depth = 0;
  for (std::size_t s : spec.shot_counts) depth = std::max(depth, s);
  if (spec.permutations) depth = std::max<std::size_t>(depth, 3);

  auto retrieve_all = [&](const std::string& mode) {
    if (mode == "mmices") {
      std::vector<RetrievalResult> out;
      for (const auto& q : queries.records) {
        out.push_back(mmices_retrieve(q, queries, memory, std::max(spec.mmices_n_visual, depth),
                                      depth, nullptr, {false, 1}));
      }
      return out;
    }
    SimilarityConfig cfg = mode == "msier" ? SimilarityConfig::custom(config_.train.pairs).with_adapter(adapter)
                                           : SimilarityConfig::from_mode(parse_similarity_mode(mode));
    return Retriever(memory, cfg).topk_all(queries, depth, {false, config_.threads});
  };

  std::vector<Diagnostic> diagnostics;
  auto run_prompts = [&](const std::vector<PromptSet>& prompts, const fs::path& file) {
    std::vector<PredictionRecord> preds;
    if (config_.task == Task::kRankClassification) {
      const auto scores = generator->class_scores(prompts);
      for (std::size_t i = 0; i < prompts.size(); ++i) preds.push_back({prompts[i].query_id, scores[i]});
    } else {
      const auto texts = generator->generate(prompts);
      for (std::size_t i = 0; i < prompts.size(); ++i) preds.push_back({prompts[i].query_id, texts[i]});
    }
    write_predictions(path(artifacts::kPredictions / file), preds);
    return evaluate_predictions(config_.task, queries, preds);
  };

  Json cells = Json::object();
  Json masked = Json::object();
  Json perms = Json::object();
  for (const auto& mode : spec.modes) {
    const auto retrieved = retrieve_all(mode);
    for (std::size_t s : spec.shot_counts) {
      std::vector<PromptSet> prompts;
      for (std::size_t i = 0; i < queries.records.size(); ++i) {
        prompts.push_back(assemble_prompt_set(queries.records[i], retrieved[i], memory, s,
                                              spec.order, config_.seed, &diagnostics));
      }
      const std::string tag = mode + "_" + std::to_string(s);
      cells[mode][std::to_string(s)] = run_prompts(prompts, tag + ".jsonl");
      if (spec.mask_rate) {
        for (auto& p : prompts) p = mask_ablation(p, *spec.mask_rate, config_.seed);
        masked[mode][std::to_string(s)] = run_prompts(prompts, tag + "_masked.jsonl");
      }
    }
    if (spec.permutations) {
      std::vector<PromptSet> base;
      for (std::size_t i = 0; i < queries.records.size(); ++i) {
        base.push_back(assemble_prompt_set(queries.records[i], retrieved[i], memory, 3,
                                           OrderPolicy::kDescending, config_.seed, &diagnostics));
        if (base.back().shots.size() != 3) {
          throw Error(ErrorCode::kInvalidArgument, "permutation study needs 3 shots per query");
        }
      }
      const auto study = permutation_study([&](const std::array<std::size_t, 3>& order) {
        std::vector<PromptSet> prompts;
        for (const auto& p : base) prompts.push_back(permute_shots(p, order));
        const std::string tag = mode + "_perm" + std::to_string(order[0]) +
                                std::to_string(order[1]) + std::to_string(order[2]);
        return run_prompts(prompts, tag + ".jsonl");
      });
      perms[mode] = {{"orders", study.orders},
                     {"per_order", study.per_order},
                     {"mean", study.mean},
                     {"std", study.stddev}};
    }
  }

  Json diag = Json::array();
  for (const auto& d : diagnostics) diag.push_back(d.record_id + ": " + d.reason);
  Json out = {{"task", to_string(config_.task)},
              {"metric", metric_name(config_.task)},
              {"modes", spec.modes},
              {"shot_counts", spec.shot_counts},
              {"order", to_string(spec.order)},
              {"generator", generator->name()},
              {"seed", config_.seed},
              {"checkpoint_sha256", checkpoint_sha},
              {"cells", std::move(cells)},
              {"diagnostics", std::move(diag)}};
  if (spec.mask_rate) {
    out["mask_rate"] = *spec.mask_rate;
    out["masked"] = std::move(masked);
  }
  if (spec.permutations) out["permutations"] = std::move(perms);
  atomic_write(path(artifacts::kEval), out.dump(2) + "\n");
}

void Pipeline::report() {
  const Json ev = Json::parse(read_file(path(artifacts::kEval)));
  auto to_cells = [](const Json& j) {
    std::map<std::string, std::map<std::size_t, double>> cells;
    for (const auto& [mode, row] : j.items()) {
      for (const auto& [shots, v] : row.items()) cells[mode][std::stoul(shots)] = v.get<double>();
    }
    return cells;
  };
  const auto task = parse_task(ev.at("task").get<std::string>());
  const Json metadata = {{"seed", ev.at("seed")},
                         {"order", ev.at("order")},
                         {"generator", ev.at("generator")},
                         {"checkpoint_sha256", ev.at("checkpoint_sha256")},
                         {"eval_sha256", file_sha256(path(artifacts::kEval))}};
  const auto report = shot_sweep_report(task, config_.eval.modes, config_.eval.shot_counts,
                                        to_cells(ev.at("cells")), metadata);
  Json json = to_json(report);
  std::string text = render_table(report);
  if (ev.contains("masked")) {
    auto masked = shot_sweep_report(task, config_.eval.modes, config_.eval.shot_counts,
                                    to_cells(ev["masked"]), metadata);
    json["masked"] = to_json(masked);
    text += "\nmasked captions (rate " + ev["mask_rate"].dump() + ")\n" + render_table(masked);
  }
  if (ev.contains("permutations")) {
    json["permutations"] = ev["permutations"];
    text += "\n3-shot order permutations\n";
    for (const auto& [mode, p] : ev["permutations"].items()) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "%s  mean %.2f  std %.2f\n", mode.c_str(),
                    p["mean"].get<double>(), p["std"].get<double>());
      text += buf;
    }
  }
  for (const auto& d : report.diagnostics) log_ << "[report] " << d << "\n";
  atomic_write(path(artifacts::kReportJson), json.dump(2) + "\n");
  atomic_write(path(artifacts::kReportText), text);
  log_ << text;
}

// ---------------------------------------------------------------- fixture

void make_fixture(const fs::path& dir, const SyntheticSpec& spec, const Json& config_patch) {
  const auto data = make_synthetic(spec);
  write_synthetic(data, dir);
  Json config = {{"workdir", "run"},
                 {"seed", spec.seed},
                 {"task", to_string(spec.task)},
                 {"corpus",
                  {{"memory", "memory/manifest.jsonl"},
                   {"queries", "queries/manifest.jsonl"},
                   {"latent", "latent.micl"}}}};
  config.merge_patch(config_patch);
  atomic_write(dir / "config.json", config.dump(2) + "\n");
}

}  // namespace micl
