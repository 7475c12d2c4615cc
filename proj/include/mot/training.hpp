#pragma once

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mot/analysis.hpp"
#include "mot/model.hpp"
#include "mot/mot_layer.hpp"
#include "mot/random.hpp"
#include "mot/tensor.hpp"

namespace mot {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
  ModelConfig model;
  std::optional<MoTConfig> mot;
  std::size_t steps = 1000;
  std::size_t batch_size = 16;
  std::size_t context_length = 64;
  double peak_lr = 2e-3;
  double warmup_fraction = 0.01;
  double final_lr_fraction = 0.1;
  std::uint64_t seed = 0;
  std::string data_path;
  std::string out_dir = "run";
  std::size_t log_every = 10;
  std::size_t eval_every = 0;  // 0: checkpoint only at the end

  void validate() const {
    model.validate();
    if (mot) mot->validate();
    if (model.ff_kind != FeedForwardKind::dense && !mot) {
      throw ConfigError("mot: required when model.ff_kind is " + to_string(model.ff_kind));
    }
    if (steps == 0) throw ConfigError("steps: must be positive");
    if (batch_size == 0) throw ConfigError("batch_size: must be positive");
    if (context_length == 0 || context_length > model.context_length) {
      throw ConfigError("context_length: must be in [1, model.context_length]");
    }
    if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
      throw ConfigError("warmup_fraction: must lie in (0, 1)");
    }
    if (!(final_lr_fraction > 0.0 && final_lr_fraction <= 1.0)) {
      throw ConfigError("final_lr_fraction: must lie in (0, 1]");
    }
    if (!(peak_lr > 0.0)) throw ConfigError("peak_lr: must be positive");
    if (log_every == 0) throw ConfigError("log_every: must be positive");
    if (mot && model.ff_kind != FeedForwardKind::dense && batch_size % mot->group_size != 0) {
      throw ConfigError("batch_size: " + std::to_string(batch_size) +
                        " is not divisible by mot.group_size " + std::to_string(mot->group_size));
    }
  }
};

namespace detail {

class FieldReader {
 public:
  FieldReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where("") + "expected an object");
  }

  void reject_unknown(std::initializer_list<const char*> known) const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      bool ok = false;
      for (const char* k : known) ok = ok || it.key() == k;
      if (!ok) throw ConfigError(where(it.key()) + "unknown key");
    }
  }

  void read(const char* key, std::size_t& out) const {
    if (!obj_.contains(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_number_unsigned()) throw ConfigError(where(key) + "expected a non-negative integer");
    out = v.get<std::size_t>();
  }
  void read(const char* key, std::uint64_t& out, int) const {
    if (!obj_.contains(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_number_unsigned()) throw ConfigError(where(key) + "expected a non-negative integer");
    out = v.get<std::uint64_t>();
  }
  void read(const char* key, double& out) const {
    if (!obj_.contains(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_number()) throw ConfigError(where(key) + "expected a number");
    out = v.get<double>();
  }
  void read(const char* key, std::string& out) const {
    if (!obj_.contains(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_string()) throw ConfigError(where(key) + "expected a string");
    out = v.get<std::string>();
  }

  std::string where(const std::string& key) const {
    return "config field '" + (path_.empty() ? key : path_ + (key.empty() ? "" : "." + key)) + "': ";
  }

 private:
  const json& obj_;
  std::string path_;
};

}  // namespace detail

inline RunConfig run_config_from_json(const json& root) {
  RunConfig cfg;
  detail::FieldReader top(root, "");
  top.reject_unknown({"model", "mot", "steps", "batch_size", "context_length", "peak_lr",
                      "warmup_fraction", "final_lr_fraction", "seed", "data_path", "out_dir",
                      "log_every", "eval_every"});
  if (root.contains("model")) {
    detail::FieldReader m(root.at("model"), "model");
    m.reject_unknown({"n_blocks", "d_model", "d_ff", "n_heads", "vocab_size", "context_length",
                      "ff_kind"});
    m.read("n_blocks", cfg.model.n_blocks);
    m.read("d_model", cfg.model.d_model);
    m.read("d_ff", cfg.model.d_ff);
    m.read("n_heads", cfg.model.n_heads);
    m.read("vocab_size", cfg.model.vocab_size);
    m.read("context_length", cfg.model.context_length);
    std::string kind = to_string(cfg.model.ff_kind);
    m.read("ff_kind", kind);
    try {
      cfg.model.ff_kind = parse_ff_kind(kind);
    } catch (const ConfigError& e) {
      throw ConfigError(m.where("ff_kind") + e.what());
    }
  }
  if (root.contains("mot") && !root.at("mot").is_null()) {
    MoTConfig mc;
    detail::FieldReader m(root.at("mot"), "mot");
    m.reject_unknown({"n_experts", "expert_hidden", "group_size", "temperature_mode",
                      "init_temperature"});
    m.read("n_experts", mc.n_experts);
    m.read("expert_hidden", mc.expert_hidden);
    m.read("group_size", mc.group_size);
    std::string mode = to_string(mc.temperature_mode);
    m.read("temperature_mode", mode);
    try {
      mc.temperature_mode = parse_temperature_mode(mode);
    } catch (const ConfigError& e) {
      throw ConfigError(m.where("temperature_mode") + e.what());
    }
    m.read("init_temperature", mc.init_temperature);
    cfg.mot = mc;
  }
  top.read("steps", cfg.steps);
  top.read("batch_size", cfg.batch_size);
  top.read("context_length", cfg.context_length);
  top.read("peak_lr", cfg.peak_lr);
  top.read("warmup_fraction", cfg.warmup_fraction);
  top.read("final_lr_fraction", cfg.final_lr_fraction);
  top.read("seed", cfg.seed, 0);
  top.read("data_path", cfg.data_path);
  top.read("out_dir", cfg.out_dir);
  top.read("log_every", cfg.log_every);
  top.read("eval_every", cfg.eval_every);
  cfg.validate();
  return cfg;
}

inline RunConfig parse_run_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return run_config_from_json(root);
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

inline json to_json(const RunConfig& cfg) {
  json j;
  j["model"] = {{"n_blocks", cfg.model.n_blocks},
                {"d_model", cfg.model.d_model},
                {"d_ff", cfg.model.d_ff},
                {"n_heads", cfg.model.n_heads},
                {"vocab_size", cfg.model.vocab_size},
                {"context_length", cfg.model.context_length},
                {"ff_kind", to_string(cfg.model.ff_kind)}};
  if (cfg.mot) {
    j["mot"] = {{"n_experts", cfg.mot->n_experts},
                {"expert_hidden", cfg.mot->expert_hidden},
                {"group_size", cfg.mot->group_size},
                {"temperature_mode", to_string(cfg.mot->temperature_mode)},
                {"init_temperature", cfg.mot->init_temperature}};
  }
  j["steps"] = cfg.steps;
  j["batch_size"] = cfg.batch_size;
  j["context_length"] = cfg.context_length;
  j["peak_lr"] = cfg.peak_lr;
  j["warmup_fraction"] = cfg.warmup_fraction;
  j["final_lr_fraction"] = cfg.final_lr_fraction;
  j["seed"] = cfg.seed;
  j["data_path"] = cfg.data_path;
  j["out_dir"] = cfg.out_dir;
  j["log_every"] = cfg.log_every;
  j["eval_every"] = cfg.eval_every;
  return j;
}

// ---------------------------------------------------------------------------
// Data

inline std::vector<std::uint8_t> load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (bytes.empty()) throw IoError("corpus '" + path + "' is empty");
  return bytes;
}

/// `batch` windows of length + 1 bytes, row-major.
struct Batch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> windows;

  std::vector<std::int32_t> inputs() const {
    std::vector<std::int32_t> out(batch * length);
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(windows.begin() + b * (length + 1), length, out.begin() + b * length);
    return out;
  }
  std::vector<std::int32_t> targets() const {
    std::vector<std::int32_t> out(batch * length);
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(windows.begin() + b * (length + 1) + 1, length, out.begin() + b * length);
    return out;
  }
};

inline constexpr std::uint64_t kTrainStream = 0x7472;
inline constexpr std::uint64_t kEvalStream = 0x6576616c00000000ULL;

/// Uniform random windows, deterministic in (seed, step).
inline Batch make_batches(std::span<const std::uint8_t> bytes, std::size_t batch,
                          std::size_t length, std::uint64_t seed, std::uint64_t step,
                          std::uint64_t stream = kTrainStream) {
  if (bytes.size() <= length + 1) {
    throw ContractError("make_batches: corpus of " + std::to_string(bytes.size()) +
                        " bytes is too short for windows of " + std::to_string(length + 1));
  }
  Rng rng = make_rng(seed, stream + step);
  std::uniform_int_distribution<std::size_t> start(0, bytes.size() - (length + 1));
  Batch out{batch, length, std::vector<std::int32_t>(batch * (length + 1))};
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t s = start(rng);
    for (std::size_t i = 0; i <= length; ++i)
      out.windows[b * (length + 1) + i] = static_cast<std::int32_t>(bytes[s + i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

inline std::size_t warmup_steps(std::size_t total_steps, double warmup_fraction) {
  return std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(warmup_fraction * static_cast<double>(total_steps))));
}

/// Linear warmup to peak, then cosine decay to final_fraction * peak.
inline double lr_schedule(std::size_t step, std::size_t total_steps, double peak,
                          double warmup_fraction, double final_fraction) {
  const std::size_t warm = warmup_steps(total_steps, warmup_fraction);
  if (step < warm) return peak * static_cast<double>(step) / static_cast<double>(warm);
  if (total_steps <= warm) return peak;
  const double u = std::min(1.0, static_cast<double>(step - warm) /
                                     static_cast<double>(total_steps - warm));
  return peak * (final_fraction +
                 (1.0 - final_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * u)));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;
};

template <typename T>
struct OptimizerState {
  std::map<std::string, std::vector<T>> first_moment;
  std::map<std::string, std::vector<T>> second_moment;
  std::uint64_t step = 0;
};

/// Adam with bias correction after clipping the global gradient norm.
/// Returns the gradient norm before clipping.
template <typename T>
double optimizer_step(const std::map<std::string, Tensor<T>>& params, OptimizerState<T>& state,
                      double lr, const AdamConfig& adam = {}) {
  double sq = 0.0;
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + name + "'");
      sq += static_cast<double>(g) * g;
    }
  }
  const double norm = std::sqrt(sq);
  const double clip = norm > adam.clip_norm ? adam.clip_norm / norm : 1.0;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(adam.beta1, t);
  const double c2 = 1.0 - std::pow(adam.beta2, t);
  const T b1 = static_cast<T>(adam.beta1), b2 = static_cast<T>(adam.beta2);
  const T step_size = static_cast<T>(lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(adam.eps);
  const T clip_t = static_cast<T>(clip);
  for (const auto& [name, p] : params) {
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.empty()) {
      m.assign(p.numel(), T(0));
      v.assign(p.numel(), T(0));
    }
    if (m.size() != p.numel()) {
      throw ContractError("optimizer state for '" + name + "' does not match its parameter");
    }
    auto handle = p;
    auto data = handle.mutable_data();
    const bool has = p.has_grad();
    const auto grad = p.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T g = has ? grad[i] * clip_t : T(0);
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      data[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: a text header terminated by a line "end", then raw little-endian
// float32 values for every manifest entry, in manifest order.
//
//   MOTCKPT 1
//   config <single-line JSON RunConfig>
//   step <completed steps>
//   tensors <count>
//   <name> <rank> <d0> ... <d_rank-1> <byte offset>
//   ...
//   end

struct CheckpointTensor {
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  RunConfig config;
  std::uint64_t step = 0;
  std::map<std::string, CheckpointTensor> tensors;  // sorted names
};

inline constexpr const char* kCheckpointMagic = "MOTCKPT";
inline constexpr int kCheckpointVersion = 1;

inline void write_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ostringstream header;
  header << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  header << "config " << to_json(ck.config).dump() << '\n';
  header << "step " << ck.step << '\n';
  header << "tensors " << ck.tensors.size() << '\n';
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    header << name << ' ' << t.shape.size();
    for (auto d : t.shape) header << ' ' << d;
    header << ' ' << offset << '\n';
    offset += t.values.size() * sizeof(float);
  }
  header << "end\n";
  const auto tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + path + "'");
    const auto h = header.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [name, t] : ck.tensors) {
      for (float v : t.values) {
        auto bits = std::bit_cast<std::uint32_t>(v);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
        char buf[4];
        std::memcpy(buf, &bits, 4);
        out.write(buf, 4);
      }
    }
    if (!out) throw IoError("failed writing checkpoint '" + path + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  auto next_line = [&](const char* field) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError("checkpoint truncated before '" + std::string(field) + "'");
    return line;
  };
  auto expect_prefix = [](const std::string& line, const std::string& key) {
    if (line.rfind(key + ' ', 0) != 0) throw FormatError("checkpoint: expected field '" + key + "'");
    return line.substr(key.size() + 1);
  };
  Checkpoint ck;
  {
    std::istringstream magic(next_line("magic"));
    std::string word;
    int version = 0;
    if (!(magic >> word >> version) || word != kCheckpointMagic) {
      throw FormatError("checkpoint: bad magic, not a checkpoint file");
    }
    if (version != kCheckpointVersion) {
      throw FormatError("checkpoint: unsupported format version " + std::to_string(version));
    }
  }
  try {
    ck.config = run_config_from_json(json::parse(expect_prefix(next_line("config"), "config")));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed field 'config': ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: invalid field 'config': ") + e.what());
  }
  auto parse_count = [](const std::string& s, const char* field) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(s, &pos);
    } catch (const std::exception&) {
      throw FormatError(std::string("checkpoint: malformed field '") + field + "'");
    }
    if (pos != s.size()) throw FormatError(std::string("checkpoint: malformed field '") + field + "'");
    return static_cast<std::uint64_t>(v);
  };
  ck.step = parse_count(expect_prefix(next_line("step"), "step"), "step");
  const auto count = parse_count(expect_prefix(next_line("tensors"), "tensors"), "tensors");
  std::vector<std::pair<std::string, std::uint64_t>> order;
  std::uint64_t expected_offset = 0;
  std::string previous;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::istringstream row(next_line("manifest"));
    std::string name;
    std::size_t rank = 0;
    if (!(row >> name >> rank) || rank == 0 || rank > 8) {
      throw FormatError("checkpoint: malformed manifest entry " + std::to_string(i));
    }
    if (!previous.empty() && !(previous < name)) {
      throw FormatError("checkpoint: manifest not sorted at '" + name + "'");
    }
    previous = name;
    CheckpointTensor t;
    t.shape.resize(rank);
    for (auto& d : t.shape) {
      if (!(row >> d) || d == 0) throw FormatError("checkpoint: bad shape for '" + name + "'");
    }
    std::uint64_t offset = 0;
    if (!(row >> offset) || offset != expected_offset) {
      throw FormatError("checkpoint: bad byte offset for '" + name + "'");
    }
    expected_offset += shape_numel(t.shape) * sizeof(float);
    t.values.resize(shape_numel(t.shape));
    ck.tensors.emplace(name, std::move(t));
    order.emplace_back(name, offset);
  }
  if (next_line("end") != "end") throw FormatError("checkpoint: missing 'end' after manifest");
  for (const auto& [name, offset] : order) {
    auto& values = ck.tensors.at(name).values;
    for (auto& v : values) {
      char buf[4];
      if (!in.read(buf, 4)) throw FormatError("checkpoint: data truncated in '" + name + "'");
      std::uint32_t bits;
      std::memcpy(&bits, buf, 4);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      v = std::bit_cast<float>(bits);
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("checkpoint: trailing bytes after tensor data");
  }
  return ck;
}

inline constexpr const char* kFirstMomentPrefix = "optim.m.";
inline constexpr const char* kSecondMomentPrefix = "optim.v.";

template <typename T>
void save_checkpoint(const Model<T>& model, const OptimizerState<T>& state, const RunConfig& cfg,
                     const std::string& path) {
  Checkpoint ck;
  ck.config = cfg;
  ck.step = state.step;
  for (const auto& [name, p] : model.parameters()) {
    ck.tensors[name] = {p.shape(), std::vector<float>(p.data().begin(), p.data().end())};
    auto m = state.first_moment.find(name);
    if (m != state.first_moment.end()) {
      const auto& v = state.second_moment.at(name);
      ck.tensors[kFirstMomentPrefix + name] = {p.shape(), std::vector<float>(m->second.begin(), m->second.end())};
      ck.tensors[kSecondMomentPrefix + name] = {p.shape(), std::vector<float>(v.begin(), v.end())};
    }
  }
  write_checkpoint(ck, path);
}

/// Copies checkpoint tensors into a model built from the same configuration.
template <typename T>
void restore_checkpoint(const Checkpoint& ck, Model<T>& model, OptimizerState<T>* state) {
  for (const auto& [name, p] : model.parameters()) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw FormatError("checkpoint: missing parameter '" + name + "'");
    if (it->second.shape != p.shape()) {
      throw FormatError("checkpoint: shape mismatch for '" + name + "'");
    }
    auto handle = p;
    auto data = handle.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(it->second.values[i]);
    if (state) {
      auto m = ck.tensors.find(kFirstMomentPrefix + name);
      auto v = ck.tensors.find(kSecondMomentPrefix + name);
      if (m != ck.tensors.end() && v != ck.tensors.end()) {
        state->first_moment[name].assign(m->second.values.begin(), m->second.values.end());
        state->second_moment[name].assign(v->second.values.begin(), v->second.values.end());
      }
    }
  }
  if (state) state->step = ck.step;
}

template <typename T = float>
std::unique_ptr<Model<T>> model_from_checkpoint(const Checkpoint& ck) {
  auto model = std::make_unique<Model<T>>(ck.config.model, ck.config.mot, ck.config.seed);
  restore_checkpoint(ck, *model, static_cast<OptimizerState<T>*>(nullptr));
  return model;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double loss = 0.0;
  double perplexity = 0.0;
};

template <typename T>
EvalResult evaluate(Model<T>& model, std::span<const std::uint8_t> corpus, std::size_t n_batches,
                    std::size_t batch, std::size_t length, std::uint64_t seed) {
  if (n_batches == 0) throw ContractError("evaluate: n_batches must be positive");
  NoGradGuard no_grad;
  double total = 0.0;
  for (std::size_t i = 0; i < n_batches; ++i) {
    const auto b = make_batches(corpus, batch, length, seed, i, kEvalStream);
    const auto inputs = b.inputs();
    const auto targets = b.targets();
    total += static_cast<double>(cross_entropy(model.forward(inputs, batch, length), targets).item());
  }
  const double loss = total / static_cast<double>(n_batches);
  return {loss, std::exp(loss)};
}

// ---------------------------------------------------------------------------
// Training loop

struct BlockMetrics {
  std::size_t block = 0;
  double mean_entropy = 0.0;
  double temperature = 0.0;
};

struct MetricsRow {
  std::size_t step = 0;
  double train_loss = 0.0;
  double lr = 0.0;
  double tokens_per_second = 0.0;
  std::vector<BlockMetrics> blocks;
};

/// Observed per-block mixing statistics from the model's latest forward pass.
template <typename T>
std::vector<BlockMetrics> block_metrics(const Model<T>& model) {
  std::vector<BlockMetrics> out;
  if (model.config().ff_kind != FeedForwardKind::mot) return out;
  for (std::size_t b = 0; b < model.blocks().size(); ++b) {
    const auto& trace = model.traces()[b];
    BlockMetrics m{b, 0.0, current_temperature(*model.blocks()[b].mot, *model.mot_config())};
    if (trace.weights) m.mean_entropy = analysis::mixing_entropy(*trace.weights);
    out.push_back(m);
  }
  return out;
}

/// Append-only CSV: step,train_loss,lr,tokens_per_sec[,entropy_block_i,temp_block_i...]
class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, const ModelConfig& cfg, bool append) {
    const bool fresh = !append || !std::filesystem::exists(path);
    out_.open(path, fresh ? std::ios::trunc : std::ios::app);
    if (!out_) throw IoError("cannot open metrics file '" + path + "'");
    if (fresh) {
      out_ << "step,train_loss,lr,tokens_per_sec";
      if (cfg.ff_kind == FeedForwardKind::mot) {
        for (std::size_t b = 0; b < cfg.n_blocks; ++b) out_ << ",entropy_block_" << b << ",temp_block_" << b;
      }
      out_ << '\n';
      out_.flush();
    }
  }

  void write(const MetricsRow& row) {
    out_ << row.step << ',' << std::setprecision(9) << row.train_loss << ',' << row.lr << ','
         << std::setprecision(6) << row.tokens_per_second;
    for (const auto& b : row.blocks) {
      out_ << ',' << std::setprecision(9) << b.mean_entropy << ',' << b.temperature;
    }
    out_ << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

/// Single-threaded training state: model, optimizer and the step counter.
class Trainer {
 public:
  using Scalar = float;

  Trainer(RunConfig cfg, std::vector<std::uint8_t> corpus)
      : cfg_(std::move(cfg)), corpus_(std::move(corpus)) {
    cfg_.validate();
    check_vocab();
    model_ = std::make_unique<Model<Scalar>>(cfg_.model, cfg_.mot, cfg_.seed);
  }

  Trainer(const Checkpoint& ck, std::vector<std::uint8_t> corpus)
      : cfg_(ck.config), corpus_(std::move(corpus)) {
    cfg_.validate();
    check_vocab();
    model_ = std::make_unique<Model<Scalar>>(cfg_.model, cfg_.mot, cfg_.seed);
    restore_checkpoint(ck, *model_, &opt_);
  }

  /// One iteration; returns the row for the newly completed step.
  MetricsRow step() {
    const auto started = std::chrono::steady_clock::now();
    const std::size_t s = static_cast<std::size_t>(opt_.step);
    const auto batch = make_batches(corpus_, cfg_.batch_size, cfg_.context_length, cfg_.seed, s);
    const auto inputs = batch.inputs();
    const auto targets = batch.targets();
    model_->zero_grad();
    auto loss = cross_entropy(model_->forward(inputs, cfg_.batch_size, cfg_.context_length), targets);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericError("non-finite training loss at step " + std::to_string(s + 1));
    }
    backward(loss);
    const double lr = lr_schedule(s + 1, cfg_.steps, cfg_.peak_lr, cfg_.warmup_fraction,
                                  cfg_.final_lr_fraction);
    optimizer_step(model_->parameters(), opt_, lr);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    MetricsRow row;
    row.step = s + 1;
    row.train_loss = value;
    row.lr = lr;
    row.tokens_per_second =
        secs > 0 ? static_cast<double>(cfg_.batch_size * cfg_.context_length) / secs : 0.0;
    row.blocks = block_metrics(*model_);
    return row;
  }

  /// Runs until `until` steps are complete, logging every log_every steps.
  std::vector<MetricsRow> run(std::size_t until, MetricsWriter* writer = nullptr) {
    std::vector<MetricsRow> rows;
    while (completed_steps() < until) {
      auto row = step();
      if (row.step % cfg_.log_every == 0) {
        if (writer) writer->write(row);
      }
      rows.push_back(std::move(row));
    }
    return rows;
  }

  void save(const std::string& path) const { save_checkpoint(*model_, opt_, cfg_, path); }

  std::size_t completed_steps() const { return static_cast<std::size_t>(opt_.step); }
  const RunConfig& config() const { return cfg_; }
  Model<Scalar>& model() { return *model_; }
  std::span<const std::uint8_t> corpus() const { return corpus_; }

 private:
  void check_vocab() const {
    if (cfg_.model.vocab_size < 256) {
      throw ConfigError("model.vocab_size: byte-level training needs at least 256, got " +
                        std::to_string(cfg_.model.vocab_size));
    }
  }

  RunConfig cfg_;
  std::vector<std::uint8_t> corpus_;
  std::unique_ptr<Model<Scalar>> model_;
  OptimizerState<Scalar> opt_;
};

struct TrainSummary {
  std::size_t steps = 0;
  double final_loss = 0.0;
  std::vector<MetricsRow> rows;
  std::string checkpoint_path;
};

inline constexpr std::size_t kEvalBatches = 4;

/// Full run from step 0: metrics.csv, eval.csv and checkpoints in out_dir.
inline TrainSummary train(const RunConfig& cfg) {
  Trainer trainer(cfg, load_corpus(cfg.data_path));
  std::filesystem::create_directories(cfg.out_dir);
  const auto dir = std::filesystem::path(cfg.out_dir);
  MetricsWriter metrics((dir / "metrics.csv").string(), cfg.model, false);
  std::ofstream eval_log(dir / "eval.csv", std::ios::trunc);
  eval_log << "step,eval_loss,perplexity\n";
  TrainSummary summary;
  while (trainer.completed_steps() < cfg.steps) {
    std::size_t until = cfg.steps;
    if (cfg.eval_every) {
      until = std::min(until, (trainer.completed_steps() / cfg.eval_every + 1) * cfg.eval_every);
    }
    auto rows = trainer.run(until, &metrics);
    for (auto& r : rows) summary.rows.push_back(std::move(r));
    const auto done = trainer.completed_steps();
    if (cfg.eval_every && done % cfg.eval_every == 0) {
      const auto ev = evaluate(trainer.model(), trainer.corpus(), kEvalBatches, cfg.batch_size,
                               cfg.context_length, cfg.seed);
      eval_log << done << ',' << std::setprecision(9) << ev.loss << ',' << ev.perplexity << '\n';
      eval_log.flush();
      if (done != cfg.steps) {
        trainer.save((dir / ("checkpoint_step" + std::to_string(done) + ".ckpt")).string());
      }
    }
  }
  summary.steps = trainer.completed_steps();
  summary.final_loss = summary.rows.empty() ? 0.0 : summary.rows.back().train_loss;
  summary.checkpoint_path = (dir / "checkpoint.ckpt").string();
  trainer.save(summary.checkpoint_path);
  return summary;
}

}  // namespace mot
