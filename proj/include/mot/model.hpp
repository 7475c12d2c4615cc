#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mot/baselines.hpp"
#include "mot/mot_layer.hpp"
#include "mot/ops.hpp"
#include "mot/random.hpp"
#include "mot/tensor.hpp"

namespace mot {

enum class FeedForwardKind { dense, mot, expert_choice, token_choice };

inline std::string to_string(FeedForwardKind kind) {
  switch (kind) {
    case FeedForwardKind::dense: return "dense";
    case FeedForwardKind::mot: return "mot";
    case FeedForwardKind::expert_choice: return "expert_choice";
    case FeedForwardKind::token_choice: return "token_choice";
  }
  return "dense";
}

inline FeedForwardKind parse_ff_kind(const std::string& s) {
  if (s == "dense") return FeedForwardKind::dense;
  if (s == "mot") return FeedForwardKind::mot;
  if (s == "expert_choice") return FeedForwardKind::expert_choice;
  if (s == "token_choice") return FeedForwardKind::token_choice;
  throw ConfigError("ff_kind: expected dense|mot|expert_choice|token_choice, got '" + s + "'");
}

struct ModelConfig {
  std::size_t n_blocks = 2;
  std::size_t d_model = 128;
  std::size_t d_ff = 512;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 256;
  std::size_t context_length = 256;
  FeedForwardKind ff_kind = FeedForwardKind::dense;

  void validate() const {
    if (!n_blocks || !d_model || !d_ff || !n_heads || !vocab_size || !context_length) {
      throw ConfigError("model: all dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("model: d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    }
  }
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain, bias;
};

template <typename T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct DenseFFParams {
  Tensor<T> w1, b1, w2, b2;

  std::size_t parameter_count() const {
    return w1.numel() + b1.numel() + w2.numel() + b2.numel();
  }
};

template <typename T>
struct BlockParams {
  LayerNormParams<T> ln1, ln2;
  AttentionParams<T> attn;
  std::optional<DenseFFParams<T>> ff;
  std::optional<MoTLayerParams<T>> mot;
};

/// Causal multi-head self-attention on [B x T x d].
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& x, const AttentionParams<T>& p,
                           std::size_t n_heads, std::size_t context_length) {
  if (x.rank() != 3) throw DimensionError("causal_attention: expected [B x T x d], got " + x.shape_string());
  if (x.dim(1) > context_length) {
    throw ContractError("causal_attention: sequence length " + std::to_string(x.dim(1)) +
                        " exceeds context length " + std::to_string(context_length));
  }
  auto q = linear(x, p.wq, p.bq);
  auto k = linear(x, p.wk, p.bk);
  auto v = linear(x, p.wv, p.bv);
  return linear(causal_attention_core(q, k, v, n_heads), p.wo, p.bo);
}

/// w2 * gelu(w1 * x), per token.
template <typename T>
Tensor<T> dense_ff(const Tensor<T>& x, const DenseFFParams<T>& p) {
  return linear(activation(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

template <typename T>
struct BlockTrace {
  std::optional<MixingWeights<T>> weights;
};

/// Pre-norm residual block: y = x + attn(LN(x)); out = y + ff(LN(y)).
template <typename T>
Tensor<T> transformer_block(const Tensor<T>& x, const BlockParams<T>& block,
                            const ModelConfig& cfg, const MoTConfig* mot_cfg,
                            BlockTrace<T>* trace = nullptr) {
  auto y = x + causal_attention(layer_norm(x, block.ln1.gain, block.ln1.bias), block.attn,
                                cfg.n_heads, cfg.context_length);
  auto h = layer_norm(y, block.ln2.gain, block.ln2.bias);
  switch (cfg.ff_kind) {
    case FeedForwardKind::dense:
      return y + dense_ff(h, *block.ff);
    case FeedForwardKind::mot: {
      auto out = mot_layer_forward(h, *block.mot, *mot_cfg);
      if (trace) trace->weights = out.weights;
      return y + out.output;
    }
    case FeedForwardKind::expert_choice:
      return y + baseline_layer_forward(h, *block.mot, *mot_cfg, RoutingKind::expert_choice);
    case FeedForwardKind::token_choice:
      return y + baseline_layer_forward(h, *block.mot, *mot_cfg, RoutingKind::token_choice);
  }
  return y;
}

/// Decoder-only language model: token + learned position embeddings,
/// n_blocks pre-norm blocks, final layer norm, vocabulary projection.
template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, std::optional<MoTConfig> mot_cfg, std::uint64_t seed)
      : cfg_(cfg), mot_cfg_(std::move(mot_cfg)) {
    cfg_.validate();
    if (cfg_.ff_kind != FeedForwardKind::dense) {
      if (!mot_cfg_) {
        throw ConfigError("model: ff_kind " + to_string(cfg_.ff_kind) + " requires a mot section");
      }
      mot_cfg_->validate();
    }
    Rng rng = make_rng(seed, 0x6d6f64656c);
    const std::size_t d = cfg_.d_model, V = cfg_.vocab_size;
    const double residual = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.n_blocks));
    token_embedding_ = add("embed.token", random_normal<T>({V, d}, rng, 0.02, true));
    position_embedding_ =
        add("embed.position", random_normal<T>({cfg_.context_length, d}, rng, 0.02, true));
    for (std::size_t b = 0; b < cfg_.n_blocks; ++b) {
      const std::string pre = "block" + std::to_string(b) + ".";
      BlockParams<T> block;
      block.ln1 = {add(pre + "ln1.gain", Tensor<T>::full({d}, T(1), true)),
                   add(pre + "ln1.bias", Tensor<T>::zeros({d}, true))};
      block.ln2 = {add(pre + "ln2.gain", Tensor<T>::full({d}, T(1), true)),
                   add(pre + "ln2.bias", Tensor<T>::zeros({d}, true))};
      auto& a = block.attn;
      a.wq = add(pre + "attn.wq", random_normal<T>({d, d}, rng, 0.02, true));
      a.bq = add(pre + "attn.bq", Tensor<T>::zeros({d}, true));
      a.wk = add(pre + "attn.wk", random_normal<T>({d, d}, rng, 0.02, true));
      a.bk = add(pre + "attn.bk", Tensor<T>::zeros({d}, true));
      a.wv = add(pre + "attn.wv", random_normal<T>({d, d}, rng, 0.02, true));
      a.bv = add(pre + "attn.bv", Tensor<T>::zeros({d}, true));
      a.wo = add(pre + "attn.wo", random_normal<T>({d, d}, rng, 0.02 * residual, true));
      a.bo = add(pre + "attn.bo", Tensor<T>::zeros({d}, true));
      if (cfg_.ff_kind == FeedForwardKind::dense) {
        DenseFFParams<T> ff;
        ff.w1 = add(pre + "ff.w1", random_normal<T>({d, cfg_.d_ff}, rng, 0.02, true));
        ff.b1 = add(pre + "ff.b1", Tensor<T>::zeros({cfg_.d_ff}, true));
        ff.w2 = add(pre + "ff.w2", random_normal<T>({cfg_.d_ff, d}, rng, 0.02 * residual, true));
        ff.b2 = add(pre + "ff.b2", Tensor<T>::zeros({d}, true));
        block.ff = ff;
      } else {
        auto mp = MoTLayerParams<T>::init(d, *mot_cfg_, rng, residual);
        for (auto& [name, t] : mp.named(pre + "mot.")) add(name, t);
        block.mot = std::move(mp);
      }
      blocks_.push_back(std::move(block));
    }
    final_norm_ = {add("ln_f.gain", Tensor<T>::full({d}, T(1), true)),
                   add("ln_f.bias", Tensor<T>::zeros({d}, true))};
    head_w_ = add("head.w", random_normal<T>({d, V}, rng, 0.02, true));
    head_b_ = add("head.b", Tensor<T>::zeros({V}, true));
    traces_.resize(cfg_.n_blocks);
  }

  /// ids is row-major [batch x length]; returns logits [batch x length x V].
  Tensor<T> forward(std::span<const std::int32_t> ids, std::size_t batch, std::size_t length) {
    if (ids.size() != batch * length) {
      throw DimensionError("forward_lm: " + std::to_string(ids.size()) + " ids for batch " +
                           std::to_string(batch) + "x" + std::to_string(length));
    }
    if (length > cfg_.context_length) {
      throw ContractError("forward_lm: sequence length " + std::to_string(length) +
                          " exceeds context length " + std::to_string(cfg_.context_length));
    }
    const std::size_t d = cfg_.d_model;
    std::vector<std::size_t> positions(batch * length);
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i % length;
    auto x = embedding_lookup(token_embedding_, ids) +
             gather_rows(position_embedding_, std::span<const std::size_t>(positions));
    x = reshape(x, {batch, length, d});
    const MoTConfig* mc = mot_cfg_ ? &*mot_cfg_ : nullptr;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      traces_[b] = {};
      x = transformer_block(x, blocks_[b], cfg_, mc, &traces_[b]);
    }
    x = layer_norm(x, final_norm_.gain, final_norm_.bias);
    return linear(x, head_w_, head_b_);
  }

  const ModelConfig& config() const { return cfg_; }
  const std::optional<MoTConfig>& mot_config() const { return mot_cfg_; }
  const std::map<std::string, Tensor<T>>& parameters() const { return params_; }
  const std::vector<BlockParams<T>>& blocks() const { return blocks_; }
  // Mixing weights recorded by each block during the latest forward pass.
  const std::vector<BlockTrace<T>>& traces() const { return traces_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

 private:
  Tensor<T> add(const std::string& name, Tensor<T> t) {
    params_.emplace(name, t);
    return t;
  }

  ModelConfig cfg_;
  std::optional<MoTConfig> mot_cfg_;
  std::map<std::string, Tensor<T>> params_;
  Tensor<T> token_embedding_, position_embedding_;
  std::vector<BlockParams<T>> blocks_;
  LayerNormParams<T> final_norm_;
  Tensor<T> head_w_, head_b_;
  std::vector<BlockTrace<T>> traces_;
};

template <typename T>
Tensor<T> forward_lm(Model<T>& model, std::span<const std::int32_t> ids, std::size_t batch,
                     std::size_t length) {
  return model.forward(ids, batch, length);
}

inline std::size_t dense_ff_parameter_count(const ModelConfig& cfg) {
  return 2 * cfg.d_model * cfg.d_ff + cfg.d_ff + cfg.d_model;
}

}  // namespace mot
