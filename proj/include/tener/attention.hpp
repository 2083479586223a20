#pragma once

// Multi-head self-attention encoder in two modes.
//
// vanilla: absolute sinusoidal embeddings added to the input, Q/K/V
//   projections, scores Q_t·K_j, heads concatenated and projected by W_O.
// adapted: no key projection (head h reads the h-th d_k column block of H),
//   no output projection, and scores
//     A[t][j] = Q_t·K_j + Q_t·R_{t−j} + u·K_j + v·R_{t−j}
//   with R the signed relative encoding and u, v learned per head.
//
// Both modes follow each sublayer with a residual add and layer norm.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "tener/layers.hpp"
#include "tener/positional.hpp"
#include "tener/tensor.hpp"

namespace tener {

enum class AttentionMode { vanilla, adapted };

inline std::string to_string(AttentionMode m) {
  return m == AttentionMode::vanilla ? "vanilla" : "adapted";
}

inline AttentionMode parse_attention_mode(const std::string& s) {
  if (s == "vanilla" || s == "transformer") return AttentionMode::vanilla;
  if (s == "adapted") return AttentionMode::adapted;
  throw ConfigError("unknown encoder mode '" + s + "' (expected vanilla|adapted)");
}

struct EncoderConfig {
  AttentionMode mode = AttentionMode::adapted;
  bool scaled = false;
  std::size_t n_layers = 1;
  std::size_t n_heads = 4;
  std::size_t d_model = 32;
  std::size_t d_k = 8;
  std::size_t d_ff = 64;
  Scalar attn_dropout = 0.15;
  Scalar ffn_dropout = 0.15;
  // Biases on the vanilla Q/K/V/O projections.
  bool projection_bias = false;
  // Longest sequence the position tables cover.
  std::size_t max_len = 512;

  void validate() const {
    if (n_heads == 0 || d_k == 0) throw ConfigError("n_heads and d_k must be positive");
    if (n_heads * d_k != d_model)
      throw ConfigError("n_heads (" + std::to_string(n_heads) + ") x d_k (" +
                        std::to_string(d_k) + ") must equal d_model (" +
                        std::to_string(d_model) + ")");
    if (d_ff == 0) throw ConfigError("d_ff must be positive");
    if (max_len == 0) throw ConfigError("max_len must be positive");
    if (attn_dropout < 0 || attn_dropout >= 1 || ffn_dropout < 0 || ffn_dropout >= 1)
      throw ConfigError("dropout rates must lie in [0,1)");
    if (mode == AttentionMode::adapted && d_k % 2 != 0)
      throw ConfigError("relative encoding needs an even d_k");
    if (mode == AttentionMode::vanilla && d_model % 2 != 0)
      throw ConfigError("sinusoidal embedding needs an even d_model");
  }
};

/// Projections store all heads side by side: head h owns columns [h·d_k, (h+1)·d_k).
struct AttentionParams {
  Linear query;
  Linear key;     // vanilla only
  Linear value;
  Linear output;  // vanilla only
  Tensor u;       // n_heads × d_k, adapted only
  Tensor v;       // n_heads × d_k, adapted only

  std::size_t parameter_count() const {
    std::size_t n = query.parameter_count() + value.parameter_count();
    if (key.weight.defined()) n += key.parameter_count();
    if (output.weight.defined()) n += output.parameter_count();
    if (u.defined()) n += u.size() + v.size();
    return n;
  }
};

struct FeedForwardParams {
  Linear inner;  // d × d_ff with b_1
  Linear outer;  // d_ff × d with b_2

  std::size_t parameter_count() const {
    return inner.parameter_count() + outer.parameter_count();
  }
};

struct LayerParams {
  AttentionParams attention;
  FeedForwardParams ffn;
  LayerNormParams attn_norm;
  LayerNormParams ffn_norm;

  std::size_t parameter_count() const {
    return attention.parameter_count() + ffn.parameter_count() +
           attn_norm.parameter_count() + ffn_norm.parameter_count();
  }
};

inline LayerParams make_layer_params(const EncoderConfig& cfg, ParameterStore& store,
                                     const std::string& prefix, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  LayerParams p;
  auto& a = p.attention;
  const bool vanilla = cfg.mode == AttentionMode::vanilla;
  const bool bias = vanilla && cfg.projection_bias;
  a.query = Linear::create(store, prefix + ".attn.query", d, d, bias, rng);
  if (vanilla) a.key = Linear::create(store, prefix + ".attn.key", d, d, bias, rng);
  a.value = Linear::create(store, prefix + ".attn.value", d, d, bias, rng);
  if (vanilla) {
    a.output = Linear::create(store, prefix + ".attn.output", d, d, bias, rng);
  } else {
    a.u = store.add(prefix + ".attn.u", Tensor::zeros({cfg.n_heads, cfg.d_k}, true));
    a.v = store.add(prefix + ".attn.v", Tensor::zeros({cfg.n_heads, cfg.d_k}, true));
  }
  p.attn_norm = LayerNormParams::create(store, prefix + ".attn_norm", d);
  p.ffn.inner = Linear::create(store, prefix + ".ffn.inner", d, cfg.d_ff, true, rng);
  p.ffn.outer = Linear::create(store, prefix + ".ffn.outer", cfg.d_ff, d, true, rng);
  p.ffn_norm = LayerNormParams::create(store, prefix + ".ffn_norm", d);
  return p;
}

namespace detail {

inline Tensor apply_key_mask(const Tensor& scores, const Mask& mask) {
  if (mask.empty()) return scores;
  const std::size_t l = scores.dim(0);
  valid_prefix_length(mask, l);
  NoGradGuard guard;
  auto m = key_mask_matrix(mask, l);
  return add(scores, m);
}

inline void check_heads(const Tensor& h, std::size_t n_heads) {
  require_rank2(h, "attention");
  if (n_heads == 0 || h.dim(1) % n_heads != 0)
    throw ConfigError("model width " + std::to_string(h.dim(1)) +
                      " is not divisible by " + std::to_string(n_heads) + " heads");
}

}  // namespace detail

/// Per-head l×l scores Q_t·K_j with masked key columns at −∞.
inline std::vector<Tensor> vanilla_attention_scores(const Tensor& h,
                                                    const AttentionParams& params,
                                                    std::size_t n_heads,
                                                    const Mask& mask = {}) {
  detail::check_heads(h, n_heads);
  const std::size_t d_k = h.dim(1) / n_heads;
  auto q = params.query(h);
  auto k = params.key(h);
  std::vector<Tensor> scores;
  for (std::size_t head = 0; head < n_heads; ++head) {
    auto s = matmul_nt(slice(q, 1, head * d_k, d_k), slice(k, 1, head * d_k, d_k));
    scores.push_back(detail::apply_key_mask(s, mask));
  }
  return scores;
}

/// Per-head l×l relative scores (four-term sum) with masked key columns at −∞.
inline std::vector<Tensor> adapted_attention_scores(const Tensor& h,
                                                    const AttentionParams& params,
                                                    std::size_t n_heads,
                                                    const RelativeTable& table,
                                                    const Mask& mask = {}) {
  detail::check_heads(h, n_heads);
  const std::size_t l = h.dim(0);
  const std::size_t d_k = h.dim(1) / n_heads;
  if (table.head_dim() != d_k)
    throw ConfigError("relative table width " + std::to_string(table.head_dim()) +
                      " does not match head width " + std::to_string(d_k));
  auto rel = table.for_length(l);  // offsets −(l−1)..(l−1)
  auto q = params.query(h);
  std::vector<Tensor> scores;
  for (std::size_t head = 0; head < n_heads; ++head) {
    auto qh = slice(q, 1, head * d_k, d_k);
    auto kh = slice(h, 1, head * d_k, d_k);
    // (Q_t + u)·K_j covers the content and key-bias terms,
    // (Q_t + v)·R_{t−j} the position and direction terms.
    auto content = matmul_nt(add_rowwise(qh, slice(params.u, 0, head, 1)), kh);
    auto by_offset = matmul_nt(add_rowwise(qh, slice(params.v, 0, head, 1)), rel);
    auto s = add(content, gather_relative(by_offset, l, l - 1));
    scores.push_back(detail::apply_key_mask(s, mask));
  }
  return scores;
}

/// softmax over keys, optionally after dividing by √d_k.
inline Tensor attention_weights(const Tensor& scores, bool scaled, std::size_t d_k) {
  const auto& logits =
      scaled ? scale(scores, 1 / std::sqrt(static_cast<Scalar>(d_k))) : scores;
  return softmax_lastdim(logits);
}

inline Tensor attention_apply(const Tensor& scores, const Tensor& values, bool scaled,
                              std::size_t d_k, Scalar dropout_rate = 0,
                              const ForwardContext& ctx = {}) {
  auto weights = attention_weights(scores, scaled, d_k);
  return matmul(dropout(weights, dropout_rate, ctx.training, ctx.rng), values);
}

/// Shannon entropy (nats) of each row of an attention weight matrix.
inline std::vector<Scalar> row_entropies(const Tensor& weights) {
  std::vector<Scalar> out;
  for (std::size_t r = 0; r < weights.rows(); ++r) {
    Scalar e = 0;
    for (std::size_t c = 0; c < weights.cols(); ++c) {
      const Scalar p = weights.at(r, c);
      if (p > 0) e -= p * std::log(p);
    }
    out.push_back(e);
  }
  return out;
}

namespace detail {

inline std::vector<Tensor> layer_scores(const Tensor& h, const EncoderConfig& cfg,
                                        const LayerParams& params,
                                        const RelativeTable* table, const Mask& mask) {
  if (cfg.mode == AttentionMode::vanilla)
    return vanilla_attention_scores(h, params.attention, cfg.n_heads, mask);
  if (!table) throw ConfigError("adapted attention requires a relative table");
  return adapted_attention_scores(h, params.attention, cfg.n_heads, *table, mask);
}

}  // namespace detail

/// One encoder layer: attention sublayer then position-wise feed-forward,
/// each followed by residual add and layer norm.
inline Tensor transformer_layer(const Tensor& h, const EncoderConfig& cfg,
                                const LayerParams& params, const RelativeTable* table,
                                const Mask& mask = {}, const ForwardContext& ctx = {}) {
  auto scores = detail::layer_scores(h, cfg, params, table, mask);
  auto values = params.attention.value(h);
  std::vector<Tensor> heads;
  heads.reserve(cfg.n_heads);
  for (std::size_t head = 0; head < cfg.n_heads; ++head)
    heads.push_back(attention_apply(scores[head], slice(values, 1, head * cfg.d_k, cfg.d_k),
                                    cfg.scaled, cfg.d_k, cfg.attn_dropout, ctx));
  auto attended = cfg.n_heads == 1 ? heads[0] : concat(heads, 1);
  if (cfg.mode == AttentionMode::vanilla) attended = params.attention.output(attended);
  auto x = params.attn_norm(add(h, attended));
  auto inner = dropout(relu(params.ffn.inner(x)), cfg.ffn_dropout, ctx.training, ctx.rng);
  return params.ffn_norm(add(x, params.ffn.outer(inner)));
}

/// Stack of encoder layers plus the position tables its mode needs.
class TransformerEncoder {
 public:
  TransformerEncoder() = default;

  TransformerEncoder(const EncoderConfig& cfg, ParameterStore& store,
                     const std::string& prefix, std::mt19937_64& rng)
      : cfg_(cfg) {
    cfg_.validate();
    for (std::size_t i = 0; i < cfg_.n_layers; ++i)
      layers_.push_back(make_layer_params(cfg_, store, prefix + ".layer" + std::to_string(i), rng));
    if (cfg_.mode == AttentionMode::vanilla)
      absolute_ = shared_sinusoidal_table(cfg_.d_model, cfg_.max_len);
    else
      relative_ = shared_relative_table(cfg_.d_k, cfg_.max_len - 1);
  }

  const EncoderConfig& config() const { return cfg_; }
  const std::vector<LayerParams>& layers() const { return layers_; }
  std::vector<LayerParams>& layers() { return layers_; }
  const RelativeTable* relative_table() const { return relative_.get(); }

  /// Input after the mode's position handling (vanilla adds PE_t to row t).
  Tensor positioned(const Tensor& embedded) const {
    detail::require_rank2(embedded, "encode");
    if (embedded.dim(1) != cfg_.d_model)
      throw ShapeError("encode: input width " + std::to_string(embedded.dim(1)) +
                       " does not match d_model " + std::to_string(cfg_.d_model));
    const std::size_t l = embedded.dim(0);
    if (l > cfg_.max_len)
      throw ConfigError("sequence length " + std::to_string(l) + " exceeds max_len " +
                        std::to_string(cfg_.max_len));
    if (cfg_.mode == AttentionMode::vanilla) return add(embedded, absolute_->prefix(l));
    return embedded;
  }

  Tensor encode(const Tensor& embedded, const Mask& mask = {},
                const ForwardContext& ctx = {}) const {
    auto h = positioned(embedded);
    for (const auto& layer : layers_)
      h = transformer_layer(h, cfg_, layer, relative_.get(), mask, ctx);
    return h;
  }

  /// Raw (pre-scaling) attention scores per layer and head, evaluation mode.
  std::vector<std::vector<Tensor>> attention_logits(const Tensor& embedded,
                                                    const Mask& mask = {}) const {
    NoGradGuard guard;
    std::vector<std::vector<Tensor>> out;
    auto h = positioned(embedded);
    for (const auto& layer : layers_) {
      out.push_back(detail::layer_scores(h, cfg_, layer, relative_.get(), mask));
      h = transformer_layer(h, cfg_, layer, relative_.get(), mask, {});
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.parameter_count();
    return n;
  }

 private:
  EncoderConfig cfg_;
  std::vector<LayerParams> layers_;
  std::shared_ptr<const SinusoidalTable> absolute_;
  std::shared_ptr<const RelativeTable> relative_;
};

}  // namespace tener
