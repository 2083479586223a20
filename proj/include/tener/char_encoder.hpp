#pragma once

// Character-level word encoders. Each maps a word's character indices to one
// feature row; CNN and both Transformer kinds max-pool over positions, the
// BiLSTM concatenates the two final hidden states. All kinds end with a
// linear projection to `output_dim` unless it is zero.
//
// Non-embedding parameter totals under the defaults:
//   cnn          conv 3·30·30+30, projection 30·30+30                 = 3660
//   bilstm       2 × (30·200 + 50·200 + 2·200), projection 100·30+30   = 35830
//   transformer  biased Q,K,V,O 4·930, FFN 3690, norms 120, proj 930  = 8460
//   adapted      Q,V 1800, u,v 60, FFN 3690, norms 120, proj 930      = 6600

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tener/attention.hpp"
#include "tener/layers.hpp"
#include "tener/tensor.hpp"

namespace tener {

enum class CharEncoderKind { none, cnn, bilstm, transformer, adapted_transformer };

inline std::string to_string(CharEncoderKind k) {
  switch (k) {
    case CharEncoderKind::none: return "none";
    case CharEncoderKind::cnn: return "cnn";
    case CharEncoderKind::bilstm: return "bilstm";
    case CharEncoderKind::transformer: return "transformer";
    case CharEncoderKind::adapted_transformer: return "adapted";
  }
  return "none";
}

inline CharEncoderKind parse_char_encoder_kind(const std::string& s) {
  if (s == "none") return CharEncoderKind::none;
  if (s == "cnn") return CharEncoderKind::cnn;
  if (s == "bilstm" || s == "lstm") return CharEncoderKind::bilstm;
  if (s == "transformer" || s == "vanilla") return CharEncoderKind::transformer;
  if (s == "adapted" || s == "adapted_transformer") return CharEncoderKind::adapted_transformer;
  throw ConfigError("unknown char encoder '" + s +
                    "' (expected none|cnn|bilstm|transformer|adapted)");
}

/// Character index reserved for padding; its embedding row pads CNN windows.
constexpr std::size_t kPadCharId = 0;

struct CharEncoderConfig {
  CharEncoderKind kind = CharEncoderKind::cnn;
  std::size_t char_emb_dim = 30;
  std::size_t kernel_size = 3;
  std::size_t n_kernels = 30;
  std::size_t stride = 1;
  std::size_t lstm_hidden = 50;  // per direction
  std::size_t heads = 3;
  std::size_t head_dim = 10;
  std::size_t d_ff = 60;
  Scalar dropout = 0.15;
  std::size_t output_dim = 30;  // 0 keeps the raw pooled/concatenated feature
  std::size_t max_word_len = 32;

  void validate() const {
    if (kind == CharEncoderKind::none) return;
    if (char_emb_dim == 0 || max_word_len == 0)
      throw ConfigError("char encoder dimensions must be positive");
    if (kind == CharEncoderKind::cnn && (kernel_size == 0 || n_kernels == 0 || stride == 0))
      throw ConfigError("cnn char encoder needs positive kernel size, count and stride");
    if (kind == CharEncoderKind::bilstm && lstm_hidden == 0)
      throw ConfigError("bilstm char encoder needs a positive hidden size");
    if ((kind == CharEncoderKind::transformer || kind == CharEncoderKind::adapted_transformer) &&
        heads * head_dim != char_emb_dim)
      throw ConfigError("char transformer needs heads x head_dim == char_emb_dim");
  }

  std::size_t raw_feature_dim() const {
    switch (kind) {
      case CharEncoderKind::none: return 0;
      case CharEncoderKind::cnn: return n_kernels;
      case CharEncoderKind::bilstm: return 2 * lstm_hidden;
      default: return heads * head_dim;
    }
  }

  std::size_t feature_dim() const {
    if (kind == CharEncoderKind::none) return 0;
    return output_dim ? output_dim : raw_feature_dim();
  }

  EncoderConfig transformer_config() const {
    EncoderConfig e;
    const bool vanilla = kind == CharEncoderKind::transformer;
    e.mode = vanilla ? AttentionMode::vanilla : AttentionMode::adapted;
    e.scaled = vanilla;
    e.n_layers = 1;
    e.n_heads = heads;
    e.d_k = head_dim;
    e.d_model = heads * head_dim;
    e.d_ff = d_ff;
    e.attn_dropout = dropout;
    e.ffn_dropout = dropout;
    e.projection_bias = vanilla;
    e.max_len = max_word_len;
    return e;
  }
};

struct LstmDirection {
  Linear input;      // in × 4h with b_ih
  Linear recurrent;  // h × 4h with b_hh

  std::size_t parameter_count() const {
    return input.parameter_count() + recurrent.parameter_count();
  }
};

class CharEncoder {
 public:
  CharEncoder() = default;

  CharEncoder(const CharEncoderConfig& cfg, std::size_t n_chars, ParameterStore& store,
              const std::string& prefix, std::mt19937_64& rng)
      : cfg_(cfg) {
    cfg_.validate();
    if (cfg_.kind == CharEncoderKind::none) return;
    if (n_chars <= kPadCharId) throw ConfigError("char vocabulary must contain the pad symbol");
    {
      std::uniform_real_distribution<Scalar> dist(-0.1, 0.1);
      std::vector<Scalar> v(n_chars * cfg_.char_emb_dim);
      for (auto& x : v) x = dist(rng);
      embedding_ = store.add(prefix + ".embedding",
                             Tensor::matrix(n_chars, cfg_.char_emb_dim, std::move(v), true));
    }
    const std::size_t e = cfg_.char_emb_dim;
    switch (cfg_.kind) {
      case CharEncoderKind::cnn:
        conv_ = Linear::create(store, prefix + ".conv", cfg_.kernel_size * e, cfg_.n_kernels,
                               true, rng);
        break;
      case CharEncoderKind::bilstm:
        for (const char* dir : {"fwd", "bwd"}) {
          LstmDirection d;
          const std::string p = prefix + ".lstm." + dir;
          d.input = Linear::create(store, p + ".input", e, 4 * cfg_.lstm_hidden, true, rng);
          d.recurrent = Linear::create(store, p + ".recurrent", cfg_.lstm_hidden,
                                       4 * cfg_.lstm_hidden, true, rng);
          lstm_.push_back(std::move(d));
        }
        break;
      case CharEncoderKind::transformer:
      case CharEncoderKind::adapted_transformer:
        transformer_ = std::make_shared<TransformerEncoder>(cfg_.transformer_config(), store,
                                                            prefix + ".encoder", rng);
        break;
      case CharEncoderKind::none:
        break;
    }
    if (cfg_.output_dim)
      projection_ = Linear::create(store, prefix + ".projection", cfg_.raw_feature_dim(),
                                   cfg_.output_dim, true, rng);
  }

  const CharEncoderConfig& config() const { return cfg_; }
  std::size_t feature_dim() const { return cfg_.feature_dim(); }
  const Tensor& embedding() const { return embedding_; }

  /// Trainable scalars excluding the character embedding table.
  std::size_t parameter_count() const {
    std::size_t n = projection_.weight.defined() ? projection_.parameter_count() : 0;
    if (conv_.weight.defined()) n += conv_.parameter_count();
    for (const auto& d : lstm_) n += d.parameter_count();
    if (transformer_) n += transformer_->parameter_count();
    return n;
  }

  /// 1×feature_dim feature for one word. Trailing pad indices are ignored and
  /// words longer than max_word_len are truncated.
  Tensor encode(std::span<const std::size_t> chars, const ForwardContext& ctx = {}) const {
    if (cfg_.kind == CharEncoderKind::none)
      throw ContractError("encode: char encoder kind is none");
    std::size_t n = chars.size();
    while (n > 0 && chars[n - 1] == kPadCharId) --n;
    n = std::min(n, cfg_.max_word_len);
    if (n == 0) throw ContractError("encode: word has no characters");
    chars = chars.first(n);
    Tensor feature;
    switch (cfg_.kind) {
      case CharEncoderKind::cnn: feature = encode_cnn(chars); break;
      case CharEncoderKind::bilstm: feature = encode_bilstm(chars); break;
      default: feature = encode_transformer(chars, ctx); break;
    }
    return projection_.weight.defined() ? projection_(feature) : feature;
  }

  /// l×feature_dim features, one row per word.
  Tensor encode_words(const std::vector<std::vector<std::size_t>>& words,
                      const ForwardContext& ctx = {}) const {
    std::vector<Tensor> rows;
    rows.reserve(words.size());
    for (const auto& w : words) rows.push_back(encode(w, ctx));
    return rows.size() == 1 ? rows[0] : concat(rows, 0);
  }

 private:
  Tensor encode_cnn(std::span<const std::size_t> chars) const {
    const std::size_t left = (cfg_.kernel_size - 1) / 2;
    const std::size_t right = cfg_.kernel_size - 1 - left;
    std::vector<std::size_t> padded(left, kPadCharId);
    padded.insert(padded.end(), chars.begin(), chars.end());
    padded.insert(padded.end(), right, kPadCharId);
    auto embedded = embedding_lookup(embedding_, padded);
    auto windows = unfold_rows(embedded, cfg_.kernel_size, cfg_.stride);
    return max_pool_over_axis(relu(conv_(windows)), 0);
  }

  Tensor run_lstm(const LstmDirection& dir, const Tensor& embedded, bool reverse) const {
    const std::size_t h = cfg_.lstm_hidden;
    const std::size_t n = embedded.dim(0);
    auto gates_in = dir.input(embedded);  // n × 4h, input part for every step
    auto hidden = Tensor::zeros({1, h});
    Tensor cell;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t t = reverse ? n - 1 - s : s;
      auto z = add(slice(gates_in, 0, t, 1), dir.recurrent(hidden));
      auto gates = split(z, 1, {h, h, h, h});
      auto i = sigmoid(gates[0]);
      auto f = sigmoid(gates[1]);
      auto g = tanh(gates[2]);
      auto o = sigmoid(gates[3]);
      cell = cell.defined() ? add(mul(f, cell), mul(i, g)) : mul(i, g);
      hidden = mul(o, tanh(cell));
    }
    return hidden;
  }

  Tensor encode_bilstm(std::span<const std::size_t> chars) const {
    auto embedded = embedding_lookup(embedding_, chars);
    return concat({run_lstm(lstm_[0], embedded, false), run_lstm(lstm_[1], embedded, true)}, 1);
  }

  Tensor encode_transformer(std::span<const std::size_t> chars, const ForwardContext& ctx) const {
    auto embedded = embedding_lookup(embedding_, chars);
    return max_pool_over_axis(transformer_->encode(embedded, {}, ctx), 0);
  }

  CharEncoderConfig cfg_;
  Tensor embedding_;
  Linear conv_;
  std::vector<LstmDirection> lstm_;
  std::shared_ptr<TransformerEncoder> transformer_;
  Linear projection_;
};

}  // namespace tener
