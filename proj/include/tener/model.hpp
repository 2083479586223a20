#pragma once

// Full tagger: [word embedding ; char feature] → linear → encoder → dropout →
// linear emissions → CRF.

#include <algorithm>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "tener/attention.hpp"
#include "tener/char_encoder.hpp"
#include "tener/crf.hpp"
#include "tener/data.hpp"
#include "tener/layers.hpp"
#include "tener/seed.hpp"
#include "tener/tensor.hpp"

namespace tener {

struct ModelConfig {
  std::size_t word_dim = 50;
  CharEncoderConfig chars{.kind = CharEncoderKind::none};
  EncoderConfig encoder;
  Scalar fc_dropout = 0.4;

  void validate() const {
    if (word_dim == 0) throw ConfigError("word_dim must be positive");
    if (fc_dropout < 0 || fc_dropout >= 1) throw ConfigError("fc_dropout must lie in [0,1)");
    chars.validate();
    encoder.validate();
  }

  std::size_t representation_dim() const { return word_dim + chars.feature_dim(); }
};

/// Index form of a sentence. `labels` is empty for unlabeled input.
struct EncodedSentence {
  std::vector<std::size_t> words;
  std::vector<std::vector<std::size_t>> chars;
  std::vector<std::size_t> labels;

  std::size_t size() const { return words.size(); }
};

/// Sentences of one mini-batch padded to the longest, with validity masks.
struct Batch {
  std::vector<EncodedSentence> rows;  // padded to `width`
  std::vector<Mask> masks;
  std::size_t width = 0;
};

inline Batch make_batch(std::span<const EncodedSentence* const> sentences) {
  Batch b;
  for (const auto* s : sentences) b.width = std::max(b.width, s->size());
  for (const auto* s : sentences) {
    EncodedSentence row = *s;
    Mask mask(b.width, false);
    std::fill_n(mask.begin(), s->size(), true);
    row.words.resize(b.width, Vocabulary::kPad);
    row.chars.resize(b.width, std::vector<std::size_t>{kPadCharId});
    if (!row.labels.empty()) row.labels.resize(b.width, 0);
    b.rows.push_back(std::move(row));
    b.masks.push_back(std::move(mask));
  }
  return b;
}

/// Word vector (pre-trained or unknown) concatenated with the char feature.
inline Tensor build_word_repr(const std::string& word_text, const Vocabulary& word_vocab,
                              const Vocabulary& char_vocab, const CharEncoder* chars,
                              const Tensor& embedding, const ForwardContext& ctx = {}) {
  const std::size_t id = word_vocab.lookup(word_text);
  auto word = embedding_lookup(embedding, std::span<const std::size_t>(&id, 1));
  if (!chars || chars->config().kind == CharEncoderKind::none) return word;
  std::vector<std::size_t> ids;
  for (const auto& ch : utf8_chars(word_text)) ids.push_back(char_vocab.lookup(ch));
  return concat({word, chars->encode(ids, ctx)}, 1);
}

class NerTagger {
 public:
  NerTagger(const ModelConfig& cfg, Vocabulary words, Vocabulary chars,
            std::vector<std::string> labels, std::uint64_t seed,
            const EmbeddingMatrix* pretrained = nullptr)
      : cfg_(cfg),
        words_(std::move(words)),
        chars_(std::move(chars)),
        labels_(std::move(labels)),
        store_(std::make_unique<ParameterStore>()) {
    cfg_.validate();
    if (labels_.empty()) throw ConfigError("tagger needs at least one label");
    constraints_ = bioes_transition_mask(labels_);
    std::mt19937_64 rng(derive_seed(seed, "init"));
    dropout_rng_.seed(derive_seed(seed, "dropout"));

    EmbeddingMatrix table;
    if (pretrained) {
      if (pretrained->dim != cfg_.word_dim || pretrained->rows() != words_.size())
        throw ConfigError("pre-trained embeddings do not match vocabulary or word_dim");
      table = *pretrained;
    } else {
      table = random_embeddings(words_, cfg_.word_dim, rng);
    }
    word_embedding_ = store_->add(
        "word_embedding", Tensor::matrix(words_.size(), cfg_.word_dim, table.values, true));
    if (cfg_.chars.kind != CharEncoderKind::none)
      char_encoder_ = CharEncoder(cfg_.chars, chars_.size(), *store_, "char", rng);
    input_ = Linear::create(*store_, "input", cfg_.representation_dim(), cfg_.encoder.d_model,
                            true, rng);
    encoder_ = TransformerEncoder(cfg_.encoder, *store_, "encoder", rng);
    output_ = Linear::create(*store_, "emission", cfg_.encoder.d_model, labels_.size(), true, rng);
    transitions_ = store_->add("crf.transitions",
                               Tensor::zeros({labels_.size() + 2, labels_.size() + 2}, true));
  }

  const ModelConfig& config() const { return cfg_; }
  const Vocabulary& words() const { return words_; }
  const Vocabulary& chars() const { return chars_; }
  const std::vector<std::string>& labels() const { return labels_; }
  const TransitionMask& constraints() const { return constraints_; }
  ParameterStore& parameters() { return *store_; }
  const ParameterStore& parameters() const { return *store_; }
  const TransformerEncoder& encoder() const { return encoder_; }
  const Tensor& transitions() const { return transitions_; }
  std::mt19937_64& dropout_rng() { return dropout_rng_; }

  std::size_t label_index(const std::string& label) const {
    auto it = std::find(labels_.begin(), labels_.end(), label);
    if (it == labels_.end()) throw std::out_of_range("label '" + label + "' unknown to the model");
    return static_cast<std::size_t>(it - labels_.begin());
  }

  EncodedSentence encode_tokens(const std::vector<std::string>& tokens) const {
    EncodedSentence e;
    for (const auto& t : tokens) {
      e.words.push_back(words_.lookup(t));
      std::vector<std::size_t> ids;
      for (const auto& ch : utf8_chars(t)) ids.push_back(chars_.lookup(ch));
      if (ids.empty()) ids.push_back(Vocabulary::kUnknown);
      e.chars.push_back(std::move(ids));
    }
    return e;
  }

  EncodedSentence encode_sentence(const LabeledSentence& s) const {
    auto e = encode_tokens(s.tokens);
    for (const auto& l : s.labels) e.labels.push_back(label_index(l));
    return e;
  }

  /// l×representation_dim rows for the unmasked prefix.
  Tensor word_representations(const EncodedSentence& s, std::size_t length,
                              const ForwardContext& ctx = {}) const {
    std::span<const std::size_t> ids(s.words.data(), length);
    auto words = embedding_lookup(word_embedding_, ids);
    if (cfg_.chars.kind == CharEncoderKind::none) return words;
    std::vector<std::vector<std::size_t>> chars(s.chars.begin(),
                                                s.chars.begin() + static_cast<std::ptrdiff_t>(length));
    return concat({words, char_encoder_.encode_words(chars, ctx)}, 1);
  }

  /// Encoder input (after the input projection) for the unmasked prefix.
  Tensor encoder_input(const EncodedSentence& s, const Mask& mask = {},
                       const ForwardContext& ctx = {}) const {
    const std::size_t n = valid_prefix_length(mask, s.size());
    if (n == 0) throw ContractError("sentence has no unmasked token");
    return input_(word_representations(s, n, ctx));
  }

  /// Per-token label scores for the unmasked prefix. Masked positions cannot
  /// influence valid ones, so the padded tail is never materialized.
  Tensor emissions(const EncodedSentence& s, const Mask& mask = {},
                   const ForwardContext& ctx = {}) const {
    auto h = encoder_.encode(encoder_input(s, mask, ctx), {}, ctx);
    h = dropout(h, cfg_.fc_dropout, ctx.training, ctx.rng);
    return output_(h);
  }

  /// Negative log-likelihood of the gold labels.
  Tensor loss(const EncodedSentence& s, const Mask& mask = {}, const ForwardContext& ctx = {}) const {
    if (s.labels.size() != s.size()) throw ContractError("loss: sentence lacks gold labels");
    auto e = emissions(s, mask, ctx);
    return scale(log_likelihood(e, transitions_, s.labels), -1);
  }

  /// Mean negative log-likelihood over the sequences of a batch.
  Tensor batch_loss(const Batch& batch, const ForwardContext& ctx = {}) const {
    Tensor total;
    for (std::size_t i = 0; i < batch.rows.size(); ++i) {
      auto l = loss(batch.rows[i], batch.masks[i], ctx);
      total = total.defined() ? add(total, l) : l;
    }
    return scale(total, Scalar{1} / static_cast<Scalar>(batch.rows.size()));
  }

  std::vector<std::size_t> decode(const EncodedSentence& s, bool constrained = true) const {
    NoGradGuard guard;
    auto e = emissions(s);
    return viterbi_decode(e, transitions_, {}, constrained ? &constraints_ : nullptr).path;
  }

  std::vector<std::string> predict(const std::vector<std::string>& tokens) const {
    std::vector<std::string> out;
    if (tokens.empty()) return out;
    for (auto id : decode(encode_tokens(tokens))) out.push_back(labels_[id]);
    return out;
  }

  std::vector<std::vector<Tensor>> attention_logits(const EncodedSentence& s) const {
    NoGradGuard guard;
    return encoder_.attention_logits(encoder_input(s));
  }

 private:
  ModelConfig cfg_;
  Vocabulary words_;
  Vocabulary chars_;
  std::vector<std::string> labels_;
  TransitionMask constraints_;
  std::unique_ptr<ParameterStore> store_;
  std::mt19937_64 dropout_rng_;
  Tensor word_embedding_;
  CharEncoder char_encoder_;
  Linear input_;
  TransformerEncoder encoder_;
  Linear output_;
  Tensor transitions_;
};

/// Span P/R/F1 of constrained decoding against gold labels.
inline SpanEvaluation evaluate(const NerTagger& model, const std::vector<LabeledSentence>& data) {
  std::vector<std::vector<std::string>> pred, gold;
  for (const auto& s : data) {
    pred.push_back(model.predict(s.tokens));
    gold.push_back(s.labels);
  }
  return evaluate_spans(pred, gold);
}

}  // namespace tener
