#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "tener/char_encoder.hpp"
#include "tener/model.hpp"

using namespace tener;

namespace {

CharEncoderConfig defaults(CharEncoderKind kind) {
  CharEncoderConfig c;
  c.kind = kind;
  return c;
}

CharEncoderConfig tiny(CharEncoderKind kind) {
  CharEncoderConfig c;
  c.kind = kind;
  c.char_emb_dim = 4;
  c.n_kernels = 3;
  c.lstm_hidden = 3;
  c.heads = 2;
  c.head_dim = 2;
  c.d_ff = 5;
  c.dropout = 0;
  c.output_dim = 3;
  c.max_word_len = 8;
  return c;
}

constexpr CharEncoderKind kAllKinds[] = {CharEncoderKind::cnn, CharEncoderKind::bilstm,
                                         CharEncoderKind::transformer,
                                         CharEncoderKind::adapted_transformer};

}  // namespace

TEST(CharEncoder, DefaultParameterCounts) {
  const std::pair<CharEncoderKind, std::size_t> expected[] = {
      {CharEncoderKind::bilstm, 35830},
      {CharEncoderKind::cnn, 3660},
      {CharEncoderKind::transformer, 8460},
      {CharEncoderKind::adapted_transformer, 6600}};
  for (auto [kind, count] : expected) {
    std::mt19937_64 rng(1);
    ParameterStore store;
    CharEncoder enc(defaults(kind), 60, store, "char", rng);
    EXPECT_EQ(enc.parameter_count(), count) << to_string(kind);
    EXPECT_EQ(store.scalar_count(), count + 60 * 30) << to_string(kind);
  }
}

TEST(CharEncoder, SingleCharacterCnnMatchesHandComputation) {
  auto cfg = tiny(CharEncoderKind::cnn);
  cfg.output_dim = 0;
  std::mt19937_64 rng(3);
  ParameterStore store;
  CharEncoder enc(cfg, 6, store, "char", rng);
  const std::size_t c = 4;
  auto out = enc.encode(std::vector<std::size_t>{c});
  ASSERT_EQ(out.shape(), (Shape{1, 3}));
  // One window: [pad, c, pad] flattened, then W·x + b and relu.
  const auto& E = store.get("char.embedding");
  const auto& W = store.get("char.conv.weight");
  const auto& b = store.get("char.conv.bias");
  std::vector<Scalar> window;
  for (std::size_t id : {kPadCharId, c, kPadCharId})
    for (std::size_t k = 0; k < 4; ++k) window.push_back(E.at(id, k));
  for (std::size_t o = 0; o < 3; ++o) {
    Scalar z = b.data()[o];
    for (std::size_t i = 0; i < 12; ++i) z += window[i] * W.at(i, o);
    EXPECT_NEAR(out.at(0, o), std::max(z, Scalar{0}), 1e-12);
  }
}

TEST(CharEncoder, CnnIsOrderSensitiveOnlyThroughWindows) {
  auto cfg = tiny(CharEncoderKind::cnn);
  cfg.kernel_size = 1;
  std::mt19937_64 rng(4);
  ParameterStore store;
  CharEncoder enc(cfg, 6, store, "char", rng);
  auto ab = enc.encode(std::vector<std::size_t>{2, 3});
  auto ba = enc.encode(std::vector<std::size_t>{3, 2});
  for (std::size_t i = 0; i < ab.size(); ++i) EXPECT_EQ(ab.data()[i], ba.data()[i]);
}

TEST(CharEncoder, BilstmSeesOrder) {
  std::mt19937_64 rng(5);
  ParameterStore store;
  CharEncoder enc(tiny(CharEncoderKind::bilstm), 6, store, "char", rng);
  auto ab = enc.encode(std::vector<std::size_t>{2, 3});
  auto ba = enc.encode(std::vector<std::size_t>{3, 2});
  Scalar diff = 0;
  for (std::size_t i = 0; i < ab.size(); ++i) diff = std::max(diff, std::abs(ab.data()[i] - ba.data()[i]));
  EXPECT_GT(diff, 1e-6);
}

TEST(CharEncoder, TrailingPadIsIgnoredAndLongWordsTruncate) {
  for (auto kind : kAllKinds) {
    std::mt19937_64 rng(6);
    ParameterStore store;
    CharEncoder enc(tiny(kind), 6, store, "char", rng);
    auto bare = enc.encode(std::vector<std::size_t>{2, 5, 3});
    auto padded = enc.encode(std::vector<std::size_t>{2, 5, 3, 0, 0, 0});
    for (std::size_t i = 0; i < bare.size(); ++i) EXPECT_EQ(bare.data()[i], padded.data()[i]) << to_string(kind);
    std::vector<std::size_t> longer(8, 2), longest(12, 2);
    longest[10] = 4;
    auto a = enc.encode(longer), b = enc.encode(longest);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]) << to_string(kind);
    EXPECT_THROW(enc.encode(std::vector<std::size_t>{0, 0}), ContractError);
  }
}

TEST(CharEncoder, OutOfVocabularyIndexThrows) {
  std::mt19937_64 rng(7);
  ParameterStore store;
  CharEncoder enc(tiny(CharEncoderKind::cnn), 6, store, "char", rng);
  EXPECT_THROW(enc.encode(std::vector<std::size_t>{2, 6}), std::out_of_range);
}

TEST(CharEncoder, FeatureWidthsAndRepresentationDim) {
  ModelConfig m;
  m.word_dim = 100;
  m.chars = defaults(CharEncoderKind::cnn);
  EXPECT_EQ(m.representation_dim(), 130u);
  m.chars = defaults(CharEncoderKind::bilstm);
  m.chars.output_dim = 0;
  EXPECT_EQ(m.representation_dim(), 200u);
  m.chars = defaults(CharEncoderKind::none);
  EXPECT_EQ(m.representation_dim(), 100u);
  for (auto kind : kAllKinds) {
    std::mt19937_64 rng(8);
    ParameterStore store;
    auto cfg = tiny(kind);
    CharEncoder enc(cfg, 6, store, "char", rng);
    auto rows = enc.encode_words({{2}, {3, 4}, {5, 5, 5}});
    EXPECT_EQ(rows.shape(), (Shape{3, 3}));
    cfg.output_dim = 0;
    ParameterStore raw_store;
    CharEncoder raw(cfg, 6, raw_store, "char", rng);
    EXPECT_EQ(raw.encode(std::vector<std::size_t>{3}).cols(), cfg.raw_feature_dim());
  }
}

TEST(CharEncoder, ConfigErrors) {
  auto cfg = tiny(CharEncoderKind::transformer);
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(parse_char_encoder_kind("gru"), ConfigError);
  EXPECT_EQ(parse_char_encoder_kind("lstm"), CharEncoderKind::bilstm);
  std::mt19937_64 rng(1);
  ParameterStore store;
  CharEncoder none(defaults(CharEncoderKind::none), 6, store, "char", rng);
  EXPECT_EQ(store.size(), 0u);
  EXPECT_THROW(none.encode(std::vector<std::size_t>{1}), ContractError);
}
