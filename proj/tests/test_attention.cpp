#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "tener/attention.hpp"

using namespace tener;

namespace {

EncoderConfig small_config(AttentionMode mode, std::size_t heads = 2, std::size_t d_k = 4) {
  EncoderConfig cfg;
  cfg.mode = mode;
  cfg.n_heads = heads;
  cfg.d_k = d_k;
  cfg.d_model = heads * d_k;
  cfg.d_ff = 12;
  cfg.attn_dropout = 0;
  cfg.ffn_dropout = 0;
  cfg.max_len = 64;
  return cfg;
}

// Row-wise layer norm with unit gain and zero bias.
oracle::Matrix normalize(const oracle::Matrix& x, Scalar eps = 1e-5) {
  oracle::Matrix out = x;
  for (auto& row : out) {
    Scalar mu = 0, var = 0;
    for (auto v : row) mu += v;
    mu /= static_cast<Scalar>(row.size());
    for (auto v : row) var += (v - mu) * (v - mu);
    var /= static_cast<Scalar>(row.size());
    for (auto& v : row) v = (v - mu) / std::sqrt(var + eps);
  }
  return out;
}

oracle::Matrix softmax_rows(const oracle::Matrix& a, Scalar divisor = 1) {
  oracle::Matrix out = a;
  for (auto& row : out) {
    Scalar m = -INFINITY, s = 0;
    for (auto v : row) m = std::max(m, v / divisor);
    for (auto& v : row) s += (v = std::exp(v / divisor - m));
    for (auto& v : row) v /= s;
  }
  return out;
}

void expect_matrix_near(const Tensor& t, const oracle::Matrix& ref, Scalar tol) {
  ASSERT_EQ(t.rows(), ref.size());
  ASSERT_EQ(t.cols(), ref[0].size());
  for (std::size_t r = 0; r < ref.size(); ++r)
    for (std::size_t c = 0; c < ref[0].size(); ++c)
      EXPECT_NEAR(t.at(r, c), ref[r][c], tol) << "at (" << r << "," << c << ")";
}

struct Fixture {
  EncoderConfig cfg;
  ParameterStore store;
  LayerParams layer;
  explicit Fixture(EncoderConfig c, std::uint64_t seed = 5) : cfg(c) {
    std::mt19937_64 rng(seed);
    layer = make_layer_params(cfg, store, "l", rng);
    if (cfg.mode == AttentionMode::adapted) {
      auto vals = oracle::random_values(layer.attention.u.size() * 2, rng);
      std::copy(vals.begin(), vals.begin() + layer.attention.u.size(), layer.attention.u.data().begin());
      std::copy(vals.begin() + layer.attention.u.size(), vals.end(), layer.attention.v.data().begin());
    }
  }
};

}  // namespace

TEST(AdaptedScores, MatchTermByTermOracle) {
  for (std::uint64_t seed : {7, 3}) {
    std::mt19937_64 rng(seed);
    Fixture f(small_config(AttentionMode::adapted, 2, 4), seed);
    auto H = oracle::random_matrix(6, 8, rng);
    RelativeTable table(4, 10);
    auto scores = adapted_attention_scores(H, f.layer.attention, 2, table);
    auto ref = oracle::adapted_scores(oracle::rows_of(H), oracle::rows_of(f.layer.attention.query.weight),
                                      oracle::rows_of(f.layer.attention.u),
                                      oracle::rows_of(f.layer.attention.v), 2);
    for (std::size_t h = 0; h < 2; ++h) expect_matrix_near(scores[h], ref[h], 1e-12);
  }
}

TEST(AdaptedScores, RandomInstances) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::size_t> heads(1, 3), half(1, 4), len(1, 9);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = heads(rng), dk = 2 * half(rng), l = len(rng);
    Fixture f(small_config(AttentionMode::adapted, n, dk), static_cast<std::uint64_t>(trial));
    auto H = oracle::random_matrix(l, n * dk, rng, false, -2, 2);
    auto scores = adapted_attention_scores(H, f.layer.attention, n, *shared_relative_table(dk, 16));
    auto ref = oracle::adapted_scores(oracle::rows_of(H), oracle::rows_of(f.layer.attention.query.weight),
                                      oracle::rows_of(f.layer.attention.u),
                                      oracle::rows_of(f.layer.attention.v), n);
    for (std::size_t h = 0; h < n; ++h) expect_matrix_near(scores[h], ref[h], 1e-10);
  }
}

TEST(VanillaScores, MatchOracle) {
  std::mt19937_64 rng(4);
  Fixture f(small_config(AttentionMode::vanilla, 2, 3));
  auto H = oracle::random_matrix(5, 6, rng);
  auto scores = vanilla_attention_scores(H, f.layer.attention, 2);
  auto ref = oracle::vanilla_scores(oracle::rows_of(H), oracle::rows_of(f.layer.attention.query.weight),
                                    oracle::rows_of(f.layer.attention.key.weight), 2);
  for (std::size_t h = 0; h < 2; ++h) expect_matrix_near(scores[h], ref[h], 1e-12);
}

TEST(AdaptedScores, ZeroInputLeavesOnlyPositionBias) {
  Fixture f(small_config(AttentionMode::adapted, 1, 4));
  auto& v = f.layer.attention.v;
  std::fill(v.data().begin(), v.data().end(), 0.0);
  v.data()[0] = 1;  // picks the sin slot of the lowest frequency
  auto scores = adapted_attention_scores(Tensor::zeros({5, 4}), f.layer.attention, 1,
                                         RelativeTable(4, 4));
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t j = 0; j < 5; ++j) {
      const Scalar off = static_cast<Scalar>(t) - static_cast<Scalar>(j);
      EXPECT_NEAR(scores[0].at(t, j), std::sin(off), 1e-12);
      EXPECT_NEAR(scores[0].at(t, j), -scores[0].at(j, t), 1e-12);
    }
  EXPECT_GT(std::abs(scores[0].at(2, 1) - scores[0].at(2, 3)), 1.0);
}

TEST(AdaptedScores, ZeroBiasesLeaveContentAndPositionTerms) {
  std::mt19937_64 rng(21);
  Fixture f(small_config(AttentionMode::adapted, 2, 4));
  std::fill(f.layer.attention.u.data().begin(), f.layer.attention.u.data().end(), 0.0);
  std::fill(f.layer.attention.v.data().begin(), f.layer.attention.v.data().end(), 0.0);
  auto H = oracle::random_matrix(4, 8, rng);
  auto scores = adapted_attention_scores(H, f.layer.attention, 2, RelativeTable(4, 5));
  const auto Hm = oracle::rows_of(H);
  const auto Q = oracle::times(Hm, oracle::rows_of(f.layer.attention.query.weight));
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t j = 0; j < 4; ++j) {
        auto R = oracle::sincos(static_cast<Scalar>(t) - static_cast<Scalar>(j), 4);
        Scalar want = 0;
        for (std::size_t c = 0; c < 4; ++c) want += Q[t][h * 4 + c] * (Hm[j][h * 4 + c] + R[c]);
        EXPECT_NEAR(scores[h].at(t, j), want, 1e-12);
      }
}

TEST(AdaptedScores, SingleTokenAttendsToItself) {
  std::mt19937_64 rng(2);
  Fixture f(small_config(AttentionMode::adapted));
  auto H = oracle::random_matrix(1, 8, rng);
  auto scores = adapted_attention_scores(H, f.layer.attention, 2, RelativeTable(4, 1));
  for (const auto& s : scores) {
    ASSERT_EQ(s.shape(), (Shape{1, 1}));
    EXPECT_EQ(attention_weights(s, false, 4).item(), 1.0);
  }
}

TEST(AttentionApply, WorkedExample) {
  auto scores = Tensor::matrix(1, 2, {0, std::log(3.0)});
  auto values = Tensor::matrix(2, 1, {1, 2});
  EXPECT_NEAR(attention_apply(scores, values, false, 1).item(), 1.75, 1e-12);
}

TEST(AttentionApply, UniformScoresAverageValues) {
  std::mt19937_64 rng(8);
  auto values = oracle::random_matrix(5, 3, rng);
  auto out = attention_apply(Tensor::full({2, 5}, 0.7), values, true, 4);
  for (std::size_t c = 0; c < 3; ++c) {
    Scalar mean = 0;
    for (std::size_t r = 0; r < 5; ++r) mean += values.at(r, c) / 5;
    EXPECT_NEAR(out.at(0, c), mean, 1e-12);
    EXPECT_NEAR(out.at(1, c), mean, 1e-12);
  }
}

TEST(AttentionWeights, RowsSumToOneAndMaskedColumnsAreZero) {
  std::mt19937_64 rng(13);
  Fixture f(small_config(AttentionMode::adapted));
  auto H = oracle::random_matrix(6, 8, rng);
  Mask mask{true, true, true, true, false, false};
  for (bool scaled : {false, true}) {
    auto scores = adapted_attention_scores(H, f.layer.attention, 2, RelativeTable(4, 6), mask);
    for (const auto& s : scores) {
      auto w = attention_weights(s, scaled, 4);
      for (std::size_t r = 0; r < 6; ++r) {
        Scalar total = 0;
        for (std::size_t c = 0; c < 6; ++c) total += w.at(r, c);
        EXPECT_NEAR(total, 1, 1e-12);
        EXPECT_EQ(w.at(r, 4), 0);
        EXPECT_EQ(w.at(r, 5), 0);
      }
    }
  }
}

TEST(AttentionWeights, UnscaledIsSharper) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    auto scores = oracle::random_matrix(6, 6, rng, false, -3, 3);
    auto sharp = row_entropies(attention_weights(scores, false, 16));
    auto soft = row_entropies(attention_weights(scores, true, 16));
    for (std::size_t r = 0; r < 6; ++r) EXPECT_LT(sharp[r], soft[r]);
  }
}

TEST(AttentionWeights, EntropyOfUniformRow) {
  auto e = row_entropies(attention_weights(Tensor::zeros({1, 8}), false, 1));
  EXPECT_NEAR(e[0], std::log(8.0), 1e-12);
}

TEST(ParameterCounts, MatchClosedForms) {
  for (auto [n, dk] : std::vector<std::pair<std::size_t, std::size_t>>{{1, 4}, {4, 8}, {8, 16}}) {
    const std::size_t d = n * dk;
    Fixture v(small_config(AttentionMode::vanilla, n, dk));
    Fixture a(small_config(AttentionMode::adapted, n, dk));
    EXPECT_EQ(v.layer.attention.parameter_count(), n * (3 * d * dk) + d * d);
    EXPECT_EQ(a.layer.attention.parameter_count(), n * (2 * d * dk + 2 * dk));
    EXPECT_FALSE(a.layer.attention.key.weight.defined());
    EXPECT_FALSE(a.layer.attention.output.weight.defined());
  }
}

TEST(EncoderLayer, ZeroFeedForwardReducesToNormalizedAttention) {
  std::mt19937_64 rng(31);
  Fixture f(small_config(AttentionMode::adapted, 2, 4));
  for (auto* t : {&f.layer.ffn.outer.weight, &f.layer.ffn.outer.bias})
    std::fill(t->data().begin(), t->data().end(), 0.0);
  auto H = oracle::random_matrix(5, 8, rng);
  RelativeTable table(4, 8);
  auto out = transformer_layer(H, f.cfg, f.layer, &table);

  const auto Hm = oracle::rows_of(H);
  const auto scores = oracle::adapted_scores(Hm, oracle::rows_of(f.layer.attention.query.weight),
                                             oracle::rows_of(f.layer.attention.u),
                                             oracle::rows_of(f.layer.attention.v), 2);
  const auto V = oracle::times(Hm, oracle::rows_of(f.layer.attention.value.weight));
  oracle::Matrix sum = Hm;
  for (std::size_t h = 0; h < 2; ++h) {
    const auto w = softmax_rows(scores[h]);
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t j = 0; j < 5; ++j) sum[t][h * 4 + c] += w[t][j] * V[j][h * 4 + c];
  }
  expect_matrix_near(out, normalize(normalize(sum)), 1e-9);
}

TEST(EncoderLayer, VanillaMatchesOracleWithOutputProjection) {
  std::mt19937_64 rng(32);
  auto cfg = small_config(AttentionMode::vanilla, 2, 3);
  cfg.scaled = true;
  Fixture f(cfg);
  for (auto* t : {&f.layer.ffn.outer.weight, &f.layer.ffn.outer.bias})
    std::fill(t->data().begin(), t->data().end(), 0.0);
  auto H = oracle::random_matrix(4, 6, rng);
  auto out = transformer_layer(H, f.cfg, f.layer, nullptr);

  const auto Hm = oracle::rows_of(H);
  const auto& a = f.layer.attention;
  const auto scores = oracle::vanilla_scores(Hm, oracle::rows_of(a.query.weight), oracle::rows_of(a.key.weight), 2);
  const auto V = oracle::times(Hm, oracle::rows_of(a.value.weight));
  oracle::Matrix cat(4, std::vector<Scalar>(6, 0));
  for (std::size_t h = 0; h < 2; ++h) {
    const auto w = softmax_rows(scores[h], std::sqrt(3.0));
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t j = 0; j < 4; ++j) cat[t][h * 3 + c] += w[t][j] * V[j][h * 3 + c];
  }
  auto projected = oracle::times(cat, oracle::rows_of(a.output.weight));
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t c = 0; c < 6; ++c) projected[t][c] += Hm[t][c];
  expect_matrix_near(out, normalize(normalize(projected)), 1e-9);
}

TEST(Encoder, OutputShapesAcrossConfigurations) {
  std::mt19937_64 rng(40);
  for (auto mode : {AttentionMode::vanilla, AttentionMode::adapted})
    for (bool scaled : {false, true})
      for (std::size_t layers : {1, 2})
        for (std::size_t l : {1, 3, 17}) {
          auto cfg = small_config(mode, 4, 2);
          cfg.scaled = scaled;
          cfg.n_layers = layers;
          ParameterStore store;
          TransformerEncoder enc(cfg, store, "enc", rng);
          auto out = enc.encode(oracle::random_matrix(l, 8, rng));
          EXPECT_EQ(out.shape(), (Shape{l, 8}));
          EXPECT_EQ(enc.attention_logits(oracle::random_matrix(l, 8, rng)).size(), layers);
        }
}

TEST(Encoder, ConfigurationErrors) {
  auto cfg = small_config(AttentionMode::adapted, 3, 4);
  cfg.d_model = 13;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_config(AttentionMode::adapted, 2, 3);
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(parse_attention_mode("lstm"), ConfigError);
  EXPECT_EQ(parse_attention_mode("transformer"), AttentionMode::vanilla);

  std::mt19937_64 rng(1);
  ParameterStore store;
  auto c = small_config(AttentionMode::adapted);
  c.max_len = 4;
  TransformerEncoder enc(c, store, "enc", rng);
  EXPECT_THROW(enc.encode(Tensor::zeros({5, 8})), ConfigError);
  EXPECT_THROW(enc.encode(Tensor::zeros({3, 6})), ShapeError);
}

TEST(Encoder, NoLayersIsIdentityForAdapted) {
  std::mt19937_64 rng(41);
  auto cfg = small_config(AttentionMode::adapted);
  cfg.n_layers = 0;
  ParameterStore store;
  TransformerEncoder enc(cfg, store, "enc", rng);
  EXPECT_EQ(store.size(), 0u);
  auto x = oracle::random_matrix(4, 8, rng);
  auto y = enc.encode(x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Encoder, PaddingDoesNotChangeValidRows) {
  std::mt19937_64 rng(42);
  for (auto mode : {AttentionMode::vanilla, AttentionMode::adapted}) {
    auto cfg = small_config(mode);
    cfg.n_layers = 2;
    ParameterStore store;
    TransformerEncoder enc(cfg, store, "enc", rng);
    auto x = oracle::random_matrix(5, 8, rng);
    auto padded = concat({x, oracle::random_matrix(3, 8, rng, false, -9, 9)}, 0);
    auto a = enc.encode(x);
    auto b = enc.encode(padded, Mask{true, true, true, true, true, false, false, false});
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(a.at(r, c), b.at(r, c), 1e-12);
  }
}

TEST(Encoder, MaskMustBeValidPrefix) {
  std::mt19937_64 rng(43);
  ParameterStore store;
  TransformerEncoder enc(small_config(AttentionMode::adapted), store, "enc", rng);
  EXPECT_THROW(enc.encode(Tensor::zeros({3, 8}), Mask{true, false, true}), ContractError);
  EXPECT_THROW(enc.encode(Tensor::zeros({3, 8}), Mask{true, true}), ShapeError);
}

TEST(Encoder, AdaptedDistinguishesLeftFromRight) {
  // Two tokens swapped in order: a layer that only saw distances would map
  // the reversed input to the reversed output.
  std::mt19937_64 rng(44);
  ParameterStore store;
  auto cfg = small_config(AttentionMode::adapted);
  TransformerEncoder enc(cfg, store, "enc", rng);
  auto& v = enc.layers()[0].attention.v;
  for (auto& x : v.data()) x = 1;
  auto x = oracle::random_matrix(2, 8, rng);
  auto rev = concat({slice(x, 0, 1, 1), slice(x, 0, 0, 1)}, 0);
  auto a = enc.encode(x), b = enc.encode(rev);
  Scalar diff = 0;
  for (std::size_t c = 0; c < 8; ++c) diff = std::max(diff, std::abs(a.at(0, c) - b.at(1, c)));
  EXPECT_GT(diff, 1e-3);
}

TEST(EncoderLayer, GradientsMatchFiniteDifferences) {
  for (auto mode : {AttentionMode::vanilla, AttentionMode::adapted})
    for (std::uint64_t seed : {1, 2, 3}) {
      std::mt19937_64 rng(seed);
      auto cfg = small_config(mode, 2, 2);
      cfg.scaled = seed == 2;
      cfg.projection_bias = true;
      Fixture f(cfg, seed);
      auto H = oracle::random_matrix(3, 4, rng);
      auto probe = oracle::random_matrix(3, 4, rng);
      RelativeTable table(2, 4);
      const RelativeTable* tp = mode == AttentionMode::adapted ? &table : nullptr;
      auto loss = [&](const Tensor&) { return sum(mul(transformer_layer(H, cfg, f.layer, tp), probe)); };
      for (auto& [name, p] : f.store) {
        if (name.ends_with("key.bias")) {
          // A shared key offset moves each score row by a constant.
          f.store.zero_grad();
          backward(loss(p));
          for (auto g : p.grad()) EXPECT_NEAR(g, 0, 1e-12) << name;
          continue;
        }
        EXPECT_LT(grad_check(loss, p), 1e-5) << to_string(mode) << " " << name;
      }
      auto Hg = oracle::random_matrix(3, 4, rng, true);
      EXPECT_LT(grad_check([&](const Tensor& x) { return sum(mul(transformer_layer(x, cfg, f.layer, tp), probe)); }, Hg),
                1e-5);
    }
}
