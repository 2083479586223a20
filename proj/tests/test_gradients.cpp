#include <gtest/gtest.h>

#include "grad_suite.hpp"

class LayerGradients : public ::testing::TestWithParam<std::size_t> {};

TEST_P(LayerGradients, MatchFiniteDifferencesOnThreeSeeds) {
  const auto c = grad_suite::cases()[GetParam()];
  for (std::uint64_t seed : {1, 2, 3}) {
    auto r = grad_suite::run(c, seed);
    ASSERT_TRUE(r.screened) << c.layer << " seed " << seed << ": no well-conditioned draw";
    EXPECT_LT(r.worst, 1e-5) << c.layer << " seed " << seed << " worst input " << r.worst_input;
    EXPECT_LT(r.invariant_max, 1e-12) << c.layer << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(AllLayers, LayerGradients,
                         ::testing::Range<std::size_t>(0, grad_suite::cases().size()),
                         [](const auto& info) { return grad_suite::cases()[info.param].layer; });

TEST(GradSuite, ScreenRejectsTinyEntries) {
  grad_suite::Instance inst;
  auto x = tener::Tensor::from({2}, {1.0, 1e-6}, true);
  inst.inputs = {{"x", x}};
  inst.loss = [x] { return tener::sum(tener::mul(x, x)); };
  EXPECT_FALSE(grad_suite::well_conditioned(inst));
  x.data()[1] = 0;
  EXPECT_TRUE(grad_suite::well_conditioned(inst));
}
