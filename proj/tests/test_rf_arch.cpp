#include <gtest/gtest.h>

#include <cmath>

#include "spyr/arch.hpp"
#include "spyr/rf.hpp"

using namespace spyr;

namespace {

std::vector<LayerSpec> random_conv_chain(Rng& rng, std::size_t max_len) {
  std::vector<LayerSpec> chain;
  const std::size_t len = 1 + rng.below(max_len);
  int total_stride = 1;
  for (std::size_t i = 0; i < len; ++i) {
    const int k = 1 + 2 * static_cast<int>(rng.below(4));
    int s = rng.below(3) == 0 ? 2 : 1;
    if (total_stride >= 4) s = 1;
    total_stride *= s;
    chain.push_back(LayerSpec::conv(k, s, 1));
  }
  return chain;
}

}  // namespace

TEST(ReceptiveField, SingleConv3) {
  const std::vector<LayerSpec> c = {LayerSpec::conv(3, 1, 8)};
  const auto rep = compute_rf(c);
  EXPECT_EQ(rep.final_rf(), (Fraction{3, 1}));
  EXPECT_EQ(rep.final_jump(), (Fraction{1, 1}));
}

TEST(ReceptiveField, TwoConv3) {
  const std::vector<LayerSpec> c = {LayerSpec::conv(3, 1, 8), LayerSpec::conv(3, 1, 8)};
  EXPECT_EQ(compute_rf(c).final_rf(), (Fraction{5, 1}));
}

TEST(ReceptiveField, StridedThenConv) {
  const std::vector<LayerSpec> c = {LayerSpec::conv(3, 2, 8), LayerSpec::conv(3, 1, 8)};
  const auto rep = compute_rf(c);
  EXPECT_EQ(rep.rf[0], (Fraction{3, 1}));
  EXPECT_EQ(rep.final_rf(), (Fraction{7, 1}));
  EXPECT_EQ(rep.final_jump(), (Fraction{2, 1}));
}

TEST(ReceptiveField, TapChangesNothing) {
  const std::vector<LayerSpec> a = {LayerSpec::conv(5, 2, 4), LayerSpec::conv(3, 1, 4)};
  const std::vector<LayerSpec> b = {LayerSpec::conv(5, 2, 4), LayerSpec::tap(), LayerSpec::conv(3, 1, 4), LayerSpec::tap()};
  EXPECT_EQ(compute_rf(a).final_rf(), compute_rf(b).final_rf());
}

TEST(ReceptiveField, UpsampleHalvesJump) {
  const std::vector<LayerSpec> c = {LayerSpec::conv(3, 2, 4), LayerSpec::up2()};
  const auto rep = compute_rf(c);
  EXPECT_EQ(rep.final_jump(), (Fraction{1, 1}));
  EXPECT_EQ(rep.final_rf(), (Fraction{5, 1}));
  const std::vector<LayerSpec> frac = {LayerSpec::up2()};
  EXPECT_EQ(compute_rf(frac).final_jump(), (Fraction{1, 2}));
}

TEST(ReceptiveField, EmptyChainRejected) {
  try {
    compute_rf({});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "empty_chain");
  }
}

TEST(ReceptiveField, InvalidLayerRejected) {
  const std::vector<LayerSpec> even = {LayerSpec{LayerKind::conv, 4, 1, 2, 1, PostOp::none}};
  EXPECT_THROW(compute_rf(even), Error);
  const std::vector<LayerSpec> wide_pad = {LayerSpec{LayerKind::conv, 3, 1, 2, 1, PostOp::none}};
  EXPECT_THROW(compute_rf(wide_pad), Error);
}

TEST(ReceptiveField, DefaultBranchesMatchFootprints) {
  const ArchSpec a = default_arch();
  const std::vector<std::int64_t> expected = {53, 69, 85};
  for (std::size_t k = 0; k < a.num_branches(); ++k) {
    const auto chain = branch_chain(a, k);
    const auto rf = compute_rf(chain).final_rf();
    EXPECT_EQ(rf, (Fraction{expected[k], 1})) << "branch " << k;
    const auto fp = rf_footprint_oracle(chain, oracle_input_size(chain));
    EXPECT_FALSE(fp.clipped);
    EXPECT_EQ(fp.height, static_cast<std::size_t>(expected[k]));
    EXPECT_EQ(fp.width, static_cast<std::size_t>(expected[k]));
  }
}

TEST(ReceptiveFieldProperty, ConvChainsAgreeWithFootprint) {
  Rng rng(101);
  for (int trial = 0; trial < 60; ++trial) {
    const auto chain = random_conv_chain(rng, 6);
    const auto rep = compute_rf(chain);
    ASSERT_TRUE(rep.final_rf().is_integer());
    const auto fp = rf_footprint_oracle(chain, oracle_input_size(chain), 1000 + trial);
    ASSERT_FALSE(fp.clipped) << format_chain(chain);
    EXPECT_EQ(static_cast<std::int64_t>(fp.height), rep.final_rf().num) << format_chain(chain);
    EXPECT_EQ(static_cast<std::int64_t>(fp.width), rep.final_rf().num) << format_chain(chain);
  }
}

TEST(ReceptiveFieldProperty, JumpIsProductOfStrides) {
  Rng rng(102);
  for (int trial = 0; trial < 200; ++trial) {
    const auto chain = random_conv_chain(rng, 8);
    std::int64_t prod = 1;
    for (const auto& l : chain) prod *= l.stride;
    EXPECT_EQ(compute_rf(chain).final_jump(), (Fraction{prod, 1}));
  }
}

TEST(ReceptiveFieldProperty, AppendingAKernelAboveOneGrowsTheField) {
  Rng rng(103);
  for (int trial = 0; trial < 200; ++trial) {
    auto chain = random_conv_chain(rng, 6);
    const auto before = compute_rf(chain).final_rf();
    chain.push_back(LayerSpec::conv(3 + 2 * static_cast<int>(rng.below(3)), 1, 1));
    const auto after = compute_rf(chain).final_rf();
    EXPECT_TRUE(before <= after && !(before == after));
    chain.push_back(LayerSpec::conv(1, 1, 1));
    EXPECT_EQ(compute_rf(chain).final_rf(), after);
  }
}

TEST(ReceptiveFieldProperty, UpsampledChainsStayWithinOnePixel) {
  // Bilinear taps land between input pixels, so a footprint measured on the
  // integer grid can only differ from the fractional field by under one pixel.
  Rng rng(104);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<LayerSpec> chain = {LayerSpec::conv(3, 2, 1)};
    auto tail = random_conv_chain(rng, 3);
    chain.insert(chain.end(), tail.begin(), tail.end());
    chain.push_back(LayerSpec::up2());
    chain.push_back(LayerSpec::conv(3, 1, 1));
    const double r = compute_rf(chain).final_rf().value();
    const auto fp = rf_footprint_oracle(chain, oracle_input_size(chain), 7 + trial);
    ASSERT_FALSE(fp.clipped);
    EXPECT_LE(std::abs(static_cast<double>(fp.height) - r), 1.0) << format_chain(chain);
    EXPECT_LE(std::abs(static_cast<double>(fp.width) - r), 1.0) << format_chain(chain);
  }
}

// ---------------------------------------------------------------- arch text and pyramid

TEST(Arch, LayerTokensRoundTrip) {
  for (const char* tok : {"conv9x9/s1/c16", "conv3x3/s2/c32", "conv3x3/s1/c3+sigmoid", "conv5x5/s1/c4/p1+none", "up2", "tap"}) {
    EXPECT_EQ(format_layer(parse_layer(tok)), tok);
  }
  EXPECT_THROW(parse_layer("conv3x5/s1/c4"), Error);
  EXPECT_THROW(parse_layer("pool2"), Error);
  EXPECT_THROW(parse_layer("conv3x3/s1/c4+gelu"), Error);
}

TEST(Arch, KeyValueRoundTrip) {
  ArchSpec a = default_arch();
  a.branch_scales = {40, 80, 160};
  EXPECT_EQ(arch_from_kv(arch_to_kv(a)), a);
}

TEST(Arch, DefaultIsValid) {
  EXPECT_NO_THROW(check_arch(default_arch()));
  EXPECT_EQ(encoder_stride(default_arch()), 4);
}

TEST(Arch, NonIncreasingPyramidRejected) {
  ArchSpec a = default_arch();
  a.branches[1] = {LayerSpec::tap()};
  const auto rep = validate_pyramid(a);
  EXPECT_FALSE(rep.ok);
  ASSERT_EQ(rep.violations.size(), 1u);
  EXPECT_THROW(check_arch(a), Error);
}

TEST(Arch, ScaleCountMismatchRejected) {
  ArchSpec a = default_arch();
  a.branch_scales.pop_back();
  EXPECT_THROW(check_arch(a), Error);
}

TEST(IncrementalPlan, AppendsOneConvAfterLastBranch) {
  const ArchSpec a = default_arch();
  const auto plan = plan_incremental_branch(a, 192);
  EXPECT_EQ(plan.attach_after, 2u);
  ASSERT_EQ(plan.layers.size(), 1u);
  EXPECT_EQ(plan.new_rf, (Fraction{93, 1}));
  const ArchSpec b = apply_plan(a, plan, 192);
  EXPECT_EQ(b.num_branches(), 4u);
  EXPECT_NO_THROW(check_arch(b));
  EXPECT_EQ(validate_pyramid(b).branch_rf.back(), plan.new_rf);
}

TEST(IncrementalPlan, ScaleNotAboveTopRejected) {
  for (double s : {144.0, 100.0, 10.0}) {
    try {
      plan_incremental_branch(default_arch(), s);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), "rejected_scale");
    }
  }
}

TEST(Footprint, SingleConvOnNineByNine) {
  const std::vector<LayerSpec> c = {LayerSpec::conv(3, 1, 1)};
  const auto fp = rf_footprint_oracle(c, 9);
  EXPECT_EQ(fp.height, 3u);
  EXPECT_EQ(fp.width, 3u);
  EXPECT_EQ(fp.nonzero, 9u);
  EXPECT_FALSE(fp.clipped);
}

TEST(Footprint, TapOnlyChainIsOnePixel) {
  const std::vector<LayerSpec> c = {LayerSpec::tap()};
  const auto fp = rf_footprint_oracle(c, 9);
  EXPECT_EQ(fp.height, 1u);
  EXPECT_EQ(fp.width, 1u);
}

TEST(Footprint, SmallInputIsFlaggedAsClipped) {
  const std::vector<LayerSpec> c = {LayerSpec::conv(9, 1, 1), LayerSpec::conv(9, 1, 1)};
  EXPECT_TRUE(rf_footprint_oracle(c, 13).clipped);
}

TEST(ReceptiveField, OrderOfStridesMatters) {
  const std::vector<LayerSpec> a = {LayerSpec::conv(3, 2, 1), LayerSpec::conv(5, 1, 1)};
  const std::vector<LayerSpec> b = {LayerSpec::conv(3, 1, 1), LayerSpec::conv(5, 2, 1)};
  EXPECT_EQ(compute_rf(a).final_rf(), (Fraction{11, 1}));
  EXPECT_EQ(compute_rf(b).final_rf(), (Fraction{7, 1}));
  EXPECT_EQ(compute_rf(a).final_jump(), compute_rf(b).final_jump());
}

TEST(Arch, OneByOneBranchBreaksPyramid) {
  for (std::size_t b = 1; b < 3; ++b) {
    ArchSpec a = default_arch();
    a.branches[b] = {LayerSpec::conv(1, 1, 48), LayerSpec::conv(1, 1, 48)};
    EXPECT_FALSE(validate_pyramid(a).ok) << "branch " << b;
  }
}

TEST(Arch, SingleBranchIsTriviallyValid) {
  ArchSpec a = default_arch();
  a.branches.resize(1);
  a.branch_scales = {96};
  EXPECT_TRUE(validate_pyramid(a).ok);
  EXPECT_NO_THROW(check_arch(a));
}
