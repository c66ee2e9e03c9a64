#include <gtest/gtest.h>

#include "priorfuse/fidelity/analyzer.hpp"
#include "support/images.hpp"

using namespace priorfuse;
using namespace priorfuse::fidelity;
using test_support::circular_shift;
using test_support::random_image;
using test_support::textured_image;

TEST(AspectRatioDrift, Examples) {
  EXPECT_EQ(aspect_ratio_drift({400, 600}, {400, 600}), 0.0);
  EXPECT_NEAR(aspect_ratio_drift({400, 600}, {600, 600}), 1.0 / 3.0, 1e-4);
  EXPECT_NEAR(aspect_ratio_drift({1024, 1024}, {1024, 1536}), 0.5, 1e-12);
  for (int k : {2, 3, 7}) EXPECT_EQ(aspect_ratio_drift({300, 500}, {300 * k, 500 * k}), 0.0);
  EXPECT_THROW(aspect_ratio_drift({0, 5}, {5, 5}), InvalidArgument);
}

TEST(GlobalShift, IdentityHasHighConfidence) {
  Rng rng(1);
  auto a = textured_image(64, 64, rng);
  auto s = estimate_global_shift(a, a);
  EXPECT_EQ(s.dy, 0);
  EXPECT_EQ(s.dx, 0);
  EXPECT_GT(s.confidence, 0.9);
}

TEST(GlobalShift, RecoversCircularShiftsAndIsAntisymmetric) {
  Rng rng(2);
  auto a = textured_image(64, 80, rng);
  for (auto [dy, dx] : {std::pair{5, 3}, {-7, 10}, {0, -4}, {10, -10}}) {
    auto b = circular_shift(a, dy, dx);
    auto s = estimate_global_shift(a, b);
    EXPECT_EQ(s.dy, dy);
    EXPECT_EQ(s.dx, dx);
    auto t = estimate_global_shift(b, a);
    EXPECT_EQ(t.dy, -dy);
    EXPECT_EQ(t.dx, -dx);
  }
}

TEST(GlobalShift, IndependentNoiseHasLowConfidence) {
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    auto s = estimate_global_shift(random_image(64, 64, 3, rng), random_image(64, 64, 3, rng));
    EXPECT_LT(s.confidence, 0.1);
  }
}

TEST(GlobalShift, ConstantImagesGiveZero) {
  Rng rng(4);
  auto s = estimate_global_shift(ImageBuffer(16, 16, 3, 0.4f), random_image(16, 16, 3, rng));
  EXPECT_EQ(s.dy, 0);
  EXPECT_EQ(s.dx, 0);
  EXPECT_EQ(s.confidence, 0.0);
  EXPECT_THROW(estimate_global_shift(ImageBuffer(16, 16, 3), ImageBuffer(16, 17, 3)), DimensionMismatch);
}

TEST(DivergenceFlag, TruthTable) {
  EXPECT_TRUE(divergence_flag(12.89, 21.58, 0.8, 0.4));
  EXPECT_FALSE(divergence_flag(25, 20, 0.8, 0.4));
  EXPECT_FALSE(divergence_flag(12, 20, 0.3, 0.4));
  EXPECT_FALSE(divergence_flag(25, 20, 0.3, 0.4));
}

TEST(Analyze, CombinesDetectors) {
  Rng rng(5);
  auto a = textured_image(64, 64, rng);
  auto b = circular_shift(a, 2, -3);
  AnalysisInput in;
  in.input_dims = {400, 600};
  in.raw_prior_dims = {600, 600};
  in.reference = &a;
  in.prior = &b;
  in.psnr_prior_vs_gt = 12.89;
  in.psnr_degraded_vs_gt = 21.58;
  in.iqa_prior = 0.8;
  in.iqa_degraded = 0.4;
  auto rep = analyze(in);
  EXPECT_NEAR(rep.aspect_ratio_delta, 1.0 / 3.0, 1e-9);
  EXPECT_EQ(rep.translation.dy, 2);
  EXPECT_EQ(rep.translation.dx, -3);
  EXPECT_TRUE(rep.divergence_flag);
  EXPECT_NE(rep.notes.find("aspect ratio"), std::string::npos);
}
