#include <gtest/gtest.h>

#include <cmath>

#include "priorfuse/nn/adam.hpp"
#include "priorfuse/nn/archive.hpp"
#include "priorfuse/nn/ops.hpp"
#include "support/gradcheck.hpp"

using namespace priorfuse;
using nn::Var;
using test_support::grad_check;
using test_support::probe_loss;
using test_support::random_leaf;

namespace {

constexpr double kRelTol = 1e-6;

}  // namespace

TEST(ReflectIndex, FoldsBothSides) {
  EXPECT_EQ(nn::detail::reflect_index(-1, 5), 1);
  EXPECT_EQ(nn::detail::reflect_index(-2, 5), 2);
  EXPECT_EQ(nn::detail::reflect_index(5, 5), 3);
  EXPECT_EQ(nn::detail::reflect_index(8, 5), 0);
  EXPECT_EQ(nn::detail::reflect_index(9, 5), 1);
  EXPECT_EQ(nn::detail::reflect_index(3, 1), 0);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  Rng rng(1);
  auto x = random_leaf({3, 7, 6}, rng);
  auto w = random_leaf({4, 3, 3, 3}, rng);
  auto b = random_leaf({4}, rng);
  for (int dilation : {1, 2}) {
    auto r = grad_check([&] { return probe_loss(nn::conv2d(x, w, &b, dilation)); }, {x, w, b});
    EXPECT_LT(r.max_rel_error, kRelTol) << "dilation " << dilation;
  }
  auto w1 = random_leaf({5, 3, 1, 1}, rng);
  auto r = grad_check([&] { return probe_loss(nn::conv2d_valid(x, w1, nullptr)); }, {x, w1});
  EXPECT_LT(r.max_rel_error, kRelTol);
}

TEST(Conv2d, MatchesDirectSum) {
  Rng rng(2);
  auto x = random_leaf({2, 5, 5}, rng);
  auto w = random_leaf({3, 2, 3, 3}, rng);
  auto y = nn::conv2d_valid(x, w, nullptr);
  ASSERT_EQ(y.shape(), (nn::Shape{3, 3, 3}));
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int c = 0; c < 2; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx)
              s += w.value()[((o * 2 + c) * 3 + ky) * 3 + kx] * x.value()[(c * 5 + i + ky) * 5 + j + kx];
        EXPECT_NEAR(y.value()[(o * 3 + i) * 3 + j], s, 1e-12);
      }
}

TEST(DepthwiseConv, GradientsMatchFiniteDifferences) {
  Rng rng(3);
  auto x = random_leaf({4, 6, 5}, rng);
  auto w = random_leaf({4, 1, 3, 3}, rng);
  auto r = grad_check([&] { return probe_loss(nn::depthwise_conv2d(x, w)); }, {x, w});
  EXPECT_LT(r.max_rel_error, kRelTol);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  Rng rng(4);
  auto a = random_leaf({2, 4, 4}, rng, -2.0, 2.0);
  auto b = random_leaf({2, 4, 4}, rng, -2.0, 2.0);
  auto f = [&] {
    auto y = nn::add(nn::mul(nn::gelu(a), nn::tanh(b)), nn::scale(nn::sigmoid(nn::leaky_relu(a)), 0.7));
    return probe_loss(y);
  };
  EXPECT_LT(grad_check(f, {a, b}).max_rel_error, kRelTol);
}

TEST(LayerNorm, GradientsMatchFiniteDifferences) {
  Rng rng(5);
  auto x = random_leaf({5, 3, 4}, rng);
  auto w = random_leaf({5}, rng);
  auto b = random_leaf({5}, rng);
  auto r = grad_check([&] { return probe_loss(nn::layer_norm_channels(x, w, b)); }, {x, w, b});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(ChannelAttention, GradientsMatchFiniteDifferences) {
  Rng rng(6);
  auto q = random_leaf({4, 3, 3}, rng);
  auto k = random_leaf({4, 3, 3}, rng);
  auto v = random_leaf({4, 3, 3}, rng);
  auto t = random_leaf({2}, rng, 0.5, 1.5);
  auto r = grad_check([&] { return probe_loss(nn::channel_attention(q, k, v, t, 2)); }, {q, k, v, t});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(ChannelAttention, RowsOfAttentionSumToOne) {
  // With v constant along channels the output equals v (convex combination).
  Rng rng(7);
  auto q = random_leaf({3, 2, 2}, rng);
  auto k = random_leaf({3, 2, 2}, rng);
  std::vector<double> vv(12);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 4; ++i) vv[c * 4 + i] = 0.1 * (i + 1);
  auto v = Var<double>::constant({3, 2, 2}, vv);
  auto t = Var<double>::constant({1}, {2.0});
  auto y = nn::channel_attention(q, k, v, t, 1);
  for (std::size_t i = 0; i < vv.size(); ++i) EXPECT_NEAR(y.value()[i], vv[i], 1e-12);
}

TEST(PixelShuffle, IsInverseOfUnshuffle) {
  Rng rng(8);
  auto x = random_leaf({3, 4, 6}, rng);
  auto y = nn::pixel_shuffle(nn::pixel_unshuffle(x, 2), 2);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.value()[i], x.value()[i]);
  auto down = nn::pixel_unshuffle(x, 2);
  EXPECT_EQ(down.shape(), (nn::Shape{12, 2, 3}));
  // channel c*4 + i*2 + j holds x[c, 2y+i, 2x+j]
  EXPECT_EQ(down.value()[(1 * 4 + 1 * 2 + 0) * 6 + 1 * 3 + 2], x.value()[(1 * 4 + 3) * 6 + 4]);
  auto r = grad_check([&] { return probe_loss(nn::pixel_shuffle(nn::pixel_unshuffle(x, 2), 2)); }, {x});
  EXPECT_LT(r.max_rel_error, kRelTol);
}

TEST(ChannelPlumbing, GradientsMatchFiniteDifferences) {
  Rng rng(9);
  auto a = random_leaf({2, 5, 5}, rng);
  auto b = random_leaf({3, 5, 5}, rng);
  auto f = [&] {
    auto cat = nn::concat_channels<double>({a, b});
    auto s = nn::slice_channels(cat, 1, 3);
    return probe_loss(nn::crop_spatial(nn::pad_reflect(s, 1, 2, 2, 1), 6, 7));
  };
  EXPECT_LT(grad_check(f, {a, b}).max_rel_error, kRelTol);
}

TEST(DeformGather, GradientsMatchFiniteDifferences) {
  Rng rng(10);
  auto x = random_leaf({2, 6, 6}, rng);
  // Non-integer offsets keep finite differences away from bilinear kinks.
  auto off = random_leaf({18, 6, 6}, rng, -2.7, 2.7);
  for (auto& v : off.mutable_value()) {
    if (std::abs(v - std::round(v)) < 0.05) v += 0.11;
  }
  auto mod = random_leaf({9, 6, 6}, rng, 0.0, 1.0);
  auto r = grad_check([&] { return probe_loss(nn::deform_gather(x, off, &mod, 9)); }, {x, off, mod}, 1e-6, 1e-6, 200);
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(DeformGather, ZeroOffsetsReproduceNeighbourhood) {
  Rng rng(11);
  auto x = random_leaf({1, 5, 5}, rng);
  auto off = Var<double>::zeros({18, 5, 5});
  auto y = nn::deform_gather(x, off, nullptr, 9);
  // centre tap (k=4) equals x, tap (ky=1,kx=2) equals x shifted by +1 in x
  for (int i = 0; i < 25; ++i) EXPECT_EQ(y.value()[4 * 25 + i], x.value()[i]);
  EXPECT_EQ(y.value()[5 * 25 + 2 * 5 + 1], x.value()[2 * 5 + 2]);
}

TEST(Charbonnier, ValueAndGradient) {
  auto p = Var<double>::parameter({1, 2, 2}, {0.1, 0.2, 0.3, 0.4});
  auto t = Var<double>::constant({1, 2, 2}, {0.0, 0.2, 0.5, 0.3});
  auto r = grad_check([&] { return nn::charbonnier(p, t, 1e-3); }, {p});
  EXPECT_LT(r.max_rel_error, kRelTol);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  nn::ParamStore<float> store;
  store.add("w", {3}, {1.0f, -2.0f, 0.5f});
  store.get_mutable("w").node()->grad_buffer();  // zero gradient
  nn::Adam<float> adam(store);
  for (int i = 0; i < 5; ++i) adam.step(store, 1e-2);
  auto v = store.get("w").value();
  EXPECT_EQ(v[0], 1.0f);
  EXPECT_EQ(v[1], -2.0f);
  EXPECT_EQ(v[2], 0.5f);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  nn::ParamStore<double> store;
  store.add("w", {2}, {1.0, 1.0});
  auto g = store.get_mutable("w").node()->grad_buffer();
  g[0] = 3.0;
  g[1] = -0.5;
  nn::Adam<double> adam(store);
  adam.step(store, 0.1);
  // m_hat / sqrt(v_hat) = sign(g) on the first step
  EXPECT_NEAR(store.get("w").value()[0], 0.9, 1e-7);
  EXPECT_NEAR(store.get("w").value()[1], 1.1, 1e-7);
}

TEST(Archive, RoundTripsBitExactly) {
  nn::Archive a;
  std::vector<float> f{1.5f, -0.25f, 3.0e-8f, 7.0f};
  std::vector<double> d{0.1, 0.2};
  a.put<float>("align.mix.weight", {2, 2}, f);
  a.put<double>("adam.m.x", {2}, d);
  a.meta["iteration"] = 17;
  const auto path = std::filesystem::temp_directory_path() / "pf_archive_test.bin";
  nn::write_archive(a, path);
  auto b = nn::read_archive(path);
  EXPECT_EQ(b.get<float>("align.mix.weight", {2, 2}), f);
  EXPECT_EQ(b.get<double>("adam.m.x", {2}), d);
  EXPECT_EQ(b.meta["iteration"], 17);
  EXPECT_THROW(b.get<float>("align.mix.weight", {4}), DimensionMismatch);
  EXPECT_THROW(b.get<float>("missing", {1}), IoError);
  std::filesystem::remove(path);
}

TEST(GradMode, NoGradSkipsGraph) {
  auto a = Var<double>::parameter({2}, {1.0, 2.0});
  nn::NoGradGuard guard;
  auto y = nn::scale(a, 2.0);
  EXPECT_FALSE(y.requires_grad());
}
