#include <gtest/gtest.h>

#include <set>

#include "priorfuse/backbone/backbone.hpp"
#include "support/gradcheck.hpp"
#include "support/images.hpp"

using namespace priorfuse;
using backbone::BackboneKind;
using backbone::BackboneSpec;
using backbone::Fusion;
using nn::Var;
using test_support::random_image;

namespace {

// Hand count of the Restormer-tiny layer list: bias-free convs, two
// LayerNorms and a per-head temperature per block.
std::size_t restormer_block_params(std::size_t c, std::size_t heads) {
  const std::size_t hidden = static_cast<std::size_t>(static_cast<double>(c) * 2.66);
  const std::size_t norms = 2 * (2 * c);
  const std::size_t attn = 3 * c * c + 3 * c * 9 + heads + c * c;
  const std::size_t ffn = 2 * hidden * c + 2 * hidden * 9 + c * hidden;
  return norms + attn + ffn;
}

std::size_t restormer_w16_param_oracle() {
  std::size_t n = 0;
  n += 16 * 3 * 9;  // embed
  n += 16 * 16;     // fuse
  n += restormer_block_params(16, 1) + restormer_block_params(32, 2) + restormer_block_params(64, 4) +
       restormer_block_params(128, 8);
  n += 8 * 16 * 9 + 16 * 32 * 9 + 32 * 64 * 9;            // down1..3
  n += 256 * 128 * 9 + 128 * 64 * 9 + 64 * 32 * 9;       // up3..1
  n += 64 * 128 + 32 * 64;                               // reduce3, reduce2
  n += restormer_block_params(64, 4) + restormer_block_params(32, 2) + restormer_block_params(32, 1);  // dec3..1
  n += restormer_block_params(32, 1);                    // refine
  n += 3 * 32 * 9;                                       // output
  return n;
}

BackboneSpec small_spec(Fusion fusion = Fusion::none, int prior_channels = 0) {
  BackboneSpec s;
  s.width = 8;
  s.depth = {1, 1};
  s.downsample_factor = 2;
  s.fusion = fusion;
  s.prior_channels = prior_channels;
  return s;
}

}  // namespace

TEST(BackboneSpec, ValidationAndJson) {
  BackboneSpec s;
  EXPECT_NO_THROW(s.validate());
  auto back = BackboneSpec::from_json(s.to_json());
  EXPECT_EQ(back.to_json(), s.to_json());
  s.width = 6;
  EXPECT_THROW(s.validate(), InvalidArgument);
  s = {};
  s.downsample_factor = 4;
  EXPECT_THROW(s.validate(), InvalidArgument);
  s = {};
  s.fusion = Fusion::prior_concat;
  EXPECT_THROW(s.validate(), InvalidArgument);
}

TEST(BuildBackbone, ParameterCountMatchesClosedForm) {
  auto net = backbone::build_backbone<float>(BackboneSpec{}, RandomSeed{1});
  EXPECT_EQ(net->parameter_count(), restormer_w16_param_oracle());
}

TEST(BuildBackbone, SameSeedSameWeights) {
  auto a = backbone::build_backbone<float>(BackboneSpec{}, RandomSeed{5});
  auto b = backbone::build_backbone<float>(BackboneSpec{}, RandomSeed{5});
  auto c = backbone::build_backbone<float>(BackboneSpec{}, RandomSeed{6});
  bool any_diff = false;
  for (const auto& n : a->params().names()) {
    auto x = a->params().get(n).value(), y = b->params().get(n).value(), z = c->params().get(n).value();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin())) << n;
    any_diff |= !std::equal(x.begin(), x.end(), z.begin());
  }
  EXPECT_TRUE(any_diff);
}

TEST(BuildBackbone, FusionOnlyChangesPriorPath) {
  BackboneSpec none;
  BackboneSpec cat = none;
  cat.fusion = Fusion::prior_concat;
  cat.prior_channels = 3;
  auto a = backbone::build_backbone<float>(none, RandomSeed{2});
  auto b = backbone::build_backbone<float>(cat, RandomSeed{2});
  const auto na_list = a->params().names();
  const auto nb_list = b->params().names();
  std::set<std::string> na(na_list.begin(), na_list.end());
  std::set<std::string> nb(nb_list.begin(), nb_list.end());
  std::vector<std::string> only_b;
  for (const auto& n : nb)
    if (!na.count(n)) only_b.push_back(n);
  EXPECT_EQ(only_b, (std::vector<std::string>{"backbone.prior_proj.bias", "backbone.prior_proj.weight"}));
  for (const auto& n : na) {
    ASSERT_TRUE(nb.count(n)) << n;
    const auto& pa = a->params().get(n);
    const auto& pb = b->params().get(n);
    if (n == "backbone.fuse.weight") {
      EXPECT_EQ(pa.shape(), (nn::Shape{16, 16, 1, 1}));
      EXPECT_EQ(pb.shape(), (nn::Shape{16, 32, 1, 1}));
      continue;
    }
    EXPECT_EQ(pa.shape(), pb.shape()) << n;
    EXPECT_TRUE(std::equal(pa.value().begin(), pa.value().end(), pb.value().begin())) << n;
  }
}

TEST(Restore, ZeroResidualHeadIsIdentityForArbitraryDims) {
  auto net = backbone::build_backbone<float>(BackboneSpec{}, RandomSeed{3});
  Rng rng(3);
  for (int i = 0; i < 6; ++i) {
    const int h = 17 + static_cast<int>(rng.below(48)), w = 17 + static_cast<int>(rng.below(48));
    auto img = random_image(h, w, 3, rng);
    auto out = net->restore(img, nullptr);
    EXPECT_TRUE(out.residual_mode);
    EXPECT_EQ(out.restored, img) << h << "x" << w;
  }
}

TEST(Restore, PadsToFactorAndCropsBack) {
  BackboneSpec s;
  s.zero_init_output = false;
  auto net = backbone::build_backbone<float>(s, RandomSeed{4});
  Rng rng(4);
  auto img = random_image(250, 250, 3, rng);
  auto out = net->restore(img, nullptr);
  EXPECT_EQ(out.restored.height(), 250);
  EXPECT_EQ(out.restored.width(), 250);
  EXPECT_TRUE(out.restored.is_unit_range());
  EXPECT_EQ(net->restore(img, nullptr).restored, out.restored);
}

TEST(Restore, PriorContract) {
  auto net = backbone::build_backbone<float>(small_spec(Fusion::prior_concat, 4), RandomSeed{5});
  ImageBuffer img(16, 16, 3, 0.5f);
  EXPECT_THROW(net->restore(img, nullptr), InvalidArgument);
  auto wrong = Var<float>::zeros({4, 16, 12});
  EXPECT_THROW(net->restore(img, &wrong), DimensionMismatch);
  auto wrong_c = Var<float>::zeros({3, 16, 16});
  EXPECT_THROW(net->restore(img, &wrong_c), DimensionMismatch);
  auto ok = Var<float>::zeros({4, 16, 16});
  EXPECT_NO_THROW(net->restore(img, &ok));
}

TEST(Backbone, EveryParameterReceivesGradient) {
  // The zero-initialised head would block the body, so use a random head here.
  for (auto kind : {BackboneKind::restormer_tiny, BackboneKind::resnet_tiny}) {
    BackboneSpec s;
    s.kind = kind;
    s.fusion = Fusion::prior_concat;
    s.prior_channels = 3;
    s.zero_init_output = false;
    if (kind == BackboneKind::resnet_tiny) s.downsample_factor = 1;
    auto net = backbone::build_backbone<float>(s, RandomSeed{6});
    Rng rng(6);
    auto x = nn::to_tensor<float>(random_image(32, 32, 3, rng));
    auto prior = nn::to_tensor<float>(random_image(32, 32, 3, rng));
    auto gt = nn::to_tensor<float>(random_image(32, 32, 3, rng));
    auto loss = nn::charbonnier(net->forward(x, &prior), gt, 1e-3f);
    nn::backward(loss);
    for (const auto& e : net->params().entries()) {
      ASSERT_TRUE(e.var.has_grad()) << e.name;
      double norm = 0;
      for (float g : e.var.grad()) norm += std::abs(g);
      EXPECT_GT(norm, 0.0) << e.name;
    }
  }
}

TEST(Backbone, GradientsMatchFiniteDifferences) {
  auto spec = small_spec(Fusion::prior_concat, 2);
  spec.zero_init_output = false;
  auto net = backbone::build_backbone<double>(spec, RandomSeed{7});
  Rng rng(7);
  auto x = test_support::random_leaf({3, 8, 8}, rng, 0.0, 1.0);
  auto prior = test_support::random_leaf({2, 8, 8}, rng);
  std::vector<Var<double>> leaves{x, prior};
  for (auto& e : net->params().entries()) leaves.push_back(e.var);
  auto r = test_support::grad_check([&] { return test_support::probe_loss(net->forward(x, &prior)); }, leaves, 1e-6, 1e-6, 8);
  EXPECT_LT(r.max_rel_error, 1e-4);
}
