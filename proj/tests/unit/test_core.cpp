#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "priorfuse/core/hash.hpp"
#include "priorfuse/core/image.hpp"
#include "priorfuse/core/png_io.hpp"
#include "priorfuse/core/rng.hpp"
#include "support/images.hpp"

using namespace priorfuse;
using test_support::random_image;

TEST(ImageBuffer, RejectsDegenerateShapes) {
  EXPECT_THROW(ImageBuffer(7, 8, 3), InvalidArgument);
  EXPECT_THROW(ImageBuffer(8, 8, 2), InvalidArgument);
  EXPECT_THROW(ImageBuffer(8, 8, 3, std::vector<float>(10)), DimensionMismatch);
  EXPECT_NO_THROW(ImageBuffer(8, 8, 1));
}

TEST(ClampToUnit, Examples) {
  ImageBuffer half(8, 8, 3, 0.5f);
  EXPECT_EQ(clamp_to_unit(half), half);
  ImageBuffer img(8, 8, 3, 0.5f);
  img.at(0, 0, 0) = 1.2f;
  img.at(1, 1, 1) = -0.3f;
  auto c = clamp_to_unit(img);
  EXPECT_EQ(c.at(0, 0, 0), 1.0f);
  EXPECT_EQ(c.at(1, 1, 1), 0.0f);
  EXPECT_EQ(clamp_to_unit(c), c);
}

TEST(ClampToUnit, ReportsFirstNonFiniteIndex) {
  ImageBuffer img(8, 8, 3, 0.5f);
  img.at(2, 3, 1) = std::nanf("");
  img.at(5, 0, 0) = INFINITY;
  try {
    clamp_to_unit(img);
    FAIL();
  } catch (const NonFiniteValue& e) {
    EXPECT_EQ(e.index(), static_cast<std::size_t>((2 * 8 + 3) * 3 + 1));
  }
}

TEST(ResizeBilinear, SameDimsIsIdentity) {
  Rng rng(1);
  auto img = random_image(13, 9, 3, rng);
  auto out = resize_bilinear(img, 13, 9);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_LT(std::abs(out.data()[i] - img.data()[i]), 1e-6);
}

TEST(ResizeBilinear, PreservesConstants) {
  ImageBuffer img(10, 12, 3, 0.7f);
  for (auto [h, w] : {std::pair{8, 8}, {31, 17}, {40, 64}}) {
    auto out = resize_bilinear(img, h, w);
    ASSERT_EQ(out.height(), h);
    ASSERT_EQ(out.width(), w);
    for (float v : out.data()) EXPECT_EQ(v, 0.7f);
  }
}

TEST(ResizeBilinear, CheckerboardMatchesHandOracle) {
  // One-pixel checkerboard upsampled 2x. With half-pixel centres an output
  // index o maps to source (o + 0.5) / 2 - 0.5, clamped to the border.
  ImageBuffer img(8, 8, 1);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) img.at(y, x, 0) = static_cast<float>((x + y) % 2);
  auto out = resize_bilinear(img, 16, 16);
  auto src = [](int o) {
    double s = (o + 0.5) / 2.0 - 0.5;
    return std::min(std::max(s, 0.0), 7.0);
  };
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      const double sy = src(y), sx = src(x);
      const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
      const int y1 = std::min(y0 + 1, 7), x1 = std::min(x0 + 1, 7);
      const double fy = sy - y0, fx = sx - x0;
      auto p = [](int yy, int xx) { return static_cast<double>((yy + xx) % 2); };
      const double expect = (1 - fy) * ((1 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1 - fx) * p(y1, x0) + fx * p(y1, x1));
      EXPECT_NEAR(out.at(y, x, 0), expect, 1e-6) << y << "," << x;
    }
  // spot values: corner pixel replicates, interior mixes 3:1
  EXPECT_NEAR(out.at(0, 0, 0), 0.0, 1e-7);
  EXPECT_NEAR(out.at(1, 1, 0), 0.375, 1e-6);
}

TEST(ResizeBilinear, RejectsDegenerateTargets) {
  ImageBuffer img(8, 8, 3);
  EXPECT_THROW(resize_bilinear(img, 4, 8), InvalidArgument);
}

TEST(Geometry, RotationsAndFlipsFormDihedralGroup) {
  Rng rng(2);
  auto img = random_image(8, 11, 3, rng);
  EXPECT_EQ(rotate90(rotate90(img, 1), 3), img);
  EXPECT_EQ(rotate90(img, 4), img);
  EXPECT_EQ(flip_horizontal(flip_horizontal(img)), img);
  auto r = rotate90(img, 1);
  EXPECT_EQ(r.height(), 11);
  // CCW: top-right corner moves to top-left
  EXPECT_EQ(r.at(0, 0, 0), img.at(0, 10, 0));
}

TEST(Degradation, DisplayNamesAreLowercaseAndParse) {
  for (auto d : kAllDegradations) {
    auto n = display_name(d);
    ASSERT_FALSE(n.empty());
    for (char ch : n) EXPECT_FALSE(std::isupper(static_cast<unsigned char>(ch)));
    EXPECT_EQ(parse_degradation(to_string(d)), d);
  }
  EXPECT_EQ(display_name(DegradationType::low_light), "low-light degradation");
  EXPECT_THROW(parse_degradation("fog"), InvalidArgument);
}

TEST(Rng, StreamsAreDeterministicAndDistinct) {
  Rng a(RandomSeed{42}, "patch", 3), b(RandomSeed{42}, "patch", 3), c(RandomSeed{42}, "patch", 4);
  for (int i = 0; i < 10; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    EXPECT_NE(x, c.next_u64());
  }
}

TEST(Png, RoundTripsWithinQuantisation) {
  Rng rng(3);
  auto img = random_image(9, 12, 3, rng);
  auto dec = decode_png(encode_png(img));
  ASSERT_TRUE(dec.same_shape(img));
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_LE(std::abs(dec.data()[i] - img.data()[i]), 0.5f / 255.0f + 1e-6f);
  EXPECT_EQ(decode_png(encode_png(dec)), dec);
  EXPECT_EQ(quantize8(img), dec);
}

TEST(Png, GrayscalePromotedOnLoad) {
  ImageBuffer g(8, 9, 1, 0.2f);
  auto path = std::filesystem::temp_directory_path() / "pf_gray.png";
  save_png(g, path);
  auto rgb = load_png(path, 3);
  EXPECT_EQ(rgb.channels(), 3);
  EXPECT_NEAR(rgb.at(3, 3, 2), 51.0f / 255.0f, 1e-7);
  std::filesystem::remove(path);
}

TEST(Hash, Sha256KnownVectorAndBase64) {
  EXPECT_EQ(Sha256().update("abc").hex(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  std::vector<std::uint8_t> bytes{'h', 'e', 'l', 'l', 'o', '!', 0, 255};
  EXPECT_EQ(base64_decode(base64_encode(bytes)), bytes);
  EXPECT_EQ(base64_encode({'a', 'b'}), "YWI=");
}
