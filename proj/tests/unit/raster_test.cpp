#include "dfl/raster.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dfl/core.hpp"
#include "gtest/gtest.h"

namespace dfl {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir() {
  auto dir = fs::temp_directory_path() / "dfl_raster_test";
  fs::create_directories(dir);
  return dir;
}

Raster random_raster(int w, int h, std::uint64_t seed) {
  Raster r(w, h);
  SeededRng rng(seed, 0);
  for (double& v : r.data()) v = rng.uniform();
  return r;
}

TEST(Raster, PngRoundTripIsLossless) {
  Raster gray(8, 8, 128.0 / 255.0);
  const auto path = temp_dir() / "gray.png";
  save(gray, path);
  const Raster back = load(path);
  ASSERT_EQ(back.width(), 8);
  ASSERT_EQ(back.height(), 8);
  for (double v : back.data()) EXPECT_EQ(v, 128.0 / 255.0);
}

TEST(Raster, SingleRedPixel) {
  Raster red(1, 1);
  red.at(0, 0, 0) = 1.0;
  const auto path = temp_dir() / "red.png";
  save(red, path);
  const Raster back = load(path);
  ASSERT_EQ(back.data().size(), 3u);
  EXPECT_EQ(back.data()[0], 1.0);
  EXPECT_EQ(back.data()[1], 0.0);
  EXPECT_EQ(back.data()[2], 0.0);
}

TEST(Raster, SaveRoundsHalfUp) {
  Raster r(1, 1);
  r.at(0, 0, 0) = 100.5 / 255.0;
  r.at(0, 0, 1) = 100.49 / 255.0;
  const auto path = temp_dir() / "round.png";
  save(r, path);
  const Raster back = load(path);
  EXPECT_EQ(back.at(0, 0, 0), 101.0 / 255.0);
  EXPECT_EQ(back.at(0, 0, 1), 100.0 / 255.0);
}

TEST(Raster, TruncatedFileIsDecodeError) {
  const auto good = temp_dir() / "full.png";
  save(random_raster(16, 16, 1), good);
  std::ifstream in(good, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto bad = temp_dir() / "truncated.png";
  std::ofstream(bad, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_THROW(load(bad), DecodeError);
  EXPECT_THROW(load(temp_dir() / "missing.png"), IoError);
  EXPECT_THROW(load(temp_dir() / "image.bmp"), DecodeError);
}

TEST(Raster, JpegTruncatedIsDecodeError) {
  const unsigned char junk[] = {0xFF, 0xD8, 0xFF, 0xE0, 0x00, 0x10, 'J', 'F'};
  EXPECT_THROW(decode_image(junk, "junk.jpg"), DecodeError);
}

TEST(Raster, ResizeConstantStaysConstant) {
  Raster c(8, 8, 0.3);
  const Raster small = resize_bilinear(c, 4, 4);
  for (double v : small.data()) EXPECT_NEAR(v, 0.3, 1e-15);
  const Raster same = resize_bilinear(c, 8, 8);
  EXPECT_EQ(same, c);
  EXPECT_THROW(resize_bilinear(c, 0, 4), ArgumentError);
}

TEST(Raster, ResizeRampMatchesClosedForm) {
  const int w = 16;
  Raster ramp(w, 4);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) ramp.at(x, y, c) = x / double(w - 1);
    }
  }
  const Raster half = resize_bilinear(ramp, w / 2, 4);
  for (int x = 0; x < w / 2; ++x) {
    // Half-pixel centred source coordinate, clamped to the valid range.
    const double sx = std::clamp((x + 0.5) * 2.0 - 0.5, 0.0, w - 1.0);
    EXPECT_NEAR(half.at(x, 1, 0), sx / (w - 1), 1e-12);
  }
}

TEST(Raster, ParallelKernelsMatchSerial) {
  const Raster r = random_raster(37, 23, 5);
  EXPECT_EQ(resize_bilinear(r, 61, 19), serial::resize_bilinear(r, 61, 19));
  const GrayRaster g = to_luma(r);
  Kernel k = Kernel::box(5);
  k.taps[3] = 0.0;
  EXPECT_EQ(convolve(g, k), serial::convolve(g, k));
}

TEST(Raster, ConvolveIdentityAndBounds) {
  const GrayRaster g = to_luma(random_raster(9, 7, 2));
  EXPECT_EQ(convolve(g, Kernel{}), g);
  Kernel even{2, 1, {0.5, 0.5}};
  EXPECT_THROW(convolve(g, even), ArgumentError);

  const GrayRaster box = convolve(g, Kernel::box(3));
  double lo = 1.0, hi = 0.0, blo = 1.0, bhi = 0.0;
  for (double v : g.data()) lo = std::min(lo, v), hi = std::max(hi, v);
  for (double v : box.data()) blo = std::min(blo, v), bhi = std::max(bhi, v);
  EXPECT_GE(blo, lo - 1e-15);
  EXPECT_LE(bhi, hi + 1e-15);
}

TEST(Raster, ConvolveReplicatesEdges) {
  GrayRaster g(3, 1);
  g.at(0, 0) = 1.0;
  Kernel left{3, 1, {1.0, 0.0, 0.0}};  // reads x - 1
  const GrayRaster out = convolve(g, left);
  EXPECT_EQ(out.at(0, 0), 1.0);  // replicated x = -1 -> x = 0
  EXPECT_EQ(out.at(1, 0), 1.0);
  EXPECT_EQ(out.at(2, 0), 0.0);
}

TEST(Raster, CropBounds) {
  const Raster r = random_raster(10, 10, 3);
  const Raster c = crop(r, 2, 3, 4, 5);
  EXPECT_EQ(c.width(), 4);
  EXPECT_EQ(c.at(0, 0, 1), r.at(2, 3, 1));
  EXPECT_EQ(c.at(3, 4, 2), r.at(5, 7, 2));
  EXPECT_THROW(crop(r, 8, 0, 4, 4), RangeError);
  EXPECT_THROW(crop(r, -1, 0, 4, 4), RangeError);
}

TEST(Raster, LumaWeights) {
  Raster w(1, 1, 1.0);
  EXPECT_DOUBLE_EQ(to_luma(w).at(0, 0), 1.0);
  Raster g(1, 1);
  g.at(0, 0, 1) = 1.0;
  EXPECT_DOUBLE_EQ(to_luma(g).at(0, 0), 0.587);
}

TEST(Raster, HslRoundTrip) {
  const auto hsl = rgb_to_hsl(0.2, 0.4, 0.6);
  const auto rgb = hsl_to_rgb(hsl);
  EXPECT_NEAR(rgb[0], 0.2, 1e-6);
  EXPECT_NEAR(rgb[1], 0.4, 1e-6);
  EXPECT_NEAR(rgb[2], 0.6, 1e-6);
  EXPECT_NEAR(hsl.h, 210.0 / 360.0, 1e-12);
  EXPECT_NEAR(hsl.s, 0.5, 1e-12);
  EXPECT_NEAR(hsl.l, 0.4, 1e-12);

  SeededRng rng(9, 9);
  for (int i = 0; i < 2000; ++i) {
    const double r = rng.uniform(), g = rng.uniform(), b = rng.uniform();
    const auto back = hsl_to_rgb(rgb_to_hsl(r, g, b));
    EXPECT_NEAR(back[0], r, 1e-12);
    EXPECT_NEAR(back[1], g, 1e-12);
    EXPECT_NEAR(back[2], b, 1e-12);
  }
}

TEST(Raster, MinFilterMatchesBruteForce) {
  const GrayRaster g = to_luma(random_raster(20, 13, 4));
  const GrayRaster m = min_filter(g, 5);
  for (int y = 0; y < g.height(); ++y) {
    for (int x = 0; x < g.width(); ++x) {
      double ref = 1.0;
      for (int dy = -2; dy <= 2; ++dy) {
        for (int dx = -2; dx <= 2; ++dx) {
          const int sx = std::clamp(x + dx, 0, g.width() - 1);
          const int sy = std::clamp(y + dy, 0, g.height() - 1);
          ref = std::min(ref, g.at(sx, sy));
        }
      }
      EXPECT_EQ(m.at(x, y), ref);
    }
  }
}

TEST(Raster, ClampKeepsSamplesInRange) {
  Raster r(2, 1);
  r.data()[0] = -0.5;
  r.data()[1] = 1.5;
  r.data()[2] = std::nan("");
  r.clamp();
  EXPECT_EQ(r.data()[0], 0.0);
  EXPECT_EQ(r.data()[1], 1.0);
  EXPECT_EQ(r.data()[2], 0.0);
}

}  // namespace
}  // namespace dfl
