#include "dfl/features.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include "dfl/core.hpp"
#include "dfl/synth.hpp"
#include "gtest/gtest.h"

namespace dfl {
namespace {

namespace off = feature_offset;

double hist_sum(const FeatureVector& f, int offset, int bins) {
  return std::accumulate(f.begin() + offset, f.begin() + offset + bins, 0.0);
}

TEST(Features, ConstantGray) {
  const FeatureVector f = extract_features(Raster(300, 200, 0.5), FeatureMode::Holistic);
  EXPECT_DOUBLE_EQ(f[off::kLumaHist + 16], 1.0);
  EXPECT_EQ(f[off::kNoise], 0.0);
  EXPECT_EQ(f[off::kClipped], 0.0);
  EXPECT_EQ(f[off::kClipped + 1], 0.0);
  EXPECT_DOUBLE_EQ(f[off::kGeometry], 1.5);
  EXPECT_NEAR(f[off::kContrast], 0.0, 1e-12);
  for (int i = 123; i < kFeatureDim; ++i) EXPECT_EQ(f[i], 0.0);
}

TEST(Features, HistogramsSumToOneAndFinite) {
  SeededRng rng(1, 0);
  const Raster img = generate_base_image(160, rng);
  for (FeatureMode mode : {FeatureMode::Holistic, FeatureMode::Patch}) {
    const Raster input = mode == FeatureMode::Patch ? crop(img, 10, 20, 96, 96) : img;
    const FeatureVector f = extract_features(input, mode);
    EXPECT_NEAR(hist_sum(f, off::kLumaHist, 32), 1.0, 1e-9);
    EXPECT_NEAR(hist_sum(f, off::kSatHist, 16), 1.0, 1e-9);
    EXPECT_NEAR(hist_sum(f, off::kHueHist, 16), 1.0, 1e-9);
    EXPECT_NEAR(hist_sum(f, off::kGradHist, 16), 1.0, 1e-9);
    EXPECT_NEAR(hist_sum(f, off::kGridEnergy, 9), 1.0, 1e-9);
    for (double v : f) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Features, NoiseFeatureTracksSigma) {
  Raster img(96, 96, 0.5);
  SeededRng rng(2, 0);
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    const double n = 0.1 * rng.normal();
    for (int c = 0; c < 3; ++c) img.data()[i * 3 + c] = 0.5 + n;
  }
  const FeatureVector f = extract_features(img, FeatureMode::Patch);
  EXPECT_NEAR(f[off::kNoise], 0.1, 0.015);
}

TEST(Features, DeterministicAndBatchMatchesSerial) {
  std::vector<Raster> rs;
  for (int i = 0; i < 6; ++i) {
    SeededRng rng(3, i);
    rs.push_back(generate_base_image(96, rng));
  }
  EXPECT_EQ(extract_features(rs[0], FeatureMode::Patch), extract_features(rs[0], FeatureMode::Patch));
  EXPECT_EQ(extract_features_batch(rs, FeatureMode::Holistic),
            serial::extract_features_batch(rs, FeatureMode::Holistic));
}

TEST(Features, PatchSizeIsChecked) {
  EXPECT_THROW(extract_features(Raster(95, 96), FeatureMode::Patch), ArgumentError);
  EXPECT_NO_THROW(extract_features(Raster(64, 64), FeatureMode::Patch, 64));
}

}  // namespace
}  // namespace dfl
