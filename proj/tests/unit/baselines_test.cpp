#include "dfl/baselines.hpp"

#include <cmath>

#include "dfl/metrics.hpp"
#include "dfl/synth.hpp"
#include "gtest/gtest.h"

namespace dfl {
namespace {

Raster flat_with_noise(int size, double sigma, std::uint64_t seed) {
  Raster r(size, size, 0.5);
  SeededRng rng(seed, 0);
  // Same noise on every channel so luma noise equals sigma.
  for (std::size_t i = 0; i < r.pixel_count(); ++i) {
    const double n = sigma * rng.normal();
    for (int c = 0; c < 3; ++c) r.data()[i * 3 + c] = 0.5 + n;
  }
  return r;
}

Raster base(std::uint64_t seed) {
  SeededRng rng(seed, 1);
  return generate_base_image(128, rng);
}

double level_correlation(SynthSequence seq, BaselineKind k, std::uint64_t seed) {
  const Raster b = base(seed);
  std::vector<double> levels, scores;
  for (int level = 0; level < 11; ++level) {
    SeededRng rng = sequence_rng(seed, "b", seq);
    levels.push_back(level);
    scores.push_back(run_baseline(k, apply_defect(b, {seq, level}, rng)));
  }
  return spearman(levels, scores).value_or(0.0);
}

TEST(Baselines, NoiseExamples) {
  EXPECT_EQ(estimate_noise(Raster(32, 32, 0.4)), 0.0);
  for (double sigma : {0.02, 0.05, 0.1}) {
    EXPECT_NEAR(estimate_noise(flat_with_noise(256, sigma, 3)), sigma, 0.1 * sigma);
  }
  EXPECT_THROW(estimate_noise(Raster(2, 8)), ArgumentError);
}

TEST(Baselines, BlurExamples) {
  const Raster b = base(4);
  SeededRng rng = sequence_rng(1, "x", SynthSequence::Blur);
  EXPECT_GT(estimate_blur(apply_defect(b, {SynthSequence::Blur, 10}, rng)), estimate_blur(b));

  Raster noise(64, 64);
  SeededRng nr(5, 0);
  for (double& v : noise.data()) v = nr.uniform();
  EXPECT_LT(estimate_blur(noise), estimate_blur(convolve(noise, line_kernel(21, 0.3))));
  EXPECT_THROW(estimate_blur(Raster(15, 40)), ArgumentError);
}

TEST(Baselines, BlurReferenceIsBaseCorpusSharpness) {
  double sum = 0.0;
  for (int b = 0; b < 100; ++b) {
    SeededRng rng(0, mix_stream(streams::kBaseCorpus, b));
    sum += mean_tile_sharpness(generate_base_image(256, rng));
  }
  EXPECT_NEAR(sum / 100.0, kDefaultBlurReference, 0.01 * kDefaultBlurReference);
}

TEST(Baselines, HazeExamples) {
  // Each pixel has one zero channel; a white 24x24 patch shows the airlight.
  Raster scene(128, 128);
  SeededRng rng(6, 0);
  for (int y = 0; y < 128; ++y) {
    for (int x = 0; x < 128; ++x) {
      const int zero = static_cast<int>(rng.below(3));
      for (int c = 0; c < 3; ++c) scene.at(x, y, c) = c == zero ? 0.0 : rng.uniform();
      if (x >= 8 && x < 32 && y >= 8 && y < 32) {
        for (int c = 0; c < 3; ++c) scene.at(x, y, c) = 1.0;
      }
    }
  }
  const double hazy = estimate_haze(apply_haze(scene, {{1.0, 1.0, 1.0}, 0.5}));
  EXPECT_NEAR(hazy, 0.95 * 0.5, 0.1 * 0.475);
  EXPECT_NEAR(estimate_haze(Raster(64, 64, 0.0)), 0.0, 0.02);
}

TEST(Baselines, FlipInvariant) {
  SeededRng rng(7, 0);
  Raster r = generate_base_image(100, rng);
  r = Raster(crop(r, 0, 0, 99, 77));
  const Raster f = flip_horizontal(r);
  EXPECT_DOUBLE_EQ(estimate_noise(r), estimate_noise(f));
  EXPECT_DOUBLE_EQ(estimate_blur(r), estimate_blur(f));
  EXPECT_DOUBLE_EQ(estimate_haze(r), estimate_haze(f));
}

TEST(Baselines, RankMonotoneOnSequences) {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    EXPECT_GE(level_correlation(SynthSequence::Noise, BaselineKind::NoiseImmerkaer, seed), 0.95);
    EXPECT_GE(level_correlation(SynthSequence::Blur, BaselineKind::BlurHighFreq, seed), 0.9);
    EXPECT_GE(level_correlation(SynthSequence::Haze, BaselineKind::HazeDarkChannel, seed), 0.9);
  }
}

TEST(Baselines, Names) {
  EXPECT_EQ(parse_baseline("haze"), BaselineKind::HazeDarkChannel);
  EXPECT_EQ(baseline_defect(BaselineKind::BlurHighFreq), DefectKind::UndesiredBlur);
  EXPECT_THROW(parse_baseline("jpeg"), ArgumentError);
}

}  // namespace
}  // namespace dfl
