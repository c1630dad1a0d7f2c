#include "dfl/model.hpp"

#include <omp.h>

#include <cmath>
#include <numeric>

#include "dfl/synth.hpp"
#include "gtest/gtest.h"

namespace dfl {
namespace {

LabelVector noise_label(double score) {
  LabelVector l{};
  l[index_of(DefectKind::Noise)] = score;
  return l;
}

// Small noise-sequence corpus: 5 bases x 10 levels, 64 px, patch size 32.
struct Corpus {
  std::vector<TrainingImage> images;
  std::vector<Raster> rasters;
  TrainConfig config;

  Corpus() {
    config.patch_size = 32;
    config.epochs = 1;
    config.seed = 9;
    config.augment = false;
    for (int b = 0; b < 5; ++b) {
      SeededRng base_rng(21, b);
      const Raster base = generate_base_image(64, base_rng);
      SeededRng rng = sequence_rng(21, std::to_string(b), SynthSequence::Noise);
      for (int level = 0; level < 10; ++level) {
        rasters.push_back(apply_defect(base, {SynthSequence::Noise, level}, rng));
        TrainingImage im{std::to_string(b) + "__noise_" + std::to_string(level), noise_label(level / 10.0)};
        // Every head needs a second class.
        if (level == 9) {
          for (DefectKind d : kAllDefects) {
            if (d != DefectKind::Noise) im.labels[index_of(d)] = 0.5;
          }
        }
        images.push_back(im);
      }
    }
  }

  RasterLoader loader() const {
    return [this](std::size_t i) { return rasters[i]; };
  }
};

double norm(const std::vector<double>& v) { return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0)); }

TEST(Augment, ClampExamples) {
  std::vector<LabelVector> labels(200, LabelVector{});
  labels[0] = noise_label(1.0);  // 200x rarer than class 0
  labels[1] = noise_label(0.5);
  for (int i = 2; i < 42; ++i) labels[i] = noise_label(0.3);  // 40 members
  const AugmentPlan plan = plan_augmentation(labels);
  EXPECT_EQ(plan.counts[0], 50);
  EXPECT_EQ(plan.counts[1], 50);
  EXPECT_EQ(plan.counts[2], 5);   // round(158 / 40) = 4 -> floor 5
  EXPECT_EQ(plan.counts[100], 5);  // largest class
  EXPECT_THROW(plan_augmentation({}), ArgumentError);
}

TEST(Augment, MostSevereDefectDecides) {
  std::vector<LabelVector> labels(30, LabelVector{});
  labels[0][index_of(DefectKind::Haze)] = 0.2;
  labels[0][index_of(DefectKind::Noise)] = 0.9;
  for (int i = 1; i < 10; ++i) labels[i][index_of(DefectKind::Haze)] = 0.2;
  const AugmentPlan plan = plan_augmentation(labels);
  // Noise 0.9 is the most severe: n_max 29 over n_c 1.
  EXPECT_EQ(plan.counts[0], 29);
}

TEST(Augment, RebalancesHundredToOneSkew) {
  // Counting oracle: 1000 images in class 0, 10 in class 10.
  std::vector<LabelVector> labels(1010, LabelVector{});
  for (int i = 1000; i < 1010; ++i) labels[i] = noise_label(1.0);
  const AugmentPlan plan = plan_augmentation(labels);
  long rare = 0, common = 0;
  for (int i = 0; i < 1010; ++i) {
    EXPECT_GE(plan.counts[i], 5);
    EXPECT_LE(plan.counts[i], 50);
    (i < 1000 ? common : rare) += plan.counts[i];
  }
  const int d = index_of(DefectKind::Noise);
  EXPECT_EQ(plan.sample_counts[d][0], common);
  EXPECT_EQ(plan.sample_counts[d][10], rare);
  const double before = AugmentPlan::imbalance(plan.class_counts[d]);
  const double after = AugmentPlan::imbalance(plan.sample_counts[d]);
  EXPECT_DOUBLE_EQ(before, 100.0);
  EXPECT_GE(before / after, 5.0);
}

TEST(Augment, SampleShapes) {
  SeededRng rng(1, 0);
  const Raster img = generate_base_image(120, rng);
  SeededRng a(2, 0), b(2, 0);
  EXPECT_EQ(augmented_features(Column::Holistic, img, 3, 96, a).size(), 3u);
  EXPECT_EQ(augmented_features(Column::Patch, img, 4, 96, b).size(), 4u);
  EXPECT_TRUE(augmented_features(Column::Patch, img, 4, 128, b).empty());
  SeededRng c(2, 0);
  EXPECT_EQ(augmented_features(Column::Holistic, img, 1, 96, c)[0],
            extract_features(img, FeatureMode::Holistic));
}

TEST(Model, DeterministicTraining) {
  const Corpus corpus;
  const auto infogain = fallback_infogain_set();
  const std::vector<int> ones(corpus.images.size(), 1);
  const FeatureSet set = build_feature_set(Column::Holistic, corpus.images, corpus.loader(), ones, corpus.config);
  ASSERT_EQ(set.features.size(), 50u);
  const auto a = train_column(set, corpus.images, infogain, corpus.config);
  const auto b = train_column(set, corpus.images, infogain, corpus.config);
  EXPECT_EQ(a.model.params, b.model.params);
  omp_set_num_threads(1);
  const auto c = train_column(set, corpus.images, infogain, corpus.config);
  omp_set_num_threads(omp_get_num_procs());
  EXPECT_EQ(a.model.params, c.model.params);
  EXPECT_EQ(a.log.iterations, 2);
}

TEST(Model, LossDecreases) {
  const Corpus corpus;
  TrainConfig cfg = corpus.config;
  cfg.epochs = 8;
  cfg.batch_size = 8;
  const std::vector<int> ones(corpus.images.size(), 1);
  const FeatureSet set = build_feature_set(Column::Patch, corpus.images, corpus.loader(), ones, cfg);
  for (LossKind loss : {LossKind::Infogain, LossKind::CrossEntropy, LossKind::L2}) {
    cfg.loss = loss;
    const auto trained = train_column(set, corpus.images, fallback_infogain_set(), cfg);
    ASSERT_EQ(trained.log.epoch_loss.size(), 8u);
    for (std::size_t h = 0; h < trained.log.defects.size(); ++h) {
      EXPECT_LT(trained.log.epoch_loss[5][h], trained.log.epoch_loss[0][h])
          << loss_name(loss) << " " << defect_name(trained.log.defects[h]);
    }
  }
}

TEST(Model, WeightDecayShrinksNorm) {
  TrainConfig cfg;
  SeededRng rng(3, 0);
  DefectModel m = DefectModel::initialized(Column::Holistic, cfg, rng);
  const std::vector<double> zero(m.params.size(), 0.0);
  std::vector<double> velocity;
  double prev = norm(m.params);
  for (int step = 0; step < 200; ++step) {
    sgd_update(m, zero, velocity, 1e-2, cfg);
    const double now = norm(m.params);
    ASSERT_LT(now, prev) << step;
    prev = now;
  }
}

TEST(Model, LearningRateSchedule) {
  TrainConfig cfg;
  EXPECT_EQ(learning_rate(cfg, 0), 1e-4);
  EXPECT_EQ(learning_rate(cfg, 6399), 1e-4);
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 6400), 0.96e-4);
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 12800), 0.96 * 0.96e-4);
}

TEST(Model, Structure) {
  TrainConfig cfg;
  SeededRng rng(4, 0);
  const DefectModel h = DefectModel::initialized(Column::Holistic, cfg, rng);
  const DefectModel p = DefectModel::initialized(Column::Patch, cfg, rng);
  EXPECT_EQ(h.defects.size(), 7u);
  EXPECT_EQ(p.defects.size(), 6u);
  EXPECT_FALSE(p.head_index(DefectKind::BadComposition));
  // 134*128 + 128 + 128*64 + 64 + 65 * (5 * 11 + 21)
  EXPECT_EQ(p.params.size(), 25536u + 65u * 76u);
  const double bound = 1.0 / std::sqrt(134.0);
  for (std::size_t i = 0; i < 128u * 134u; ++i) ASSERT_LE(std::abs(h.params[i]), bound);
  for (std::size_t i = 128u * 134u; i < 128u * 135u; ++i) ASSERT_EQ(h.params[i], 0.0);
  FeatureVector f{};
  for (const auto& row : h.class_probabilities(f)) {
    EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-12);
  }
}

TEST(Model, NonFiniteLossAborts) {
  Corpus corpus;
  const std::vector<int> ones(corpus.images.size(), 1);
  FeatureSet set = build_feature_set(Column::Holistic, corpus.images, corpus.loader(), ones, corpus.config);
  set.features[7][3] = std::numeric_limits<double>::infinity();
  try {
    train_column(set, corpus.images, fallback_infogain_set(), corpus.config);
    FAIL() << "expected TrainError";
  } catch (const TrainError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("iteration 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("bad_exposure"), std::string::npos) << msg;
    EXPECT_NE(msg.find("__noise_"), std::string::npos) << msg;
  }
}

TEST(Model, SingleClassLabelsRejected) {
  Corpus corpus;
  for (auto& im : corpus.images) im.labels[index_of(DefectKind::Noise)] = 0.0;
  const std::vector<int> ones(corpus.images.size(), 1);
  const FeatureSet set = build_feature_set(Column::Patch, corpus.images, corpus.loader(), ones, corpus.config);
  EXPECT_THROW(train_column(set, corpus.images, fallback_infogain_set(), corpus.config), ArgumentError);
}

TEST(Model, FileRoundTrip) {
  TrainConfig cfg;
  cfg.epochs = 7;
  cfg.loss = LossKind::L2;
  SeededRng rng(5, 0);
  DefectModel m = DefectModel::initialized(Column::Patch, cfg, rng);
  m.feature_mean[3] = 0.25;
  m.feature_scale[4] = 0.0;
  m.provenance = "dfl train --seed 5";
  const auto bytes = serialize_model(m);
  ASSERT_GE(bytes.size(), 8u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "DFL1");
  const DefectModel back = deserialize_model(bytes);
  EXPECT_EQ(back.params, m.params);
  EXPECT_EQ(back.feature_mean, m.feature_mean);
  EXPECT_EQ(back.feature_scale, m.feature_scale);
  EXPECT_EQ(back.config.epochs, 7);
  EXPECT_EQ(back.config.loss, LossKind::L2);
  EXPECT_EQ(back.provenance, m.provenance);
  EXPECT_EQ(serialize_model(back), bytes);

  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_model(bad), DecodeError);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(deserialize_model(truncated), DecodeError);
}

TEST(Model, ConfigJson) {
  TrainConfig cfg;
  cfg.seed = 123456789012345ULL;
  cfg.loss = LossKind::CrossEntropy;
  const TrainConfig back = config_from_json(config_to_json(cfg));
  EXPECT_EQ(back.seed, cfg.seed);
  EXPECT_EQ(back.loss, LossKind::CrossEntropy);
  EXPECT_EQ(config_from_json(R"({"epochs": 3})").epochs, 3);
  EXPECT_EQ(config_from_json(R"({"epochs": 3})").batch_size, 32);
  EXPECT_THROW(config_from_json(R"({"epochs": "x"})"), SchemaError);
  EXPECT_THROW(config_from_json("[1"), SchemaError);
}

TEST(Predict, FuseExamples) {
  std::array<double, kDefectCount> h{};
  std::array<std::optional<double>, kDefectCount> p{};
  h[index_of(DefectKind::Noise)] = 0.4;
  p[index_of(DefectKind::Noise)] = 0.6;
  h[index_of(DefectKind::BadComposition)] = 0.3;
  p[index_of(DefectKind::BadComposition)] = 0.9;
  const Prediction out = fuse(h, p);
  EXPECT_DOUBLE_EQ(out.scores[index_of(DefectKind::Noise)], 0.5);
  EXPECT_EQ(out.scores[index_of(DefectKind::BadComposition)], 0.3);
  EXPECT_FALSE(out.holistic_only);
  EXPECT_TRUE(fuse(h, {}).holistic_only);
}

class TrainedPair : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const Corpus corpus;
    const auto r = train(corpus.images, corpus.loader(), fallback_infogain_set(), corpus.config);
    holistic_ = new DefectModel(r.holistic.model);
    patch_ = new DefectModel(r.patch.model);
  }
  static void TearDownTestSuite() {
    delete holistic_;
    delete patch_;
  }
  static DefectModel* holistic_;
  static DefectModel* patch_;
};

DefectModel* TrainedPair::holistic_ = nullptr;
DefectModel* TrainedPair::patch_ = nullptr;

TEST_F(TrainedPair, PredictDeterministicAcrossThreads) {
  SeededRng img_rng(6, 0);
  const Raster img = generate_base_image(80, img_rng);
  SeededRng a(7, 1), b(7, 1);
  const Prediction pa = predict(*holistic_, *patch_, img, 10, a);
  omp_set_num_threads(1);
  const Prediction pb = predict(*holistic_, *patch_, img, 10, b);
  omp_set_num_threads(omp_get_num_procs());
  EXPECT_EQ(pa.scores, pb.scores);
  EXPECT_FALSE(pa.holistic_only);
  EXPECT_EQ(pa.scores[index_of(DefectKind::BadComposition)], pa.holistic[index_of(DefectKind::BadComposition)]);
  for (int d = 0; d < kDefectCount; ++d) {
    EXPECT_GE(pa.scores[d], min_score(kAllDefects[d]));
    EXPECT_LE(pa.scores[d], 1.0);
  }
}

TEST_F(TrainedPair, SmallImageFallsBackToHolistic) {
  SeededRng rng(8, 0);
  const Prediction p = predict(*holistic_, *patch_, Raster(20, 40, 0.5), 10, rng);
  EXPECT_TRUE(p.holistic_only);
  EXPECT_EQ(p.scores, p.holistic);
}

TEST_F(TrainedPair, IncompatibleModelsRejected) {
  SeededRng rng(9, 0);
  EXPECT_THROW(predict(*patch_, *holistic_, Raster(64, 64), 2, rng), ArgumentError);
  DefectModel other = *patch_;
  other.feature_version = "old";
  EXPECT_THROW(predict(*holistic_, other, Raster(64, 64), 2, rng), ArgumentError);
}

TEST_F(TrainedPair, LocalizeShapeAndRange) {
  SeededRng rng(10, 0);
  const Raster img = generate_base_image(100, rng);
  const Raster odd = crop(img, 0, 0, 77, 53);
  const GrayRaster heat = localize(*patch_, odd, DefectKind::Noise);
  EXPECT_EQ(heat.width(), 77);
  EXPECT_EQ(heat.height(), 53);
  for (double v : heat.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_THROW(localize(*patch_, img, DefectKind::BadComposition), UnsupportedDefect);
  EXPECT_THROW(localize(*holistic_, img, DefectKind::Noise), ArgumentError);
  EXPECT_THROW(localize(*patch_, Raster(20, 20), DefectKind::Noise), ArgumentError);
}

TEST_F(TrainedPair, LocalizeUniformPatchGivesFlatMap) {
  // A single window: the upsampled map is that window's score everywhere.
  SeededRng rng(11, 0);
  const Raster img = generate_base_image(32, rng);
  const GrayRaster heat = localize(*patch_, img, DefectKind::Noise, 16);
  const double expect = patch_->decoded_scores(extract_features(img, FeatureMode::Patch, 32))[3];
  for (double v : heat.data()) EXPECT_DOUBLE_EQ(v, expect);
}

}  // namespace
}  // namespace dfl
