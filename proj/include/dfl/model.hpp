#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dfl/core.hpp"
#include "dfl/features.hpp"
#include "dfl/infogain.hpp"
#include "dfl/raster.hpp"

namespace dfl {

enum class Column { Holistic, Patch };
enum class LossKind { Infogain, CrossEntropy, L2 };

std::string_view column_name(Column c);
Column parse_column(std::string_view name);
std::string_view loss_name(LossKind k);
LossKind parse_loss(std::string_view name);

// Heads carried by a column: the patch column has no composition head.
std::vector<DefectKind> column_defects(Column c);

struct TrainConfig {
  int batch_size = 32;
  double lr_shared = 1e-4;
  double head_lr_multiplier = 10.0;
  double lr_decay = 0.96;
  int lr_decay_every = 6400;
  double weight_decay = 2e-4;
  double momentum = 0.9;
  int epochs = 10;
  std::uint64_t seed = 0;
  int patch_size = kDefaultPatchSize;
  int test_patches = 10;
  LossKind loss = LossKind::Infogain;
  // Off: one sample per image (the full resize, or one random patch).
  bool augment = true;

  void validate() const;
};

std::string config_to_json(const TrainConfig& config);
// Overlays the keys present in json (snake_case field names) onto base.
TrainConfig config_from_json(std::string_view json, TrainConfig base = {});

inline constexpr int kHidden1 = 128;
inline constexpr int kHidden2 = 64;

// Parameters live in one flat vector: W1 (128x134), b1, W2 (64x128), b2, then
// per head W (K x 64) and b (K), heads in column_defects order.
struct DefectModel {
  Column column = Column::Holistic;
  std::vector<DefectKind> defects;
  std::array<double, kFeatureDim> feature_mean{};
  std::array<double, kFeatureDim> feature_scale{};  // 0 for constant features
  std::vector<double> params;
  TrainConfig config;
  std::string feature_version{kFeatureVersion};
  std::string provenance;

  static DefectModel initialized(Column column, const TrainConfig& config, SeededRng& rng);

  std::size_t trunk_size() const;
  std::size_t head_offset(std::size_t head) const;
  std::optional<std::size_t> head_index(DefectKind d) const;

  // Softmax outputs, one row per head.
  std::vector<std::vector<double>> class_probabilities(const FeatureVector& features) const;
  // Decoded score per head.
  std::vector<double> decoded_scores(const FeatureVector& features) const;
};

// Caffe-style momentum step, v = m v - lr (g + wd w); w += v. Head parameters
// use lr * head_lr_multiplier.
void sgd_update(DefectModel& model, std::span<const double> grad, std::vector<double>& velocity,
                double lr, const TrainConfig& config);

double learning_rate(const TrainConfig& config, long iteration);

using LabelVector = std::array<double, kDefectCount>;

struct AugmentPlan {
  std::vector<int> counts;  // samples per image
  // Per defect: class counts before augmentation and sample counts after.
  std::array<std::vector<long>, kDefectCount> class_counts;
  std::array<std::vector<long>, kDefectCount> sample_counts;

  // max/min over non-empty classes.
  static double imbalance(const std::vector<long>& counts);
};

// a = clamp(round(n_max / n_c), 5, 50), n_c the size of the image's class on
// its most severe defect (ties go to the rarer class).
AugmentPlan plan_augmentation(std::span<const LabelVector> labels);

// Training samples for one image: holistic samples are the full 224 resize
// followed by 112x112 crops of it warped back to 224; patch samples are
// patch_size crops at original resolution. Empty for the patch column when the
// image is smaller than a patch.
std::vector<FeatureVector> augmented_features(Column column, const Raster& raster, int count,
                                              int patch_size, SeededRng& rng);

struct TrainingImage {
  std::string image_id;
  LabelVector labels{};
};

using RasterLoader = std::function<Raster(std::size_t index)>;

struct FeatureSet {
  Column column = Column::Holistic;
  std::vector<FeatureVector> features;
  std::vector<std::size_t> image;  // source image index per sample
};

FeatureSet build_feature_set(Column column, std::span<const TrainingImage> images,
                             const RasterLoader& load, std::span<const int> counts,
                             const TrainConfig& config);

using InfogainSet = std::array<InfogainMatrix, kDefectCount>;
InfogainSet fallback_infogain_set();

struct TrainingLog {
  std::vector<DefectKind> defects;
  std::vector<std::vector<double>> epoch_loss;  // [epoch][head], mean batch loss
  long iterations = 0;
};

struct TrainedColumn {
  DefectModel model;
  TrainingLog log;
};

// Throws TrainError on a non-finite loss, naming the iteration, defect and
// image ids of the batch.
TrainedColumn train_column(const FeatureSet& set, std::span<const TrainingImage> images,
                           const InfogainSet& infogain, const TrainConfig& config);

struct TrainResult {
  TrainedColumn holistic;
  TrainedColumn patch;
  AugmentPlan plan;
};

TrainResult train(std::span<const TrainingImage> images, const RasterLoader& load,
                  const InfogainSet& infogain, const TrainConfig& config);

void save_model(const DefectModel& model, const std::filesystem::path& path);
DefectModel load_model(const std::filesystem::path& path);
std::vector<unsigned char> serialize_model(const DefectModel& model);
DefectModel deserialize_model(std::span<const unsigned char> bytes);

struct PredictionFeatures {
  FeatureVector holistic{};
  std::vector<FeatureVector> patches;  // empty when the image is too small
};

// Patch positions are drawn from rng before any parallel work.
PredictionFeatures prediction_features(const Raster& raster, int k, int patch_size, SeededRng& rng);

struct Prediction {
  std::array<double, kDefectCount> scores{};
  std::array<double, kDefectCount> holistic{};
  std::array<std::optional<double>, kDefectCount> patch{};
  bool holistic_only = false;
};

// Equal-weight average of the two columns; composition is holistic only.
Prediction fuse(const std::array<double, kDefectCount>& holistic,
                const std::array<std::optional<double>, kDefectCount>& patch);

void check_compatible(const DefectModel& holistic, const DefectModel& patch);

Prediction predict_from_features(const DefectModel& holistic, const DefectModel& patch,
                                 const PredictionFeatures& features);
Prediction predict(const DefectModel& holistic, const DefectModel& patch, const Raster& raster,
                   int k, SeededRng& rng);

// Dense patch-column scores at the given stride (patch_size / 2 when 0),
// bilinearly upsampled from window centres to the input size.
GrayRaster localize(const DefectModel& patch, const Raster& raster, DefectKind defect, int stride = 0);

}  // namespace dfl
