#include "dfl/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace dfl {

namespace {

constexpr std::size_t kD = kFeatureDim;
constexpr std::size_t kH1 = kHidden1;
constexpr std::size_t kH2 = kHidden2;
constexpr std::size_t kW1 = 0;
constexpr std::size_t kB1 = kW1 + kH1 * kD;
constexpr std::size_t kW2 = kB1 + kH1;
constexpr std::size_t kB2 = kW2 + kH2 * kH1;
constexpr std::size_t kTrunk = kB2 + kH2;

struct Activations {
  std::array<double, kD> z;
  std::array<double, kH1> h1;
  std::array<double, kH2> h2;
  std::vector<double> probs;  // heads concatenated
};

void standardize(const DefectModel& m, const FeatureVector& x, std::array<double, kD>& z) {
  for (std::size_t i = 0; i < kD; ++i) z[i] = (x[i] - m.feature_mean[i]) * m.feature_scale[i];
}

void forward(const DefectModel& m, const FeatureVector& x, Activations& a) {
  const double* p = m.params.data();
  standardize(m, x, a.z);
  for (std::size_t r = 0; r < kH1; ++r) {
    const double* w = p + kW1 + r * kD;
    double s = p[kB1 + r];
    for (std::size_t c = 0; c < kD; ++c) s += w[c] * a.z[c];
    a.h1[r] = s < 0.0 ? 0.0 : s;  // NaN propagates to the loss check
  }
  for (std::size_t r = 0; r < kH2; ++r) {
    const double* w = p + kW2 + r * kH1;
    double s = p[kB2 + r];
    for (std::size_t c = 0; c < kH1; ++c) s += w[c] * a.h1[c];
    a.h2[r] = s < 0.0 ? 0.0 : s;
  }
  std::size_t total = 0;
  for (DefectKind d : m.defects) total += class_count(d);
  a.probs.resize(total);
  std::size_t out = 0;
  for (std::size_t h = 0; h < m.defects.size(); ++h) {
    const int k = class_count(m.defects[h]);
    const double* w = p + m.head_offset(h);
    const double* b = w + k * kH2;
    for (int r = 0; r < k; ++r) {
      double s = b[r];
      for (std::size_t c = 0; c < kH2; ++c) s += w[r * kH2 + c] * a.h2[c];
      a.probs[out + r] = s;
    }
    softmax(std::span<double>(a.probs).subspan(out, k));
    out += k;
  }
}

int augment_count(long n_max, long n_c) {
  const double ratio = static_cast<double>(n_max) / static_cast<double>(n_c);
  return static_cast<int>(std::clamp<double>(std::round(ratio), 5.0, 50.0));
}

}  // namespace

std::string_view column_name(Column c) { return c == Column::Holistic ? "holistic" : "patch"; }

Column parse_column(std::string_view name) {
  if (name == "holistic") return Column::Holistic;
  if (name == "patch") return Column::Patch;
  throw ArgumentError("unknown column '" + std::string(name) + "'");
}

std::string_view loss_name(LossKind k) {
  switch (k) {
    case LossKind::Infogain: return "infogain";
    case LossKind::CrossEntropy: return "xent";
    case LossKind::L2: return "l2";
  }
  return "infogain";
}

LossKind parse_loss(std::string_view name) {
  for (auto k : {LossKind::Infogain, LossKind::CrossEntropy, LossKind::L2}) {
    if (name == loss_name(k)) return k;
  }
  throw ArgumentError("unknown loss '" + std::string(name) + "' (expected infogain, l2 or xent)");
}

std::vector<DefectKind> column_defects(Column c) {
  std::vector<DefectKind> out(kAllDefects.begin(), kAllDefects.end());
  if (c == Column::Patch) out.pop_back();
  return out;
}

void TrainConfig::validate() const {
  auto positive = [](bool ok, const char* what) {
    if (!ok) throw ArgumentError(std::string("train config: ") + what + " must be positive");
  };
  positive(batch_size > 0, "batch_size");
  positive(lr_shared > 0, "lr_shared");
  positive(head_lr_multiplier > 0, "head_lr_multiplier");
  positive(lr_decay > 0, "lr_decay");
  positive(lr_decay_every > 0, "lr_decay_every");
  positive(weight_decay > 0, "weight_decay");
  positive(momentum > 0, "momentum");
  positive(epochs > 0, "epochs");
  positive(patch_size > 0, "patch_size");
  positive(test_patches > 0, "test_patches");
  if (momentum >= 1.0) throw ArgumentError("train config: momentum must be below 1");
}

double learning_rate(const TrainConfig& config, long iteration) {
  return config.lr_shared * std::pow(config.lr_decay, static_cast<double>(iteration / config.lr_decay_every));
}

DefectModel DefectModel::initialized(Column column, const TrainConfig& config, SeededRng& rng) {
  DefectModel m;
  m.column = column;
  m.defects = column_defects(column);
  m.config = config;
  m.feature_scale.fill(1.0);
  std::size_t total = kTrunk;
  for (DefectKind d : m.defects) total += (kH2 + 1) * class_count(d);
  m.params.assign(total, 0.0);
  auto fill = [&](std::size_t offset, std::size_t count, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < count; ++i) m.params[offset + i] = rng.uniform(-bound, bound);
  };
  fill(kW1, kH1 * kD, kD);
  fill(kW2, kH2 * kH1, kH1);
  for (std::size_t h = 0; h < m.defects.size(); ++h) fill(m.head_offset(h), class_count(m.defects[h]) * kH2, kH2);
  return m;
}

std::size_t DefectModel::trunk_size() const { return kTrunk; }

std::size_t DefectModel::head_offset(std::size_t head) const {
  std::size_t off = kTrunk;
  for (std::size_t h = 0; h < head; ++h) off += (kH2 + 1) * class_count(defects[h]);
  return off;
}

std::optional<std::size_t> DefectModel::head_index(DefectKind d) const {
  const auto it = std::find(defects.begin(), defects.end(), d);
  if (it == defects.end()) return std::nullopt;
  return static_cast<std::size_t>(it - defects.begin());
}

std::vector<std::vector<double>> DefectModel::class_probabilities(const FeatureVector& features) const {
  Activations a;
  forward(*this, features, a);
  std::vector<std::vector<double>> out;
  std::size_t off = 0;
  for (DefectKind d : defects) {
    const int k = class_count(d);
    out.emplace_back(a.probs.begin() + off, a.probs.begin() + off + k);
    off += k;
  }
  return out;
}

std::vector<double> DefectModel::decoded_scores(const FeatureVector& features) const {
  Activations a;
  forward(*this, features, a);
  std::vector<double> out;
  std::size_t off = 0;
  for (DefectKind d : defects) {
    const int k = class_count(d);
    out.push_back(decode_score(d, std::span<const double>(a.probs).subspan(off, k)));
    off += k;
  }
  return out;
}

void sgd_update(DefectModel& model, std::span<const double> grad, std::vector<double>& velocity,
                double lr, const TrainConfig& config) {
  auto& w = model.params;
  if (grad.size() != w.size()) throw ArgumentError("gradient size does not match the model");
  velocity.resize(w.size(), 0.0);
  const double head_lr = lr * config.head_lr_multiplier;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double rate = i < kTrunk ? lr : head_lr;
    velocity[i] = config.momentum * velocity[i] - rate * (grad[i] + config.weight_decay * w[i]);
    w[i] += velocity[i];
  }
}

double AugmentPlan::imbalance(const std::vector<long>& counts) {
  long lo = 0, hi = 0;
  for (long c : counts) {
    if (c <= 0) continue;
    lo = lo == 0 ? c : std::min(lo, c);
    hi = std::max(hi, c);
  }
  return lo == 0 ? 0.0 : static_cast<double>(hi) / static_cast<double>(lo);
}

AugmentPlan plan_augmentation(std::span<const LabelVector> labels) {
  if (labels.empty()) throw ArgumentError("augmentation plan needs a non-empty manifest");
  AugmentPlan plan;
  std::vector<std::array<int, kDefectCount>> classes(labels.size());
  for (int d = 0; d < kDefectCount; ++d) {
    const DefectKind defect = kAllDefects[d];
    plan.class_counts[d].assign(class_count(defect), 0);
    plan.sample_counts[d].assign(class_count(defect), 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      classes[i][d] = score_to_class(defect, labels[i][d]).class_index;
      ++plan.class_counts[d][classes[i][d]];
    }
  }
  plan.counts.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    int best = 0;
    double best_severity = -1.0, best_ratio = 0.0;
    for (int d = 0; d < kDefectCount; ++d) {
      const auto& counts = plan.class_counts[d];
      const double severity = std::abs(labels[i][d]);
      const double ratio = static_cast<double>(*std::max_element(counts.begin(), counts.end())) /
                           static_cast<double>(counts[classes[i][d]]);
      if (severity > best_severity || (severity == best_severity && ratio > best_ratio)) {
        best = d;
        best_severity = severity;
        best_ratio = ratio;
      }
    }
    const auto& counts = plan.class_counts[best];
    plan.counts[i] = augment_count(*std::max_element(counts.begin(), counts.end()), counts[classes[i][best]]);
    for (int d = 0; d < kDefectCount; ++d) plan.sample_counts[d][classes[i][d]] += plan.counts[i];
  }
  return plan;
}

std::vector<FeatureVector> augmented_features(Column column, const Raster& raster, int count,
                                              int patch_size, SeededRng& rng) {
  std::vector<FeatureVector> out;
  if (count <= 0) return out;
  if (column == Column::Holistic) {
    const Raster full = resize_bilinear(raster, kHolisticSize, kHolisticSize);
    out.push_back(compute_features(full, raster.width(), raster.height()));
    constexpr int half = kHolisticSize / 2;
    // Geometry features describe the source region a crop covers, so the
    // network can tell zoomed crops from full views.
    const int src_w = std::max(1, (raster.width() + 1) / 2), src_h = std::max(1, (raster.height() + 1) / 2);
    for (int i = 1; i < count; ++i) {
      const int x = static_cast<int>(rng.below(kHolisticSize - half + 1));
      const int y = static_cast<int>(rng.below(kHolisticSize - half + 1));
      const Raster warped = resize_bilinear(crop(full, x, y, half, half), kHolisticSize, kHolisticSize);
      out.push_back(compute_features(warped, src_w, src_h));
    }
    return out;
  }
  if (raster.width() < patch_size || raster.height() < patch_size) return out;
  for (int i = 0; i < count; ++i) {
    const int x = static_cast<int>(rng.below(raster.width() - patch_size + 1));
    const int y = static_cast<int>(rng.below(raster.height() - patch_size + 1));
    out.push_back(extract_features(crop(raster, x, y, patch_size, patch_size), FeatureMode::Patch, patch_size));
  }
  return out;
}

FeatureSet build_feature_set(Column column, std::span<const TrainingImage> images,
                             const RasterLoader& load, std::span<const int> counts,
                             const TrainConfig& config) {
  if (counts.size() != images.size()) throw ArgumentError("one sample count per image is required");
  std::vector<std::vector<FeatureVector>> per_image(images.size());
  std::string error;
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < images.size(); ++i) {
    try {
      SeededRng rng(config.seed, mix_stream(streams::kAugment, stable_hash(images[i].image_id)));
      SeededRng col_rng = rng.substream(static_cast<std::uint64_t>(column));
      per_image[i] = augmented_features(column, load(i), config.augment ? counts[i] : 1, config.patch_size, col_rng);
    } catch (const std::exception& e) {
#pragma omp critical(dfl_build_features)
      if (error.empty()) error = images[i].image_id + ": " + e.what();
    }
  }
  if (!error.empty()) throw DataError("feature extraction failed for " + error);
  FeatureSet set;
  set.column = column;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (auto& f : per_image[i]) {
      set.features.push_back(f);
      set.image.push_back(i);
    }
  }
  return set;
}

InfogainSet fallback_infogain_set() {
  InfogainSet set;
  for (int d = 0; d < kDefectCount; ++d) set[d] = gaussian_infogain(kAllDefects[d]);
  return set;
}

TrainedColumn train_column(const FeatureSet& set, std::span<const TrainingImage> images,
                           const InfogainSet& infogain, const TrainConfig& config) {
  config.validate();
  const std::size_t n = set.features.size();
  if (n == 0) throw ArgumentError("no training samples for the " + std::string(column_name(set.column)) + " column");

  SeededRng init_rng(config.seed, mix_stream(streams::kTrain, 2 * static_cast<std::uint64_t>(set.column)));
  SeededRng order_rng(config.seed, mix_stream(streams::kTrain, 2 * static_cast<std::uint64_t>(set.column) + 1));
  DefectModel model = DefectModel::initialized(set.column, config, init_rng);
  const std::size_t heads = model.defects.size();

  // Labels per sample and head; every head needs two classes to learn from.
  std::vector<std::vector<int>> cls(heads, std::vector<int>(n));
  std::vector<std::vector<double>> target(heads, std::vector<double>(n));
  for (std::size_t h = 0; h < heads; ++h) {
    const DefectKind d = model.defects[h];
    std::vector<bool> seen(class_count(d), false);
    for (std::size_t s = 0; s < n; ++s) {
      const double score = images[set.image[s]].labels[index_of(d)];
      target[h][s] = score;
      cls[h][s] = score_to_class(d, score).class_index;
      seen[cls[h][s]] = true;
    }
    if (std::count(seen.begin(), seen.end(), true) < 2) {
      throw ArgumentError("training labels for " + std::string(defect_name(d)) + " cover fewer than 2 classes");
    }
  }
  std::vector<InfogainMatrix> loss_h(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const DefectKind d = model.defects[h];
    loss_h[h] = config.loss == LossKind::Infogain ? infogain[index_of(d)] : identity_infogain(d);
    if (loss_h[h].k != class_count(d)) throw ArgumentError("infogain matrix size does not match " + std::string(defect_name(d)));
  }

  // Standardizer over the training samples.
  for (std::size_t c = 0; c < kD; ++c) {
    double mean = 0.0;
    for (const auto& f : set.features) mean += f[c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (const auto& f : set.features) var += (f[c] - mean) * (f[c] - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    model.feature_mean[c] = mean;
    model.feature_scale[c] = sd < 1e-9 ? 0.0 : 1.0 / sd;
  }

  std::vector<std::size_t> head_k(heads), head_off(heads + 1, 0);
  for (std::size_t h = 0; h < heads; ++h) {
    head_k[h] = class_count(model.defects[h]);
    head_off[h + 1] = head_off[h] + head_k[h];
  }
  const std::size_t total_k = head_off[heads];
  // Gradient rows: W1 rows, W2 rows, then head rows, each with its bias.
  const std::size_t rows = kH1 + kH2 + total_k;

  TrainingLog log;
  log.defects = model.defects;
  std::vector<double> velocity(model.params.size(), 0.0);
  std::vector<double> grad(model.params.size());
  std::vector<std::size_t> order(n);
  std::vector<Activations> act(config.batch_size);
  std::vector<std::vector<double>> dlogit(config.batch_size, std::vector<double>(total_k));
  std::vector<std::array<double, kH1>> d1(config.batch_size);
  std::vector<std::array<double, kH2>> d2(config.batch_size);
  std::vector<double> probs, targets;
  std::vector<int> labels;
  long iteration = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
    std::vector<double> epoch_loss(heads, 0.0);

    for (std::size_t start = 0; start < n; start += config.batch_size, ++iteration) {
      const std::size_t b = std::min<std::size_t>(config.batch_size, n - start);
      const std::size_t* idx = order.data() + start;

#pragma omp parallel for schedule(static)
      for (std::size_t i = 0; i < b; ++i) forward(model, set.features[idx[i]], act[i]);

      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t k = head_k[h];
        probs.resize(b * k);
        labels.resize(b);
        targets.resize(b);
        for (std::size_t i = 0; i < b; ++i) {
          std::copy_n(act[i].probs.begin() + head_off[h], k, probs.begin() + i * k);
          labels[i] = cls[h][idx[i]];
          targets[i] = target[h][idx[i]];
        }
        const LossResult r = config.loss == LossKind::L2 ? l2_decoded_loss(probs, targets, model.defects[h])
                                                         : infogain_loss(probs, labels, loss_h[h]);
        if (!std::isfinite(r.loss)) {
          std::ostringstream msg;
          msg << "non-finite loss at iteration " << iteration << " for " << defect_name(model.defects[h])
              << "; batch images:";
          for (std::size_t i = 0; i < b; ++i) msg << ' ' << images[set.image[idx[i]]].image_id;
          throw TrainError(msg.str());
        }
        epoch_loss[h] += r.loss * static_cast<double>(b);
        for (std::size_t i = 0; i < b; ++i) std::copy_n(r.grad.begin() + i * k, k, dlogit[i].begin() + head_off[h]);
      }

      const double* p = model.params.data();
#pragma omp parallel for schedule(static)
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t c = 0; c < kH2; ++c) {
          double s = 0.0;
          if (act[i].h2[c] > 0.0) {
            for (std::size_t h = 0; h < heads; ++h) {
              const double* w = p + model.head_offset(h);
              for (std::size_t r = 0; r < head_k[h]; ++r) s += w[r * kH2 + c] * dlogit[i][head_off[h] + r];
            }
          }
          d2[i][c] = s;
        }
        for (std::size_t c = 0; c < kH1; ++c) {
          double s = 0.0;
          if (act[i].h1[c] > 0.0) {
            for (std::size_t r = 0; r < kH2; ++r) s += p[kW2 + r * kH1 + c] * d2[i][r];
          }
          d1[i][c] = s;
        }
      }

      // Each row sums over the batch in sample order, so the result does not
      // depend on how rows are spread over threads.
#pragma omp parallel for schedule(dynamic, 8)
      for (std::size_t row = 0; row < rows; ++row) {
        const double* input;
        std::size_t width, w_off, b_off;
        auto delta = [&](std::size_t i) -> double {
          if (row < kH1) return d1[i][row];
          if (row < kH1 + kH2) return d2[i][row - kH1];
          return dlogit[i][row - kH1 - kH2];
        };
        if (row < kH1) {
          width = kD;
          w_off = kW1 + row * kD;
          b_off = kB1 + row;
        } else if (row < kH1 + kH2) {
          width = kH1;
          w_off = kW2 + (row - kH1) * kH1;
          b_off = kB2 + row - kH1;
        } else {
          const std::size_t flat = row - kH1 - kH2;
          const std::size_t h = std::upper_bound(head_off.begin(), head_off.end(), flat) - head_off.begin() - 1;
          const std::size_t r = flat - head_off[h];
          width = kH2;
          w_off = model.head_offset(h) + r * kH2;
          b_off = model.head_offset(h) + head_k[h] * kH2 + r;
        }
        std::fill_n(grad.begin() + w_off, width, 0.0);
        double bias = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
          const double d = delta(i);
          if (row < kH1) input = act[i].z.data();
          else if (row < kH1 + kH2) input = act[i].h1.data();
          else input = act[i].h2.data();
          bias += d;
          if (d == 0.0) continue;
          for (std::size_t c = 0; c < width; ++c) grad[w_off + c] += d * input[c];
        }
        grad[b_off] = bias;
      }

      sgd_update(model, grad, velocity, learning_rate(config, iteration), config);
    }
    for (double& l : epoch_loss) l /= static_cast<double>(n);
    log.epoch_loss.push_back(epoch_loss);
  }
  log.iterations = iteration;
  for (double v : model.params) {
    if (!std::isfinite(v)) throw TrainError("training produced non-finite parameters");
  }
  return {std::move(model), std::move(log)};
}

TrainResult train(std::span<const TrainingImage> images, const RasterLoader& load,
                  const InfogainSet& infogain, const TrainConfig& config) {
  config.validate();
  std::vector<LabelVector> labels;
  for (const auto& im : images) labels.push_back(im.labels);
  TrainResult out;
  out.plan = plan_augmentation(labels);
  const FeatureSet holistic = build_feature_set(Column::Holistic, images, load, out.plan.counts, config);
  out.holistic = train_column(holistic, images, infogain, config);
  const FeatureSet patch = build_feature_set(Column::Patch, images, load, out.plan.counts, config);
  out.patch = train_column(patch, images, infogain, config);
  return out;
}

}  // namespace dfl
