#include <algorithm>
#include <cmath>

#include "dfl/model.hpp"

namespace dfl {

namespace {

std::array<double, kDefectCount> column_scores(const DefectModel& m, const FeatureVector& f) {
  std::array<double, kDefectCount> out{};
  const auto s = m.decoded_scores(f);
  for (std::size_t h = 0; h < m.defects.size(); ++h) out[index_of(m.defects[h])] = s[h];
  return out;
}

// Window origins along one axis: every stride step, plus the last aligned
// window when the stride does not land on it.
std::vector<int> window_origins(int extent, int patch, int stride) {
  std::vector<int> out;
  for (int x = 0; x + patch <= extent; x += stride) out.push_back(x);
  if (out.back() != extent - patch) out.push_back(extent - patch);
  return out;
}

// Piecewise-linear lookup of position v among increasing centres, clamped at
// both ends.
void bracket(const std::vector<double>& centres, double v, int& i0, double& t) {
  if (v <= centres.front() || centres.size() == 1) {
    i0 = 0;
    t = 0.0;
    return;
  }
  if (v >= centres.back()) {
    i0 = static_cast<int>(centres.size()) - 2;
    t = 1.0;
    return;
  }
  const auto it = std::upper_bound(centres.begin(), centres.end(), v);
  i0 = static_cast<int>(it - centres.begin()) - 1;
  t = (v - centres[i0]) / (centres[i0 + 1] - centres[i0]);
}

}  // namespace

PredictionFeatures prediction_features(const Raster& raster, int k, int patch_size, SeededRng& rng) {
  if (raster.empty()) throw ArgumentError("predict: empty image");
  if (k < 1) throw ArgumentError("predict: patch count must be at least 1");
  PredictionFeatures out;
  out.holistic = extract_features(raster, FeatureMode::Holistic, patch_size);
  if (raster.width() < patch_size || raster.height() < patch_size) return out;
  std::vector<std::pair<int, int>> origins(k);
  for (auto& [x, y] : origins) {
    x = static_cast<int>(rng.below(raster.width() - patch_size + 1));
    y = static_cast<int>(rng.below(raster.height() - patch_size + 1));
  }
  out.patches.resize(k);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < k; ++i) {
    out.patches[i] = extract_features(crop(raster, origins[i].first, origins[i].second, patch_size, patch_size),
                                      FeatureMode::Patch, patch_size);
  }
  return out;
}

Prediction fuse(const std::array<double, kDefectCount>& holistic,
                const std::array<std::optional<double>, kDefectCount>& patch) {
  Prediction p;
  p.holistic = holistic;
  p.patch = patch;
  for (int d = 0; d < kDefectCount; ++d) {
    const bool fused = kAllDefects[d] != DefectKind::BadComposition && patch[d].has_value();
    p.scores[d] = fused ? (holistic[d] + *patch[d]) / 2.0 : holistic[d];
  }
  p.holistic_only = std::none_of(patch.begin(), patch.end(), [](const auto& v) { return v.has_value(); });
  return p;
}

void check_compatible(const DefectModel& holistic, const DefectModel& patch) {
  if (holistic.column != Column::Holistic) throw ArgumentError("first model is not a holistic column");
  if (patch.column != Column::Patch) throw ArgumentError("second model is not a patch column");
  if (holistic.feature_version != patch.feature_version || holistic.feature_version != kFeatureVersion) {
    throw ArgumentError("models were trained with feature version '" + holistic.feature_version + "' / '" +
                        patch.feature_version + "', this build uses '" + std::string(kFeatureVersion) + "'");
  }
}

Prediction predict_from_features(const DefectModel& holistic, const DefectModel& patch,
                                 const PredictionFeatures& features) {
  check_compatible(holistic, patch);
  const auto h = column_scores(holistic, features.holistic);
  std::array<std::optional<double>, kDefectCount> p{};
  if (!features.patches.empty()) {
    std::array<double, kDefectCount> sum{};
    for (const auto& f : features.patches) {
      const auto s = column_scores(patch, f);
      for (int d = 0; d < kDefectCount; ++d) sum[d] += s[d];
    }
    for (DefectKind d : patch.defects) p[index_of(d)] = sum[index_of(d)] / static_cast<double>(features.patches.size());
  }
  return fuse(h, p);
}

Prediction predict(const DefectModel& holistic, const DefectModel& patch, const Raster& raster, int k,
                   SeededRng& rng) {
  check_compatible(holistic, patch);
  return predict_from_features(holistic, patch, prediction_features(raster, k, patch.config.patch_size, rng));
}

GrayRaster localize(const DefectModel& patch, const Raster& raster, DefectKind defect, int stride) {
  if (defect == DefectKind::BadComposition) {
    throw UnsupportedDefect("bad_composition has no patch head; localization needs a patch-level defect");
  }
  if (patch.column != Column::Patch) throw ArgumentError("localize needs a patch column model");
  const auto head = patch.head_index(defect);
  if (!head) throw UnsupportedDefect("model has no head for " + std::string(defect_name(defect)));
  const int ps = patch.config.patch_size;
  if (raster.width() < ps || raster.height() < ps) {
    throw ArgumentError("localize needs an image of at least " + std::to_string(ps) + "x" + std::to_string(ps));
  }
  if (stride == 0) stride = std::max(1, ps / 2);
  if (stride < 0) throw ArgumentError("stride must be positive");

  const auto xs = window_origins(raster.width(), ps, stride);
  const auto ys = window_origins(raster.height(), ps, stride);
  std::vector<double> grid(xs.size() * ys.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const int x = xs[i % xs.size()], y = ys[i / xs.size()];
    const auto f = extract_features(crop(raster, x, y, ps, ps), FeatureMode::Patch, ps);
    grid[i] = patch.decoded_scores(f)[*head];
  }

  std::vector<double> cx, cy;
  for (int x : xs) cx.push_back(x + ps / 2.0);
  for (int y : ys) cy.push_back(y + ps / 2.0);
  GrayRaster out(raster.width(), raster.height());
  const std::size_t nx = xs.size();
  for (int y = 0; y < raster.height(); ++y) {
    int j;
    double ty;
    bracket(cy, y + 0.5, j, ty);
    const int j1 = std::min<int>(j + 1, static_cast<int>(cy.size()) - 1);
    for (int x = 0; x < raster.width(); ++x) {
      int i;
      double tx;
      bracket(cx, x + 0.5, i, tx);
      const int i1 = std::min<int>(i + 1, static_cast<int>(nx) - 1);
      const double top = (1 - tx) * grid[j * nx + i] + tx * grid[j * nx + i1];
      const double bottom = (1 - tx) * grid[j1 * nx + i] + tx * grid[j1 * nx + i1];
      out.at(x, y) = (1 - ty) * top + ty * bottom;
    }
  }
  return out;
}

}  // namespace dfl
