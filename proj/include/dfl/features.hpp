#pragma once

#include <array>
#include <string_view>
#include <vector>

#include "dfl/raster.hpp"

namespace dfl {

inline constexpr int kFeatureDim = 134;
inline constexpr int kHolisticSize = 224;
inline constexpr int kDefaultPatchSize = 96;
inline constexpr std::string_view kFeatureVersion = "dfl-features-1";

using FeatureVector = std::array<double, kFeatureDim>;

enum class FeatureMode { Holistic, Patch };

std::string_view mode_name(FeatureMode m);
FeatureMode parse_mode(std::string_view name);

// Layout (offsets): 0 luma histogram[32], 32 channel mean/std[6],
// 38 saturation histogram[16], 54 hue histogram[16], 70 dark channel
// mean/p10/p90, 73 log2 gradient-magnitude histogram[16], 89 mean |Laplacian|,
// 90 Immerkaer sigma, 91 radial log-power bands[8], 99 edge density,
// 100 3x3 gradient energy[9], 109 luma percentiles 1/5/50/95/99,
// 114 clipped fractions at 0 and 1, 116 mean R-G and B-G, 118 saturation
// mean/std, 120 aspect ratio and log area, 122 contrast, 123.. zeros.
namespace feature_offset {
inline constexpr int kLumaHist = 0;
inline constexpr int kChannelStats = 32;
inline constexpr int kSatHist = 38;
inline constexpr int kHueHist = 54;
inline constexpr int kDark = 70;
inline constexpr int kGradHist = 73;
inline constexpr int kLaplacian = 89;
inline constexpr int kNoise = 90;
inline constexpr int kFft = 91;
inline constexpr int kEdgeDensity = 99;
inline constexpr int kGridEnergy = 100;
inline constexpr int kPercentiles = 109;
inline constexpr int kClipped = 114;
inline constexpr int kChroma = 116;
inline constexpr int kSatStats = 118;
inline constexpr int kGeometry = 120;
inline constexpr int kContrast = 122;
}  // namespace feature_offset

// Holistic mode resizes to 224x224 first. source_w/source_h feed the
// geometry features (the raster's own size when zero). Patch mode requires a
// square raster of side patch_size.
FeatureVector extract_features(const Raster& raster, FeatureMode mode,
                               int patch_size = kDefaultPatchSize, int source_w = 0,
                               int source_h = 0);

// Features of an already-sized raster with no resizing or size checks.
FeatureVector compute_features(const Raster& raster, int source_w, int source_h);

std::vector<FeatureVector> extract_features_batch(const std::vector<Raster>& rasters,
                                                  FeatureMode mode,
                                                  int patch_size = kDefaultPatchSize);

namespace serial {
std::vector<FeatureVector> extract_features_batch(const std::vector<Raster>& rasters,
                                                  FeatureMode mode,
                                                  int patch_size = kDefaultPatchSize);
}  // namespace serial

}  // namespace dfl
