#pragma once

#include <string_view>

#include "dfl/core.hpp"
#include "dfl/raster.hpp"

namespace dfl {

enum class BaselineKind {
  NoiseImmerkaer,
  BlurHighFreq,
  HazeDarkChannel,
};

DefectKind baseline_defect(BaselineKind k);
std::string_view baseline_name(BaselineKind k);  // "noise", "blur", "haze"
BaselineKind parse_baseline(std::string_view name);

// Immerkaer's Laplacian-difference noise sigma on luma, interior pixels only.
double estimate_noise(const Raster& raster);
double estimate_noise(const GrayRaster& luma);

// Mean tile sharpness of the procedural base corpus (100 natural 256 px bases,
// seed 0).
inline constexpr double kDefaultBlurReference = 0.00259;

// Mean Laplacian variance over 16x16 luma tiles.
double mean_tile_sharpness(const Raster& raster);
// 1 - mean_tile_sharpness / reference; higher is blurrier.
double estimate_blur(const Raster& raster, double reference = kDefaultBlurReference);

// Mean dark-channel transmission deficit, 1 - t, with a 15x15 window.
double estimate_haze(const Raster& raster);

double run_baseline(BaselineKind k, const Raster& raster, double blur_reference = kDefaultBlurReference);

}  // namespace dfl
