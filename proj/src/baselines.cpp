#include "dfl/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace dfl {

namespace {

constexpr int kTile = 16;
constexpr int kDarkWindow = 15;

void require_size(const Raster& r, int min_side, const char* what) {
  if (r.width() < min_side || r.height() < min_side) {
    throw ArgumentError(std::string(what) + " needs an image of at least " + std::to_string(min_side) +
                        "x" + std::to_string(min_side) + ", got " + std::to_string(r.width()) + "x" +
                        std::to_string(r.height()));
  }
}

// Four-neighbour Laplacian with replicated borders.
GrayRaster laplacian(const GrayRaster& g) {
  GrayRaster out(g.width(), g.height());
  const int w = g.width(), h = g.height();
  for (int y = 0; y < h; ++y) {
    const int ym = std::max(y - 1, 0), yp = std::min(y + 1, h - 1);
    for (int x = 0; x < w; ++x) {
      const int xm = std::max(x - 1, 0), xp = std::min(x + 1, w - 1);
      out.at(x, y) = g.at(xm, y) + g.at(xp, y) + g.at(x, ym) + g.at(x, yp) - 4.0 * g.at(x, y);
    }
  }
  return out;
}

double tile_grid_sharpness(const GrayRaster& lap, int x_off, int y_off) {
  double sum = 0.0;
  int tiles = 0;
  for (int ty = y_off; ty + kTile <= lap.height(); ty += kTile) {
    for (int tx = x_off; tx + kTile <= lap.width(); tx += kTile) {
      double s = 0.0, s2 = 0.0;
      for (int y = ty; y < ty + kTile; ++y) {
        for (int x = tx; x < tx + kTile; ++x) {
          s += lap.at(x, y);
          s2 += lap.at(x, y) * lap.at(x, y);
        }
      }
      const double n = kTile * kTile;
      sum += std::max(0.0, s2 / n - (s / n) * (s / n));
      ++tiles;
    }
  }
  return sum / tiles;
}

}  // namespace

DefectKind baseline_defect(BaselineKind k) {
  switch (k) {
    case BaselineKind::NoiseImmerkaer: return DefectKind::Noise;
    case BaselineKind::BlurHighFreq: return DefectKind::UndesiredBlur;
    case BaselineKind::HazeDarkChannel: return DefectKind::Haze;
  }
  return DefectKind::Noise;
}

std::string_view baseline_name(BaselineKind k) {
  switch (k) {
    case BaselineKind::NoiseImmerkaer: return "noise";
    case BaselineKind::BlurHighFreq: return "blur";
    case BaselineKind::HazeDarkChannel: return "haze";
  }
  return "unknown";
}

BaselineKind parse_baseline(std::string_view name) {
  for (auto k : {BaselineKind::NoiseImmerkaer, BaselineKind::BlurHighFreq, BaselineKind::HazeDarkChannel}) {
    if (name == baseline_name(k)) return k;
  }
  throw ArgumentError("unknown baseline method '" + std::string(name) + "' (expected noise, blur or haze)");
}

double estimate_noise(const Raster& raster) {
  require_size(raster, 3, "estimate_noise");
  return estimate_noise(to_luma(raster));
}

double estimate_noise(const GrayRaster& g) {
  if (g.width() < 3 || g.height() < 3) throw ArgumentError("estimate_noise needs at least 3x3 pixels");
  const int w = g.width(), h = g.height();
  double sum = 0.0;
  for (int y = 1; y + 1 < h; ++y) {
    for (int x = 1; x + 1 < w; ++x) {
      const double v = g.at(x - 1, y - 1) - 2 * g.at(x, y - 1) + g.at(x + 1, y - 1) -
                       2 * g.at(x - 1, y) + 4 * g.at(x, y) - 2 * g.at(x + 1, y) +
                       g.at(x - 1, y + 1) - 2 * g.at(x, y + 1) + g.at(x + 1, y + 1);
      sum += std::abs(v);
    }
  }
  return std::sqrt(std::numbers::pi / 2.0) * sum / (6.0 * (w - 2) * (h - 2));
}

double mean_tile_sharpness(const Raster& raster) {
  require_size(raster, kTile, "estimate_blur");
  const GrayRaster lap = laplacian(to_luma(raster));
  // Averaging the left/top- and right/bottom-aligned grids keeps the result
  // flip invariant when the size is not a multiple of the tile.
  const int rx = raster.width() % kTile, ry = raster.height() % kTile;
  double s = 0.0;
  for (int xo : {0, rx}) {
    for (int yo : {0, ry}) s += tile_grid_sharpness(lap, xo, yo);
  }
  return s / 4.0;
}

double estimate_blur(const Raster& raster, double reference) {
  if (!(reference > 0.0)) throw ArgumentError("blur reference must be positive");
  return 1.0 - mean_tile_sharpness(raster) / reference;
}

double estimate_haze(const Raster& raster) {
  require_size(raster, kDarkWindow, "estimate_haze");
  const GrayRaster dark = min_filter(channel_min(raster), kDarkWindow);
  std::vector<double> sorted(dark.data().begin(), dark.data().end());
  const std::size_t top = std::max<std::size_t>(1, sorted.size() / 1000);
  std::nth_element(sorted.begin(), sorted.begin() + (top - 1), sorted.end(), std::greater<>());
  const double cutoff = sorted[top - 1];

  // Every pixel at or above the cutoff, so ties do not depend on scan order.
  std::array<double, 3> airlight{};
  std::size_t n = 0;
  for (int y = 0; y < raster.height(); ++y) {
    for (int x = 0; x < raster.width(); ++x) {
      if (dark.at(x, y) < cutoff) continue;
      for (int c = 0; c < 3; ++c) airlight[c] += raster.at(x, y, c);
      ++n;
    }
  }
  for (double& a : airlight) a = std::max(a / n, 1e-6);

  GrayRaster normalized(raster.width(), raster.height());
  for (int y = 0; y < raster.height(); ++y) {
    for (int x = 0; x < raster.width(); ++x) {
      double m = raster.at(x, y, 0) / airlight[0];
      m = std::min(m, raster.at(x, y, 1) / airlight[1]);
      m = std::min(m, raster.at(x, y, 2) / airlight[2]);
      normalized.at(x, y) = m;
    }
  }
  const GrayRaster filtered = min_filter(normalized, kDarkWindow);
  double sum = 0.0;
  for (double v : filtered.data()) sum += std::clamp(0.95 * v, 0.0, 1.0);
  return sum / filtered.data().size();
}

double run_baseline(BaselineKind k, const Raster& raster, double blur_reference) {
  switch (k) {
    case BaselineKind::NoiseImmerkaer: return estimate_noise(raster);
    case BaselineKind::BlurHighFreq: return estimate_blur(raster, blur_reference);
    case BaselineKind::HazeDarkChannel: return estimate_haze(raster);
  }
  return 0.0;
}

}  // namespace dfl
