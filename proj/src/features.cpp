#include "dfl/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <string>

#include "dfl/baselines.hpp"

namespace dfl {

namespace {

namespace off = feature_offset;

constexpr int kFftMaxSide = 128;
constexpr int kDarkWindow = 15;
constexpr double kEdgeThreshold = 0.1;

struct FftwDeleter {
  void operator()(void* p) const { fftw_free(p); }
};

// FFTW's planner is not thread safe; execution on fresh arrays is.
fftw_plan r2c_plan(int n) {
  static std::mutex mu;
  static std::map<int, fftw_plan> plans;
  std::lock_guard<std::mutex> lock(mu);
  auto it = plans.find(n);
  if (it != plans.end()) return it->second;
  std::unique_ptr<double, FftwDeleter> in(static_cast<double*>(fftw_malloc(sizeof(double) * n * n)));
  std::unique_ptr<fftw_complex, FftwDeleter> out(
      static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n * (n / 2 + 1))));
  fftw_plan p = fftw_plan_dft_r2c_2d(n, n, in.get(), out.get(), FFTW_ESTIMATE);
  plans.emplace(n, p);
  return p;
}

// Values at the given fractional ranks, nearest-rank on (n - 1).
template <std::size_t N>
std::array<double, N> percentiles(std::vector<double> v, const std::array<double, N>& q) {
  std::array<double, N> out{};
  auto begin = v.begin();
  for (std::size_t i = 0; i < N; ++i) {
    const auto idx = static_cast<std::ptrdiff_t>(std::llround(q[i] * (v.size() - 1)));
    std::nth_element(begin, v.begin() + idx, v.end());
    out[i] = v[idx];
    begin = v.begin() + idx;
  }
  return out;
}

void radial_bands(const GrayRaster& luma, double* dst) {
  const int side = std::min({luma.width(), luma.height(), kFftMaxSide});
  int n = 1;
  while (n * 2 <= side) n *= 2;
  if (n < 8) {
    for (int b = 0; b < 8; ++b) dst[b] = std::log10(1e-12);
    return;
  }
  const int x0 = (luma.width() - n) / 2, y0 = (luma.height() - n) / 2;
  std::unique_ptr<double, FftwDeleter> in(static_cast<double*>(fftw_malloc(sizeof(double) * n * n)));
  const int half = n / 2 + 1;
  std::unique_ptr<fftw_complex, FftwDeleter> out(
      static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n * half)));
  double mean = 0.0;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) mean += luma.at(x0 + x, y0 + y);
  }
  mean /= static_cast<double>(n) * n;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) in.get()[y * n + x] = luma.at(x0 + x, y0 + y) - mean;
  }
  fftw_execute_dft_r2c(r2c_plan(n), in.get(), out.get());

  std::array<double, 8> sum{};
  std::array<int, 8> count{};
  const double norm = 1.0 / (static_cast<double>(n) * n);
  for (int ky = 0; ky < n; ++ky) {
    const double fy = (ky < n / 2 ? ky : ky - n) / static_cast<double>(n);
    for (int kx = 0; kx < half; ++kx) {
      if (kx == 0 && ky == 0) continue;
      const double fx = kx / static_cast<double>(n);
      const double r = std::sqrt(fx * fx + fy * fy);
      const int band = std::min(static_cast<int>(r / 0.5 * 8.0), 7);
      const double re = out.get()[ky * half + kx][0], im = out.get()[ky * half + kx][1];
      sum[band] += (re * re + im * im) * norm;
      ++count[band];
    }
  }
  for (int b = 0; b < 8; ++b) dst[b] = std::log10((count[b] ? sum[b] / count[b] : 0.0) + 1e-12);
}

}  // namespace

std::string_view mode_name(FeatureMode m) { return m == FeatureMode::Holistic ? "holistic" : "patch"; }

FeatureMode parse_mode(std::string_view name) {
  if (name == "holistic") return FeatureMode::Holistic;
  if (name == "patch") return FeatureMode::Patch;
  throw ArgumentError("unknown column '" + std::string(name) + "' (expected holistic or patch)");
}

FeatureVector compute_features(const Raster& img, int source_w, int source_h) {
  FeatureVector f{};
  const int w = img.width(), h = img.height();
  const std::size_t n = img.pixel_count();
  const double inv_n = 1.0 / static_cast<double>(n);
  const auto px = img.data();

  GrayRaster luma(w, h);
  std::array<double, 3> ch_sum{}, ch_sq{};
  double sat_sum = 0.0, sat_sq = 0.0, rg = 0.0, bg = 0.0;
  int clip_lo = 0, clip_hi = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = px[i * 3], g = px[i * 3 + 1], b = px[i * 3 + 2];
    const double l = 0.299 * r + 0.587 * g + 0.114 * b;
    luma.data()[i] = l;
    f[off::kLumaHist + std::min(static_cast<int>(l * 32.0 + 1e-9), 31)] += 1.0;
    for (int c = 0; c < 3; ++c) {
      const double v = px[i * 3 + c];
      ch_sum[c] += v;
      ch_sq[c] += v * v;
      clip_lo += v <= 0.5 / 255.0;
      clip_hi += v >= 1.0 - 0.5 / 255.0;
    }
    const Hsl hsl = rgb_to_hsl(r, g, b);
    sat_sum += hsl.s;
    sat_sq += hsl.s * hsl.s;
    f[off::kSatHist + std::min(static_cast<int>(hsl.s * 16.0), 15)] += 1.0;
    f[off::kHueHist + std::min(static_cast<int>(hsl.h * 16.0), 15)] += 1.0;
    rg += r - g;
    bg += b - g;
  }
  // Histograms hold integer counts until here.
  for (int i = off::kLumaHist; i < off::kChannelStats; ++i) f[i] /= static_cast<double>(n);
  for (int i = off::kSatHist; i < off::kDark; ++i) f[i] /= static_cast<double>(n);
  for (int c = 0; c < 3; ++c) {
    const double m = ch_sum[c] * inv_n;
    f[off::kChannelStats + 2 * c] = m;
    f[off::kChannelStats + 2 * c + 1] = std::sqrt(std::max(0.0, ch_sq[c] * inv_n - m * m));
  }

  // Dark channel.
  const GrayRaster dark = min_filter(channel_min(img), std::min({kDarkWindow, w | 1, h | 1}));
  double dark_sum = 0.0;
  for (double v : dark.data()) dark_sum += v;
  f[off::kDark] = dark_sum * inv_n;
  const std::vector<double> dark_values(dark.data().begin(), dark.data().end());
  const auto dark_p = percentiles(dark_values, std::array<double, 2>{0.1, 0.9});
  f[off::kDark + 1] = dark_p[0];
  f[off::kDark + 2] = dark_p[1];

  // Gradients, Laplacian, edge density and spatial energy layout.
  std::array<double, 9> cell{};
  double lap_sum = 0.0;
  int edges = 0;
  for (int y = 0; y < h; ++y) {
    const int ym = std::max(y - 1, 0), yp = std::min(y + 1, h - 1);
    const int cy = std::min(3 * y / h, 2);
    for (int x = 0; x < w; ++x) {
      const int xm = std::max(x - 1, 0), xp = std::min(x + 1, w - 1);
      const double gx = (luma.at(xp, y) - luma.at(xm, y)) / 2.0;
      const double gy = (luma.at(x, yp) - luma.at(x, ym)) / 2.0;
      const double e = gx * gx + gy * gy;
      // floor(2 log2 |g|) == ilogb(|g|^2), so bins come from the exponent.
      const int bin = e > 0.0 ? std::clamp(std::ilogb(e) + 16, 0, 15) : 0;
      f[off::kGradHist + bin] += 1.0;
      edges += e > kEdgeThreshold * kEdgeThreshold;
      cell[cy * 3 + std::min(3 * x / w, 2)] += e;
      lap_sum += std::abs(luma.at(xm, y) + luma.at(xp, y) + luma.at(x, ym) + luma.at(x, yp) - 4.0 * luma.at(x, y));
    }
  }
  for (int i = off::kGradHist; i < off::kLaplacian; ++i) f[i] /= static_cast<double>(n);
  f[off::kLaplacian] = lap_sum * inv_n;
  f[off::kNoise] = w >= 3 && h >= 3 ? estimate_noise(luma) : 0.0;
  radial_bands(luma, &f[off::kFft]);
  f[off::kEdgeDensity] = edges * inv_n;
  double energy = 0.0;
  for (double c : cell) energy += c;
  for (int i = 0; i < 9; ++i) f[off::kGridEnergy + i] = energy > 0.0 ? cell[i] / energy : 1.0 / 9.0;

  const std::vector<double> luma_values(luma.data().begin(), luma.data().end());
  const auto lp = percentiles(luma_values, std::array<double, 5>{0.01, 0.05, 0.5, 0.95, 0.99});
  for (int i = 0; i < 5; ++i) f[off::kPercentiles + i] = lp[i];

  f[off::kClipped] = clip_lo * inv_n / 3.0;
  f[off::kClipped + 1] = clip_hi * inv_n / 3.0;
  f[off::kChroma] = rg * inv_n;
  f[off::kChroma + 1] = bg * inv_n;
  const double sat_mean = sat_sum * inv_n;
  f[off::kSatStats] = sat_mean;
  f[off::kSatStats + 1] = std::sqrt(std::max(0.0, sat_sq * inv_n - sat_mean * sat_mean));

  const int sw = source_w > 0 ? source_w : w;
  const int sh = source_h > 0 ? source_h : h;
  f[off::kGeometry] = static_cast<double>(sw) / sh;
  f[off::kGeometry + 1] = std::log(static_cast<double>(sw) * sh);

  double lsum = 0.0, lsq = 0.0;
  for (double v : luma.data()) lsum += v;
  const double lmean = lsum * inv_n;
  for (double v : luma.data()) lsq += (v - lmean) * (v - lmean);
  const double lstd = std::sqrt(lsq * inv_n);
  f[off::kContrast] = lmean > 0.0 ? lstd / lmean : 0.0;
  return f;
}

FeatureVector extract_features(const Raster& raster, FeatureMode mode, int patch_size,
                               int source_w, int source_h) {
  if (raster.empty()) throw ArgumentError("extract_features: empty raster");
  if (mode == FeatureMode::Patch) {
    if (raster.width() != patch_size || raster.height() != patch_size) {
      throw ArgumentError("patch features need a " + std::to_string(patch_size) + "x" +
                          std::to_string(patch_size) + " raster, got " + std::to_string(raster.width()) +
                          "x" + std::to_string(raster.height()));
    }
    return compute_features(raster, source_w, source_h);
  }
  const int sw = source_w > 0 ? source_w : raster.width();
  const int sh = source_h > 0 ? source_h : raster.height();
  return compute_features(resize_bilinear(raster, kHolisticSize, kHolisticSize), sw, sh);
}

std::vector<FeatureVector> extract_features_batch(const std::vector<Raster>& rasters,
                                                  FeatureMode mode, int patch_size) {
  std::vector<FeatureVector> out(rasters.size());
  std::string error;
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < rasters.size(); ++i) {
    try {
      out[i] = extract_features(rasters[i], mode, patch_size);
    } catch (const std::exception& e) {
#pragma omp critical(dfl_feature_error)
      if (error.empty()) error = e.what();
    }
  }
  if (!error.empty()) throw ArgumentError(error);
  return out;
}

namespace serial {
std::vector<FeatureVector> extract_features_batch(const std::vector<Raster>& rasters,
                                                  FeatureMode mode, int patch_size) {
  std::vector<FeatureVector> out;
  out.reserve(rasters.size());
  for (const auto& r : rasters) out.push_back(extract_features(r, mode, patch_size));
  return out;
}
}  // namespace serial

}  // namespace dfl
