#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "dfl/error.hpp"

namespace dfl {

// Interleaved RGB, row-major, samples in [0, 1].
class Raster {
 public:
  Raster() = default;
  Raster(int width, int height, double fill = 0.0);

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return data_.empty(); }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }

  double& at(int x, int y, int c) { return data_[(static_cast<std::size_t>(y) * width_ + x) * 3 + c]; }
  double at(int x, int y, int c) const { return data_[(static_cast<std::size_t>(y) * width_ + x) * 3 + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  // Enforces the [0, 1] sample invariant; non-finite samples become 0.
  void clamp();

  friend bool operator==(const Raster&, const Raster&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<double> data_;
};

class GrayRaster {
 public:
  GrayRaster() = default;
  GrayRaster(int width, int height, double fill = 0.0);

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return data_.empty(); }

  double& at(int x, int y) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  double at(int x, int y) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  friend bool operator==(const GrayRaster&, const GrayRaster&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<double> data_;
};

// Odd-sized convolution kernel, row-major taps.
struct Kernel {
  int width = 1;
  int height = 1;
  std::vector<double> taps{1.0};

  static Kernel box(int size);
  double sum() const;
};

// PNG or JPEG chosen by extension; 8-bit samples divided by 255.
Raster load(const std::filesystem::path& path);
Raster decode_image(std::span<const unsigned char> bytes, const std::string& name);
// PNG only; samples quantized with round-half-up.
void save(const Raster& raster, const std::filesystem::path& path);
void save_gray(const GrayRaster& gray, const std::filesystem::path& path);
std::vector<unsigned char> encode_png(const Raster& raster);

Raster resize_bilinear(const Raster& raster, int out_w, int out_h);
GrayRaster resize_bilinear(const GrayRaster& gray, int out_w, int out_h);

Raster crop(const Raster& raster, int x, int y, int w, int h);
GrayRaster crop(const GrayRaster& gray, int x, int y, int w, int h);

// Edge-replicating correlation with the kernel centred on each pixel.
GrayRaster convolve(const GrayRaster& gray, const Kernel& kernel);
// Per-channel convolve; result clamped to [0, 1].
Raster convolve(const Raster& raster, const Kernel& kernel);

GrayRaster to_luma(const Raster& raster);
GrayRaster channel(const Raster& raster, int c);

struct Hsl {
  double h;  // [0, 1), fraction of a turn
  double s;
  double l;
};
Hsl rgb_to_hsl(double r, double g, double b);
std::array<double, 3> hsl_to_rgb(const Hsl& hsl);

// Square min filter of odd side with edge replication (separable).
GrayRaster min_filter(const GrayRaster& gray, int size);
// Per-pixel minimum over the three channels.
GrayRaster channel_min(const Raster& raster);

Raster flip_horizontal(const Raster& raster);

namespace serial {
// Reference implementations of the OpenMP kernels above, kept for tests and
// benchmarks. Outputs are bit-identical to the parallel versions.
GrayRaster convolve(const GrayRaster& gray, const Kernel& kernel);
Raster resize_bilinear(const Raster& raster, int out_w, int out_h);
}  // namespace serial

}  // namespace dfl
