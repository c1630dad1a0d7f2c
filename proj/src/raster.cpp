#include "dfl/raster.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dfl {

namespace {

struct Tap {
  int dx;
  int dy;
  double w;
};

std::vector<Tap> nonzero_taps(const Kernel& k) {
  std::vector<Tap> taps;
  const int cx = k.width / 2;
  const int cy = k.height / 2;
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      const double w = k.taps[static_cast<std::size_t>(y) * k.width + x];
      if (w != 0.0) taps.push_back({x - cx, y - cy, w});
    }
  }
  return taps;
}

void check_kernel(const Kernel& k) {
  if (k.width < 1 || k.height < 1 || k.width % 2 == 0 || k.height % 2 == 0) {
    throw ArgumentError("kernel must be odd-sized, got " + std::to_string(k.width) +
                        "x" + std::to_string(k.height));
  }
  if (k.taps.size() != static_cast<std::size_t>(k.width) * k.height) {
    throw ArgumentError("kernel tap count does not match its dimensions");
  }
}

void convolve_row(const GrayRaster& in, std::span<const Tap> taps, int y, GrayRaster& out) {
  const int w = in.width();
  const int h = in.height();
  for (int x = 0; x < w; ++x) {
    double acc = 0.0;
    for (const Tap& t : taps) {
      const int sx = std::clamp(x + t.dx, 0, w - 1);
      const int sy = std::clamp(y + t.dy, 0, h - 1);
      acc += t.w * in.at(sx, sy);
    }
    out.at(x, y) = acc;
  }
}

struct Sample1D {
  int i0;
  int i1;
  double f;
};

std::vector<Sample1D> bilinear_axis(int src, int dst) {
  std::vector<Sample1D> s(dst);
  const double scale = static_cast<double>(src) / dst;
  for (int i = 0; i < dst; ++i) {
    double p = (i + 0.5) * scale - 0.5;
    p = std::clamp(p, 0.0, static_cast<double>(src - 1));
    const int i0 = static_cast<int>(std::floor(p));
    const int i1 = std::min(i0 + 1, src - 1);
    s[i] = {i0, i1, p - i0};
  }
  return s;
}

void resize_row(const Raster& in, std::span<const Sample1D> xs, const Sample1D& ys, int y, Raster& out) {
  for (std::size_t x = 0; x < xs.size(); ++x) {
    const auto& sx = xs[x];
    for (int c = 0; c < 3; ++c) {
      const double top = in.at(sx.i0, ys.i0, c) * (1.0 - sx.f) + in.at(sx.i1, ys.i0, c) * sx.f;
      const double bot = in.at(sx.i0, ys.i1, c) * (1.0 - sx.f) + in.at(sx.i1, ys.i1, c) * sx.f;
      out.at(static_cast<int>(x), y, c) = top * (1.0 - ys.f) + bot * ys.f;
    }
  }
}

void check_resize(int out_w, int out_h) {
  if (out_w < 1 || out_h < 1) {
    throw ArgumentError("resize target must be at least 1x1, got " + std::to_string(out_w) +
                        "x" + std::to_string(out_h));
  }
}

void check_crop(int width, int height, int x, int y, int w, int h) {
  if (w < 1 || h < 1 || x < 0 || y < 0 || x + w > width || y + h > height) {
    throw RangeError("crop rectangle (" + std::to_string(x) + ", " + std::to_string(y) + ", " +
                     std::to_string(w) + ", " + std::to_string(h) + ") outside " +
                     std::to_string(width) + "x" + std::to_string(height));
  }
}

// van Herk / Gil-Werman running minimum over blocks of 2r + 1, on a row
// padded by edge replication.
GrayRaster min_filter_horizontal(const GrayRaster& in, int r) {
  GrayRaster out(in.width(), in.height());
  const int w = in.width();
  const int k = 2 * r + 1;
  const int padded = w + 2 * r;
  const int blocks = (padded + k - 1) / k;
#pragma omp parallel for schedule(static)
  for (int y = 0; y < in.height(); ++y) {
    std::vector<double> row(static_cast<std::size_t>(blocks) * k);
    for (int i = 0; i < static_cast<int>(row.size()); ++i) row[i] = in.at(std::clamp(i - r, 0, w - 1), y);
    std::vector<double> prefix(row.size()), suffix(row.size());
    for (int b = 0; b < blocks; ++b) {
      const int s = b * k;
      prefix[s] = row[s];
      for (int i = 1; i < k; ++i) prefix[s + i] = std::min(prefix[s + i - 1], row[s + i]);
      suffix[s + k - 1] = row[s + k - 1];
      for (int i = k - 2; i >= 0; --i) suffix[s + i] = std::min(suffix[s + i + 1], row[s + i]);
    }
    // Window [x, x + k) in padded coordinates is centred on pixel x.
    for (int x = 0; x < w; ++x) out.at(x, y) = std::min(suffix[x], prefix[x + k - 1]);
  }
  return out;
}

GrayRaster transpose(const GrayRaster& in) {
  GrayRaster out(in.height(), in.width());
  for (int y = 0; y < in.height(); ++y) {
    for (int x = 0; x < in.width(); ++x) out.at(y, x) = in.at(x, y);
  }
  return out;
}

}  // namespace

Raster::Raster(int width, int height, double fill)
    : width_(width), height_(height),
      data_(static_cast<std::size_t>(std::max(width, 0)) * std::max(height, 0) * 3, fill) {
  if (width < 0 || height < 0) throw ArgumentError("negative raster dimensions");
}

void Raster::clamp() {
  for (double& v : data_) {
    v = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
  }
}

GrayRaster::GrayRaster(int width, int height, double fill)
    : width_(width), height_(height),
      data_(static_cast<std::size_t>(std::max(width, 0)) * std::max(height, 0), fill) {
  if (width < 0 || height < 0) throw ArgumentError("negative raster dimensions");
}

Kernel Kernel::box(int size) {
  if (size < 1 || size % 2 == 0) throw ArgumentError("box kernel size must be odd");
  Kernel k;
  k.width = k.height = size;
  k.taps.assign(static_cast<std::size_t>(size) * size, 1.0 / (size * size));
  return k;
}

double Kernel::sum() const {
  double s = 0.0;
  for (double t : taps) s += t;
  return s;
}

Raster resize_bilinear(const Raster& raster, int out_w, int out_h) {
  check_resize(out_w, out_h);
  if (out_w == raster.width() && out_h == raster.height()) return raster;
  const auto xs = bilinear_axis(raster.width(), out_w);
  const auto ys = bilinear_axis(raster.height(), out_h);
  Raster out(out_w, out_h);
#pragma omp parallel for schedule(static) if (static_cast<long>(out_w) * out_h > 65536)
  for (int y = 0; y < out_h; ++y) resize_row(raster, xs, ys[y], y, out);
  out.clamp();
  return out;
}

GrayRaster resize_bilinear(const GrayRaster& gray, int out_w, int out_h) {
  check_resize(out_w, out_h);
  if (out_w == gray.width() && out_h == gray.height()) return gray;
  const auto xs = bilinear_axis(gray.width(), out_w);
  const auto ys = bilinear_axis(gray.height(), out_h);
  GrayRaster out(out_w, out_h);
  for (int y = 0; y < out_h; ++y) {
    const auto& sy = ys[y];
    for (int x = 0; x < out_w; ++x) {
      const auto& sx = xs[x];
      const double top = gray.at(sx.i0, sy.i0) * (1.0 - sx.f) + gray.at(sx.i1, sy.i0) * sx.f;
      const double bot = gray.at(sx.i0, sy.i1) * (1.0 - sx.f) + gray.at(sx.i1, sy.i1) * sx.f;
      out.at(x, y) = top * (1.0 - sy.f) + bot * sy.f;
    }
  }
  return out;
}

Raster crop(const Raster& raster, int x, int y, int w, int h) {
  check_crop(raster.width(), raster.height(), x, y, w, h);
  Raster out(w, h);
  for (int j = 0; j < h; ++j) {
    const double* src = &raster.data()[(static_cast<std::size_t>(y + j) * raster.width() + x) * 3];
    std::copy(src, src + static_cast<std::size_t>(w) * 3, &out.data()[static_cast<std::size_t>(j) * w * 3]);
  }
  return out;
}

GrayRaster crop(const GrayRaster& gray, int x, int y, int w, int h) {
  check_crop(gray.width(), gray.height(), x, y, w, h);
  GrayRaster out(w, h);
  for (int j = 0; j < h; ++j) {
    for (int i = 0; i < w; ++i) out.at(i, j) = gray.at(x + i, y + j);
  }
  return out;
}

GrayRaster convolve(const GrayRaster& gray, const Kernel& kernel) {
  check_kernel(kernel);
  const auto taps = nonzero_taps(kernel);
  GrayRaster out(gray.width(), gray.height());
#pragma omp parallel for schedule(static)
  for (int y = 0; y < gray.height(); ++y) convolve_row(gray, taps, y, out);
  return out;
}

Raster convolve(const Raster& raster, const Kernel& kernel) {
  check_kernel(kernel);
  Raster out(raster.width(), raster.height());
  for (int c = 0; c < 3; ++c) {
    const GrayRaster plane = convolve(channel(raster, c), kernel);
    const auto src = plane.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i * 3 + c] = src[i];
  }
  out.clamp();
  return out;
}

GrayRaster to_luma(const Raster& raster) {
  GrayRaster out(raster.width(), raster.height());
  const auto src = raster.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i] = 0.299 * src[i * 3] + 0.587 * src[i * 3 + 1] + 0.114 * src[i * 3 + 2];
  }
  return out;
}

GrayRaster channel(const Raster& raster, int c) {
  GrayRaster out(raster.width(), raster.height());
  const auto src = raster.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = src[i * 3 + c];
  return out;
}

Hsl rgb_to_hsl(double r, double g, double b) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double l = 0.5 * (mx + mn);
  const double d = mx - mn;
  if (d <= 0.0) return {0.0, 0.0, l};
  const double s = l > 0.5 ? d / (2.0 - mx - mn) : d / (mx + mn);
  double h;
  if (mx == r) {
    h = (g - b) / d + (g < b ? 6.0 : 0.0);
  } else if (mx == g) {
    h = (b - r) / d + 2.0;
  } else {
    h = (r - g) / d + 4.0;
  }
  return {h / 6.0, s, l};
}

std::array<double, 3> hsl_to_rgb(const Hsl& hsl) {
  if (hsl.s <= 0.0) return {hsl.l, hsl.l, hsl.l};
  const double q = hsl.l < 0.5 ? hsl.l * (1.0 + hsl.s) : hsl.l + hsl.s - hsl.l * hsl.s;
  const double p = 2.0 * hsl.l - q;
  auto hue = [p, q](double t) {
    if (t < 0.0) t += 1.0;
    if (t > 1.0) t -= 1.0;
    if (t < 1.0 / 6.0) return p + (q - p) * 6.0 * t;
    if (t < 0.5) return q;
    if (t < 2.0 / 3.0) return p + (q - p) * (2.0 / 3.0 - t) * 6.0;
    return p;
  };
  return {hue(hsl.h + 1.0 / 3.0), hue(hsl.h), hue(hsl.h - 1.0 / 3.0)};
}

GrayRaster min_filter(const GrayRaster& gray, int size) {
  if (size < 1 || size % 2 == 0) throw ArgumentError("min filter size must be odd");
  const int r = size / 2;
  return transpose(min_filter_horizontal(transpose(min_filter_horizontal(gray, r)), r));
}

GrayRaster channel_min(const Raster& raster) {
  GrayRaster out(raster.width(), raster.height());
  const auto src = raster.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i] = std::min({src[i * 3], src[i * 3 + 1], src[i * 3 + 2]});
  }
  return out;
}

Raster flip_horizontal(const Raster& raster) {
  Raster out(raster.width(), raster.height());
  for (int y = 0; y < raster.height(); ++y) {
    for (int x = 0; x < raster.width(); ++x) {
      for (int c = 0; c < 3; ++c) out.at(raster.width() - 1 - x, y, c) = raster.at(x, y, c);
    }
  }
  return out;
}

namespace serial {

GrayRaster convolve(const GrayRaster& gray, const Kernel& kernel) {
  check_kernel(kernel);
  const auto taps = nonzero_taps(kernel);
  GrayRaster out(gray.width(), gray.height());
  for (int y = 0; y < gray.height(); ++y) convolve_row(gray, taps, y, out);
  return out;
}

Raster resize_bilinear(const Raster& raster, int out_w, int out_h) {
  check_resize(out_w, out_h);
  if (out_w == raster.width() && out_h == raster.height()) return raster;
  const auto xs = bilinear_axis(raster.width(), out_w);
  const auto ys = bilinear_axis(raster.height(), out_h);
  Raster out(out_w, out_h);
  for (int y = 0; y < out_h; ++y) resize_row(raster, xs, ys[y], y, out);
  out.clamp();
  return out;
}

}  // namespace serial

}  // namespace dfl
