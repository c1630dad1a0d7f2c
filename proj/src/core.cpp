#include "dfl/core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <string>

namespace dfl {

namespace {

constexpr std::array<double, 3> kThreeLevels = {0.0, 0.5, 1.0};
constexpr std::array<double, 5> kFiveLevels = {-1.0, -0.5, 0.0, 0.5, 1.0};

std::string format_bounds(DefectKind d) {
  return "[" + std::to_string(min_score(d)) + ", " +
         std::to_string(max_score(d)) + "]";
}

}  // namespace

std::string_view defect_name(DefectKind d) {
  switch (d) {
    case DefectKind::BadExposure: return "bad_exposure";
    case DefectKind::BadWhiteBalance: return "bad_white_balance";
    case DefectKind::OverUnderSaturation: return "saturation";
    case DefectKind::Noise: return "noise";
    case DefectKind::Haze: return "haze";
    case DefectKind::UndesiredBlur: return "blur";
    case DefectKind::BadComposition: return "composition";
  }
  return "unknown";
}

DefectKind parse_defect(std::string_view name) {
  for (DefectKind d : kAllDefects) {
    if (name == defect_name(d)) return d;
  }
  if (name == "exposure") return DefectKind::BadExposure;
  if (name == "white_balance" || name == "wb") return DefectKind::BadWhiteBalance;
  if (name == "over_under_saturation") return DefectKind::OverUnderSaturation;
  if (name == "undesired_blur" || name == "motion_blur") return DefectKind::UndesiredBlur;
  if (name == "bad_composition") return DefectKind::BadComposition;
  throw ArgumentError("unknown defect name '" + std::string(name) + "'");
}

bool is_signed(DefectKind d) { return d == DefectKind::OverUnderSaturation; }

double min_score(DefectKind d) { return is_signed(d) ? -1.0 : 0.0; }

int class_count(DefectKind d) { return is_signed(d) ? 21 : 11; }

std::span<const double> annotation_levels(DefectKind d) {
  if (is_signed(d)) return kFiveLevels;
  return kThreeLevels;
}

bool is_annotation_level(DefectKind d, double value, double tol) {
  for (double level : annotation_levels(d)) {
    if (std::abs(level - value) <= tol) return true;
  }
  return false;
}

std::string format_number(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

SeverityClassification score_to_class(DefectKind defect, double value) {
  constexpr double kTol = 1e-9;
  const double lo = min_score(defect);
  const double hi = max_score(defect);
  if (!std::isfinite(value) || value < lo - kTol || value > hi + kTol) {
    throw RangeError("score " + std::to_string(value) + " for " +
                     std::string(defect_name(defect)) + " outside " +
                     format_bounds(defect));
  }
  value = std::clamp(value, lo, hi);
  const int count = class_count(defect);
  // Position on the class grid; class 0 sits at the range minimum.
  const double pos = (value - lo) * 10.0;
  const int zero_class = is_signed(defect) ? 10 : 0;
  const double below = std::floor(pos);
  const double frac = pos - below;
  int index;
  if (std::abs(frac - 0.5) <= kTol) {
    // Midpoint: pick the neighbour closer to the zero-severity class.
    index = below < zero_class ? static_cast<int>(below) + 1 : static_cast<int>(below);
  } else {
    index = static_cast<int>(std::lround(pos));
  }
  index = std::clamp(index, 0, count - 1);
  return {defect, index, count, class_to_score(defect, index)};
}

double class_to_score(DefectKind defect, int class_index) {
  const int count = class_count(defect);
  if (class_index < 0 || class_index >= count) {
    throw RangeError("class index " + std::to_string(class_index) + " for " +
                     std::string(defect_name(defect)) + " outside [0, " +
                     std::to_string(count - 1) + "]");
  }
  return min_score(defect) + class_index / 10.0;
}

SeededRng::SeededRng(std::uint64_t master_seed, std::uint64_t stream_index)
    : master_(master_seed), stream_(stream_index) {
  std::seed_seq seq{static_cast<std::uint32_t>(master_seed),
                    static_cast<std::uint32_t>(master_seed >> 32),
                    static_cast<std::uint32_t>(stream_index),
                    static_cast<std::uint32_t>(stream_index >> 32)};
  engine_.seed(seq);
}

double SeededRng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::size_t SeededRng::below(std::size_t n) {
  if (n == 0) throw ArgumentError("SeededRng::below(0)");
  auto idx = static_cast<std::size_t>(uniform() * static_cast<double>(n));
  return idx < n ? idx : n - 1;
}

double SeededRng::normal() {
  // Marsaglia polar method; explicit so streams agree across standard libraries.
  if (spare_normal_) {
    double v = *spare_normal_;
    spare_normal_.reset();
    return v;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double m = std::sqrt(-2.0 * std::log(s) / s);
  spare_normal_ = v * m;
  return u * m;
}

SeededRng SeededRng::substream(std::uint64_t index) const {
  return SeededRng(master_, mix_stream(stream_, index));
}

std::uint64_t stable_hash(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t mix_stream(std::uint64_t purpose, std::uint64_t index) {
  // splitmix64 finalizer over the combined words.
  std::uint64_t z = purpose * 0x9E3779B97F4A7C15ULL + index + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace dfl
