#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dfl/error.hpp"

namespace dfl {

// Ordinal order matches the column order used in every report table.
enum class DefectKind : int {
  BadExposure = 0,
  BadWhiteBalance,
  OverUnderSaturation,
  Noise,
  Haze,
  UndesiredBlur,
  BadComposition,
};

inline constexpr int kDefectCount = 7;

inline constexpr std::array<DefectKind, kDefectCount> kAllDefects = {
    DefectKind::BadExposure, DefectKind::BadWhiteBalance,
    DefectKind::OverUnderSaturation, DefectKind::Noise,
    DefectKind::Haze, DefectKind::UndesiredBlur,
    DefectKind::BadComposition};

constexpr int index_of(DefectKind d) { return static_cast<int>(d); }

// Canonical snake_case names; these are the ground-truth CSV column names.
std::string_view defect_name(DefectKind d);
// Accepts canonical names plus a few aliases ("exposure", "white_balance",
// "undesired_blur", ...). Throws ArgumentError on unknown names.
DefectKind parse_defect(std::string_view name);

bool is_signed(DefectKind d);
double min_score(DefectKind d);
inline double max_score(DefectKind) { return 1.0; }
int class_count(DefectKind d);

// Raw annotator choices: {0, .5, 1}, or five levels in [-1, 1] for saturation.
std::span<const double> annotation_levels(DefectKind d);
bool is_annotation_level(DefectKind d, double value, double tol = 1e-9);

// Shortest round-trip decimal form.
std::string format_number(double v);

struct SeverityScore {
  DefectKind defect;
  double value;
};

struct SeverityClassification {
  DefectKind defect;
  int class_index;
  int class_count;
  double class_score;
};

// Nearest class on the 0.1 grid; exact midpoints go to the class nearer to
// zero severity. Values up to 1e-9 outside the range are clamped.
SeverityClassification score_to_class(DefectKind defect, double value);
double class_to_score(DefectKind defect, int class_index);

struct ImageRef {
  std::string image_id;
  std::string path;
  int width = 0;
  int height = 0;
};

// Stream (master_seed, stream_index) is a pure function of the pair, so work
// split across threads draws the same numbers as a serial loop.
class SeededRng {
 public:
  using result_type = std::uint64_t;

  SeededRng(std::uint64_t master_seed, std::uint64_t stream_index);

  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }
  result_type operator()() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  double normal();

  std::uint64_t master_seed() const { return master_; }
  std::uint64_t stream_index() const { return stream_; }

  // Derives a child stream so independent purposes never share draws.
  SeededRng substream(std::uint64_t index) const;

 private:
  std::uint64_t master_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  std::optional<double> spare_normal_;
};

// Stable 64-bit FNV-1a, used to key per-item streams by identifier.
std::uint64_t stable_hash(std::string_view s);

// Purpose tags combined into stream indices.
namespace streams {
inline constexpr std::uint64_t kBaseCorpus = 0x1000;
inline constexpr std::uint64_t kDefect = 0x2000;
inline constexpr std::uint64_t kSplit = 0x3000;
inline constexpr std::uint64_t kCrossClass = 0x4000;
inline constexpr std::uint64_t kInfogain = 0x5000;
inline constexpr std::uint64_t kAugment = 0x6000;
inline constexpr std::uint64_t kTrain = 0x7000;
inline constexpr std::uint64_t kPredict = 0x8000;
inline constexpr std::uint64_t kService = 0x9000;
inline constexpr std::uint64_t kSimulation = 0xA000;
}  // namespace streams

std::uint64_t mix_stream(std::uint64_t purpose, std::uint64_t index);

}  // namespace dfl
