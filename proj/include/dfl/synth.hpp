#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dfl/core.hpp"
#include "dfl/raster.hpp"

namespace dfl {

// A graded sequence. Exposure comes as two separate sequences that share the
// BadExposure label.
enum class SynthSequence {
  ExposureUnder,
  ExposureOver,
  WhiteBalance,
  Saturation,
  Noise,
  Haze,
  Blur,
  Composition,
};

inline constexpr std::array<SynthSequence, 8> kAllSequences = {
    SynthSequence::ExposureUnder, SynthSequence::ExposureOver, SynthSequence::WhiteBalance,
    SynthSequence::Saturation,    SynthSequence::Noise,        SynthSequence::Haze,
    SynthSequence::Blur,          SynthSequence::Composition};

std::string_view sequence_name(SynthSequence s);
// Accepts sequence names and defect names; "bad_exposure"/"exposure" expands
// to both exposure directions.
std::vector<SynthSequence> parse_sequences(std::string_view comma_list);
DefectKind sequence_defect(SynthSequence s);

struct SynthSpec {
  SynthSequence sequence;
  int level = 0;

  DefectKind defect() const { return sequence_defect(sequence); }
  int level_count() const { return class_count(defect()); }
  // level / (count - 1); signed (level - 10) / 10 for saturation.
  double severity() const;
  // Ground-truth label: the class-grid score of this level.
  double score() const { return class_to_score(defect(), level); }
};

struct HazeParams {
  std::array<double, 3> airlight{1.0, 1.0, 1.0};
  double transmission = 1.0;
};

// I' = I t + A (1 - t), per channel.
Raster apply_haze(const Raster& raster, const HazeParams& params);

// Unit-sum line of the given odd length at angle (radians).
Kernel line_kernel(int length, double angle);

// Level 0 (centre level for saturation) returns the input unchanged. The rng
// supplies per-image parameters first (blur angle, airlight, white-balance
// direction) and then per-pixel noise, so one stream reused across the levels
// of a sequence keeps those parameters fixed.
Raster apply_defect(const Raster& raster, const SynthSpec& spec, SeededRng& rng);

// Stream used for every level of one (base, sequence) pair.
SeededRng sequence_rng(std::uint64_t master_seed, std::string_view base_id, SynthSequence s);

enum class BaseStyle {
  Natural,   // smooth gradients, shapes, mild texture
  Textured,  // strong high-frequency texture (noise-estimator confounder)
};

// Procedural defect-free image: luma mean in [0.35, 0.65], luma std in
// [0.12, 0.3].
Raster generate_base_image(int size, SeededRng& rng, BaseStyle style = BaseStyle::Natural);

// Writes count PNGs named base_0000.png... into dir.
std::vector<ImageRef> generate_base_corpus(int count, int size, std::uint64_t master_seed,
                                           const std::filesystem::path& dir,
                                           BaseStyle style = BaseStyle::Natural);

struct ManifestRow {
  std::string image_id;
  std::string base_id;
  std::string path;
  DefectKind defect;
  SynthSequence sequence;
  int level;
  double score;

  // Seven-defect label vector: score on the target defect, zero elsewhere.
  std::array<double, kDefectCount> labels() const;
};

using SynthManifest = std::vector<ManifestRow>;

std::string synth_image_id(std::string_view base_id, SynthSequence s, int level);

// Writes every level of every requested sequence for each base image and
// returns rows sorted by (image_id, defect, level).
SynthManifest build_synth_dataset(const std::vector<ImageRef>& base_corpus,
                                  const std::vector<SynthSequence>& sequences,
                                  std::uint64_t master_seed,
                                  const std::filesystem::path& out_dir);

void write_manifest(const SynthManifest& manifest, const std::filesystem::path& path);
SynthManifest read_manifest(const std::filesystem::path& path);

}  // namespace dfl
