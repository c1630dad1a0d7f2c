#include "dfl/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

namespace dfl {

namespace {

using nlohmann::json;

// Smoothly interpolated lattice noise in [0, 1].
GrayRaster value_noise(int size, int cells, SeededRng& rng) {
  const int n = cells + 1;
  std::vector<double> lattice(static_cast<std::size_t>(n) * n);
  for (double& v : lattice) v = rng.uniform();
  GrayRaster out(size, size);
  const double scale = static_cast<double>(cells) / size;
  for (int y = 0; y < size; ++y) {
    const double fy = (y + 0.5) * scale;
    const int iy = std::min(static_cast<int>(fy), cells - 1);
    double ty = fy - iy;
    ty = ty * ty * (3.0 - 2.0 * ty);
    for (int x = 0; x < size; ++x) {
      const double fx = (x + 0.5) * scale;
      const int ix = std::min(static_cast<int>(fx), cells - 1);
      double tx = fx - ix;
      tx = tx * tx * (3.0 - 2.0 * tx);
      const double a = lattice[iy * n + ix];
      const double b = lattice[iy * n + ix + 1];
      const double c = lattice[(iy + 1) * n + ix];
      const double d = lattice[(iy + 1) * n + ix + 1];
      out.at(x, y) = (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
    }
  }
  return out;
}

// Multi-octave value noise centred on zero, roughly in [-0.5, 0.5].
GrayRaster fractal_noise(int size, int base_cells, int octaves, SeededRng& rng) {
  GrayRaster sum(size, size);
  double amp = 1.0, total = 0.0;
  int cells = base_cells;
  for (int o = 0; o < octaves; ++o) {
    const GrayRaster layer = value_noise(size, std::min(cells, size), rng);
    for (std::size_t i = 0; i < sum.data().size(); ++i) sum.data()[i] += amp * (layer.data()[i] - 0.5);
    total += amp;
    amp *= 0.5;
    cells *= 2;
  }
  for (double& v : sum.data()) v /= total;
  return sum;
}

std::array<double, 3> random_color(SeededRng& rng, double s_lo, double s_hi, double l_lo, double l_hi) {
  return hsl_to_rgb({rng.uniform(), rng.uniform(s_lo, s_hi), rng.uniform(l_lo, l_hi)});
}

std::pair<double, double> luma_stats(const Raster& r) {
  const GrayRaster l = to_luma(r);
  double s = 0.0, s2 = 0.0;
  for (double v : l.data()) {
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(l.data().size());
  const double mean = s / n;
  return {mean, std::sqrt(std::max(0.0, s2 / n - mean * mean))};
}

void paint_shape(Raster& img, double cx, double cy, double radius, double aspect, int kind,
                 const std::array<double, 3>& color) {
  const int size = img.width();
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dx = (x + 0.5 - cx) / radius;
      const double dy = (y + 0.5 - cy) / (radius * aspect);
      // Signed distance in pixels (approximate) to the shape boundary.
      double d;
      if (kind == 0) {
        d = (std::sqrt(dx * dx + dy * dy) - 1.0) * radius;
      } else {
        d = (std::max(std::abs(dx), std::abs(dy)) - 1.0) * radius;
      }
      const double alpha = std::clamp(0.5 - d / 1.5, 0.0, 1.0);
      if (alpha <= 0.0) continue;
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = img.at(x, y, c) * (1 - alpha) + color[c] * alpha;
    }
  }
}

Raster draw_candidate(int size, SeededRng& rng, BaseStyle style) {
  Raster img(size, size);
  // Background gradient.
  const auto c1 = random_color(rng, 0.15, 0.5, 0.3, 0.7);
  const auto c2 = random_color(rng, 0.15, 0.5, 0.3, 0.7);
  const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double ux = std::cos(theta), uy = std::sin(theta);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double t = std::clamp(0.5 + ((x + 0.5) / size - 0.5) * ux + ((y + 0.5) / size - 0.5) * uy, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = c1[c] * (1 - t) + c2[c] * t;
    }
  }
  // Low-frequency illumination.
  const GrayRaster low = fractal_noise(size, 2, 3, rng);
  const double low_amp = rng.uniform(0.1, 0.3);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double g = 1.0 + low_amp * 2.0 * low.at(x, y);
      for (int c = 0; c < 3; ++c) img.at(x, y, c) *= g;
    }
  }
  // Subject on the centre or a thirds point, plus smaller secondary shapes.
  const double thirds[3] = {1.0 / 3.0, 0.5, 2.0 / 3.0};
  const double sx = thirds[rng.below(3)] * size;
  const double sy = thirds[rng.below(3)] * size;
  paint_shape(img, sx, sy, rng.uniform(0.1, 0.22) * size, rng.uniform(0.6, 1.4),
              static_cast<int>(rng.below(2)), random_color(rng, 0.25, 0.6, 0.15, 0.85));
  const int extra = 3 + static_cast<int>(rng.below(6));
  for (int i = 0; i < extra; ++i) {
    paint_shape(img, rng.uniform() * size, rng.uniform() * size, rng.uniform(0.03, 0.1) * size,
                rng.uniform(0.5, 1.5), static_cast<int>(rng.below(2)),
                random_color(rng, 0.2, 0.6, 0.15, 0.85));
  }
  // Texture. The textured style adds pixel-scale detail in patches of the
  // frame, which a Laplacian noise estimator cannot tell apart from noise.
  if (style == BaseStyle::Textured) {
    // Fine gratings of random orientation and 2-5 px period.
    struct Grating {
      double kx, ky, phase, amp;
    };
    std::array<Grating, 3> gratings;
    for (auto& g : gratings) {
      const double angle = rng.uniform(0.0, std::numbers::pi);
      const double freq = 2.0 * std::numbers::pi / rng.uniform(2.2, 5.0);
      g = {freq * std::cos(angle), freq * std::sin(angle), rng.uniform(0.0, 2.0 * std::numbers::pi),
           rng.uniform(0.05, 0.3)};
    }
    const GrayRaster mask = fractal_noise(size, 3, 2, rng);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double m = std::clamp(0.5 + 3.0 * mask.at(x, y), 0.0, 1.0);
        double t = 0.0;
        for (const auto& g : gratings) t += g.amp * std::sin(g.kx * x + g.ky * y + g.phase);
        for (int c = 0; c < 3; ++c) img.at(x, y, c) += m * t;
      }
    }
  } else {
    const double tex_amp = rng.uniform(0.0, 0.12);
    const GrayRaster tex = fractal_noise(size, std::max(4, size / 16), 3, rng);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double t = tex_amp * tex.at(x, y);
        for (int c = 0; c < 3; ++c) img.at(x, y, c) += t;
      }
    }
  }
  img.clamp();
  return img;
}

// Affine luma correction toward the drawn targets, repeated because clamping
// pulls statistics away from the target.
void normalize_contrast(Raster& img, double target_mean, double target_std) {
  for (int iter = 0; iter < 6; ++iter) {
    const auto [mean, sd] = luma_stats(img);
    if (sd < 1e-6) return;
    const double gain = target_std / sd;
    for (double& v : img.data()) v = target_mean + (v - mean) * gain;
    img.clamp();
  }
}

std::string format_level(int level) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "%02d", level);
  return buf;
}

Raster apply_exposure(const Raster& in, double gain) {
  Raster out = in;
  for (double& v : out.data()) v *= gain;
  out.clamp();
  return out;
}

Raster apply_saturation(const Raster& in, double factor) {
  Raster out(in.width(), in.height());
  const auto src = in.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < in.pixel_count(); ++i) {
    Hsl hsl = rgb_to_hsl(src[i * 3], src[i * 3 + 1], src[i * 3 + 2]);
    hsl.s = std::clamp(hsl.s * factor, 0.0, 1.0);
    const auto rgb = hsl_to_rgb(hsl);
    for (int c = 0; c < 3; ++c) dst[i * 3 + c] = rgb[c];
  }
  out.clamp();
  return out;
}

std::pair<double, double> gradient_centroid(const Raster& in) {
  const GrayRaster l = to_luma(in);
  double sx = 0.0, sy = 0.0, total = 0.0;
  for (int y = 1; y + 1 < l.height(); ++y) {
    for (int x = 1; x + 1 < l.width(); ++x) {
      const double gx = l.at(x + 1, y) - l.at(x - 1, y);
      const double gy = l.at(x, y + 1) - l.at(x, y - 1);
      const double e = gx * gx + gy * gy;
      sx += e * (x + 0.5);
      sy += e * (y + 0.5);
      total += e;
    }
  }
  if (total <= 0.0) return {in.width() / 2.0, in.height() / 2.0};
  return {sx / total, sy / total};
}

int place_window(double centroid, int full, int window, double s) {
  const double dir = centroid >= full / 2.0 ? 1.0 : -1.0;
  const double target = 0.5 + 0.45 * s * dir;
  const long x0 = std::lround(centroid - target * window);
  return static_cast<int>(std::clamp<long>(x0, 0, full - window));
}

Raster apply_composition(const Raster& in, double s) {
  const int fw = std::max(1, static_cast<int>(std::lround((1.0 - 0.3 * s) * in.width())));
  const int fh = std::max(1, static_cast<int>(std::lround((1.0 - 0.3 * s) * in.height())));
  const auto [cx, cy] = gradient_centroid(in);
  const int x0 = place_window(cx, in.width(), fw, s);
  const int y0 = place_window(cy, in.height(), fh, s);
  return resize_bilinear(crop(in, x0, y0, fw, fh), in.width(), in.height());
}

}  // namespace

std::string_view sequence_name(SynthSequence s) {
  switch (s) {
    case SynthSequence::ExposureUnder: return "exposure_under";
    case SynthSequence::ExposureOver: return "exposure_over";
    case SynthSequence::WhiteBalance: return "white_balance";
    case SynthSequence::Saturation: return "saturation";
    case SynthSequence::Noise: return "noise";
    case SynthSequence::Haze: return "haze";
    case SynthSequence::Blur: return "blur";
    case SynthSequence::Composition: return "composition";
  }
  return "unknown";
}

std::vector<SynthSequence> parse_sequences(std::string_view list) {
  std::vector<SynthSequence> out;
  auto add = [&](SynthSequence s) {
    if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
  };
  std::size_t start = 0;
  while (start <= list.size()) {
    const std::size_t end = std::min(list.find(',', start), list.size());
    const std::string_view tok = list.substr(start, end - start);
    start = end + 1;
    if (tok.empty()) continue;
    if (tok == "all") {
      for (auto s : kAllSequences) add(s);
      continue;
    }
    bool matched = false;
    for (auto s : kAllSequences) {
      if (tok == sequence_name(s)) {
        add(s);
        matched = true;
      }
    }
    if (matched) continue;
    const DefectKind d = parse_defect(tok);
    if (d == DefectKind::BadExposure) {
      add(SynthSequence::ExposureUnder);
      add(SynthSequence::ExposureOver);
      continue;
    }
    for (auto s : kAllSequences) {
      if (sequence_defect(s) == d) add(s);
    }
  }
  if (out.empty()) throw ArgumentError("no synthetic sequences requested");
  return out;
}

DefectKind sequence_defect(SynthSequence s) {
  switch (s) {
    case SynthSequence::ExposureUnder:
    case SynthSequence::ExposureOver: return DefectKind::BadExposure;
    case SynthSequence::WhiteBalance: return DefectKind::BadWhiteBalance;
    case SynthSequence::Saturation: return DefectKind::OverUnderSaturation;
    case SynthSequence::Noise: return DefectKind::Noise;
    case SynthSequence::Haze: return DefectKind::Haze;
    case SynthSequence::Blur: return DefectKind::UndesiredBlur;
    case SynthSequence::Composition: return DefectKind::BadComposition;
  }
  return DefectKind::BadExposure;
}

double SynthSpec::severity() const {
  const int count = level_count();
  if (level < 0 || level >= count) {
    throw RangeError("synthetic level " + std::to_string(level) + " outside [0, " +
                     std::to_string(count - 1) + "] for " + std::string(sequence_name(sequence)));
  }
  if (defect() == DefectKind::OverUnderSaturation) return (level - 10) / 10.0;
  return static_cast<double>(level) / (count - 1);
}

Raster apply_haze(const Raster& raster, const HazeParams& p) {
  Raster out(raster.width(), raster.height());
  const auto src = raster.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < raster.pixel_count(); ++i) {
    for (int c = 0; c < 3; ++c) {
      dst[i * 3 + c] = src[i * 3 + c] * p.transmission + p.airlight[c] * (1.0 - p.transmission);
    }
  }
  out.clamp();
  return out;
}

Kernel line_kernel(int length, double angle) {
  if (length < 1 || length % 2 == 0) throw ArgumentError("line kernel length must be odd");
  Kernel k;
  k.width = k.height = length;
  k.taps.assign(static_cast<std::size_t>(length) * length, 0.0);
  // Dense samples along the segment, each assigned to its nearest pixel.
  const double c = (length - 1) / 2.0;
  const int steps = length * 64;
  for (int i = 0; i < steps; ++i) {
    const double t = -length / 2.0 + (i + 0.5) * length / steps;
    const int x = static_cast<int>(std::floor(c + t * std::cos(angle) + 0.5));
    const int y = static_cast<int>(std::floor(c + t * std::sin(angle) + 0.5));
    if (x < 0 || y < 0 || x >= length || y >= length) continue;
    k.taps[static_cast<std::size_t>(y) * length + x] += 1.0;
  }
  const double sum = k.sum();
  for (double& t : k.taps) t /= sum;
  return k;
}

Raster apply_defect(const Raster& raster, const SynthSpec& spec, SeededRng& rng) {
  if (raster.empty()) throw ArgumentError("apply_defect: empty raster");
  const double s = spec.severity();
  // Per-image parameters are always drawn, in a fixed order, so every level
  // of a sequence sees the same values.
  const double angle = rng.uniform(0.0, std::numbers::pi);
  std::array<double, 3> airlight;
  for (double& a : airlight) a = rng.uniform(0.85, 1.0);
  const bool warm = rng.uniform() < 0.5;
  if (s == 0.0) return raster;

  switch (spec.sequence) {
    case SynthSequence::ExposureUnder: return apply_exposure(raster, std::exp2(-3.0 * s));
    case SynthSequence::ExposureOver: return apply_exposure(raster, std::exp2(3.0 * s));
    case SynthSequence::Saturation: return apply_saturation(raster, s > 0 ? 1.0 + 1.5 * s : 1.0 + s);
    case SynthSequence::Noise: {
      Raster out = raster;
      const double sigma = 0.25 * s;
      for (double& v : out.data()) v += sigma * rng.normal();
      out.clamp();
      return out;
    }
    case SynthSequence::Blur: {
      const int length = 1 + static_cast<int>(std::lround(20.0 * s));
      if (length > raster.width() || length > raster.height()) {
        throw ArgumentError("blur kernel of length " + std::to_string(length) +
                            " exceeds image " + std::to_string(raster.width()) + "x" +
                            std::to_string(raster.height()));
      }
      return convolve(raster, line_kernel(length, angle));
    }
    case SynthSequence::Haze: return apply_haze(raster, {airlight, 1.0 - 0.85 * s});
    case SynthSequence::WhiteBalance: {
      const double up = 1.0 + 0.6 * s, down = 1.0 - 0.4 * s;
      Raster out = raster;
      auto d = out.data();
      for (std::size_t i = 0; i < out.pixel_count(); ++i) {
        d[i * 3] *= warm ? up : down;
        d[i * 3 + 2] *= warm ? down : up;
      }
      out.clamp();
      return out;
    }
    case SynthSequence::Composition: return apply_composition(raster, s);
  }
  return raster;
}

SeededRng sequence_rng(std::uint64_t master_seed, std::string_view base_id, SynthSequence s) {
  std::string key(base_id);
  key += '/';
  key += sequence_name(s);
  return SeededRng(master_seed, mix_stream(streams::kDefect, stable_hash(key)));
}

Raster generate_base_image(int size, SeededRng& rng, BaseStyle style) {
  if (size < 32) throw ArgumentError("base images must be at least 32x32");
  for (int attempt = 0; attempt < 50; ++attempt) {
    Raster img = draw_candidate(size, rng, style);
    normalize_contrast(img, rng.uniform(0.42, 0.58), rng.uniform(0.15, 0.24));
    const auto [mean, sd] = luma_stats(img);
    if (mean >= 0.35 && mean <= 0.65 && sd >= 0.12 && sd <= 0.3) return img;
  }
  throw DataError("could not draw a base image within the contrast constraints");
}

std::vector<ImageRef> generate_base_corpus(int count, int size, std::uint64_t master_seed,
                                           const std::filesystem::path& dir, BaseStyle style) {
  if (count < 1) throw ArgumentError("base corpus count must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw IoError("cannot create output directory '" + dir.string() + "'");
  }
  std::vector<ImageRef> refs(count);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < count; ++i) {
    SeededRng rng(master_seed, mix_stream(streams::kBaseCorpus, static_cast<std::uint64_t>(i)));
    const Raster img = generate_base_image(size, rng, style);
    char name[32];
    std::snprintf(name, sizeof(name), "base_%04d", i);
    const auto path = dir / (std::string(name) + ".png");
    save(img, path);
    refs[i] = {name, path.string(), size, size};
  }
  return refs;
}

std::array<double, kDefectCount> ManifestRow::labels() const {
  std::array<double, kDefectCount> out{};
  out[index_of(defect)] = score;
  return out;
}

std::string synth_image_id(std::string_view base_id, SynthSequence s, int level) {
  std::string id(base_id);
  id += "__";
  id += sequence_name(s);
  id += "_";
  id += format_level(level);
  return id;
}

SynthManifest build_synth_dataset(const std::vector<ImageRef>& base_corpus,
                                  const std::vector<SynthSequence>& sequences,
                                  std::uint64_t master_seed,
                                  const std::filesystem::path& out_dir) {
  if (base_corpus.empty()) throw ArgumentError("synthetic dataset needs a non-empty base corpus");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw IoError("cannot create output directory '" + out_dir.string() + "'");
  }
  const int jobs = static_cast<int>(base_corpus.size() * sequences.size());
  std::vector<SynthManifest> parts(jobs);
  std::vector<std::string> errors(jobs);
#pragma omp parallel for schedule(dynamic)
  for (int j = 0; j < jobs; ++j) {
    try {
      const ImageRef& base = base_corpus[j / sequences.size()];
      const SynthSequence seq = sequences[j % sequences.size()];
      const Raster src = load(base.path);
      const int count = class_count(sequence_defect(seq));
      for (int level = 0; level < count; ++level) {
        SeededRng rng = sequence_rng(master_seed, base.image_id, seq);
        const SynthSpec spec{seq, level};
        const Raster img = apply_defect(src, spec, rng);
        const std::string id = synth_image_id(base.image_id, seq, level);
        const auto path = out_dir / (id + ".png");
        save(img, path);
        parts[j].push_back({id, base.image_id, path.string(), spec.defect(), seq, level, spec.score()});
      }
    } catch (const std::exception& e) {
      errors[j] = e.what();
    }
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw IoError(e);
  }
  SynthManifest manifest;
  for (auto& p : parts) manifest.insert(manifest.end(), p.begin(), p.end());
  std::sort(manifest.begin(), manifest.end(), [](const ManifestRow& a, const ManifestRow& b) {
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    if (a.defect != b.defect) return a.defect < b.defect;
    return a.level < b.level;
  });
  return manifest;
}

void write_manifest(const SynthManifest& manifest, const std::filesystem::path& path) {
  json rows = json::array();
  for (const auto& r : manifest) {
    rows.push_back({{"image_id", r.image_id},
                    {"base_id", r.base_id},
                    {"path", r.path},
                    {"defect", defect_name(r.defect)},
                    {"sequence", sequence_name(r.sequence)},
                    {"level", r.level},
                    {"score", r.score}});
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest '" + path.string() + "'");
  out << rows.dump(1) << '\n';
}

SynthManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  json rows;
  try {
    rows = json::parse(in);
  } catch (const json::exception& e) {
    throw SchemaError("manifest '" + path.string() + "' is not valid JSON: " + e.what());
  }
  if (!rows.is_array()) throw SchemaError("manifest '" + path.string() + "' must be a JSON array");
  SynthManifest out;
  for (const auto& r : rows) {
    try {
      ManifestRow row;
      row.image_id = r.at("image_id").get<std::string>();
      row.base_id = r.value("base_id", row.image_id);
      row.path = r.at("path").get<std::string>();
      row.defect = parse_defect(r.at("defect").get<std::string>());
      row.level = r.at("level").get<int>();
      row.score = r.at("score").get<double>();
      if (r.contains("sequence")) {
        row.sequence = parse_sequences(r.at("sequence").get<std::string>()).front();
      } else {
        row.sequence = parse_sequences(defect_name(row.defect)).front();
      }
      score_to_class(row.defect, row.score);
      out.push_back(std::move(row));
    } catch (const json::exception& e) {
      throw SchemaError("manifest '" + path.string() + "': " + e.what());
    } catch (const std::logic_error& e) {
      throw SchemaError("manifest '" + path.string() + "': " + e.what());
    }
  }
  return out;
}

}  // namespace dfl
