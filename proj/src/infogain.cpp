#include "dfl/infogain.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dfl {

namespace {

constexpr double kProbFloor = 1e-12;
constexpr double kInfogainFloor = 1e-3;

// Raw levels as multiples of 0.5 (0..2, or -2..2 for the signed scale).
int half_units(DefectKind defect, std::size_t level_index) {
  const auto levels = annotation_levels(defect);
  return static_cast<int>(std::lround(levels[level_index] * 2.0));
}

void validate_labels(std::span<const int> labels, int k, std::size_t rows) {
  if (rows != labels.size()) throw ArgumentError("loss: probabilities and labels disagree on batch size");
  for (int l : labels) {
    if (l < 0 || l >= k) {
      throw ArgumentError("loss: label " + std::to_string(l) + " outside [0, " + std::to_string(k) + ")");
    }
  }
}

}  // namespace

InfogainMatrix identity_infogain(DefectKind defect) {
  InfogainMatrix m{defect, class_count(defect), {}};
  m.h.assign(static_cast<std::size_t>(m.k) * m.k, 0.0);
  for (int i = 0; i < m.k; ++i) m.h[static_cast<std::size_t>(i) * m.k + i] = 1.0;
  return m;
}

InfogainMatrix gaussian_infogain(DefectKind defect, double sigma) {
  if (!(sigma > 0.0)) throw ArgumentError("infogain sigma must be positive");
  InfogainMatrix m{defect, class_count(defect), {}};
  m.h.resize(static_cast<std::size_t>(m.k) * m.k);
  for (int l = 0; l < m.k; ++l) {
    for (int c = 0; c < m.k; ++c) {
      const double d = l - c;
      m.h[static_cast<std::size_t>(l) * m.k + c] = std::exp(-d * d / (2.0 * sigma * sigma));
    }
  }
  return m;
}

InfogainMatrix derive_infogain_matrix(DefectKind defect, const std::optional<ConfusionMatrix>& stats,
                                      SeededRng& rng, int simulations) {
  if (!stats) return gaussian_infogain(defect);
  const auto levels = annotation_levels(defect);
  const std::size_t raw = levels.size();
  if (stats->size() != raw) {
    throw ArgumentError("confusion matrix for " + std::string(defect_name(defect)) + " must be " +
                        std::to_string(raw) + "x" + std::to_string(raw));
  }
  std::vector<std::vector<double>> cdf(raw);
  for (std::size_t i = 0; i < raw; ++i) {
    const auto& row = (*stats)[i];
    if (row.size() != raw) throw ArgumentError("confusion matrix rows must have " + std::to_string(raw) + " entries");
    double total = 0.0;
    for (double v : row) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ArgumentError("confusion counts must be finite and non-negative");
      total += v;
    }
    if (!(total > 0.0)) throw ArgumentError("confusion matrix row " + std::to_string(i) + " has zero total");
    double acc = 0.0;
    for (double v : row) cdf[i].push_back(acc += v / total);
    cdf[i].back() = 1.0;
  }
  if (simulations < 1) throw ArgumentError("simulation count must be >= 1");

  const int k = class_count(defect);
  const int lowest = half_units(defect, 0);
  InfogainMatrix m{defect, k, std::vector<double>(static_cast<std::size_t>(k) * k, 0.0)};
#pragma omp parallel for schedule(dynamic)
  for (int l = 0; l < k; ++l) {
    SeededRng row_rng = rng.substream(static_cast<std::uint64_t>(l));
    // Five raw levels whose mean is the class score, as evenly spread as
    // possible: T half-units split into q and q + 1.
    const int total = static_cast<int>(std::lround(class_to_score(defect, l) * 10.0));
    const int q = static_cast<int>(std::floor(total / 5.0));
    const int r = total - 5 * q;
    std::array<std::size_t, 5> intended{};
    for (int a = 0; a < 5; ++a) intended[a] = static_cast<std::size_t>((a < r ? q + 1 : q) - lowest);
    std::vector<double> counts(k, 0.0);
    for (int s = 0; s < simulations; ++s) {
      double sum = 0.0;
      for (int a = 0; a < 5; ++a) {
        const auto& c = cdf[intended[a]];
        const double u = row_rng.uniform();
        const auto pick = static_cast<std::size_t>(std::upper_bound(c.begin(), c.end(), u) - c.begin());
        sum += levels[std::min(pick, raw - 1)];
      }
      counts[score_to_class(defect, sum / 5.0).class_index] += 1.0;
    }
    const double peak = *std::max_element(counts.begin(), counts.end());
    for (int c = 0; c < k; ++c) {
      double v = std::max(counts[c] / peak, kInfogainFloor);
      if (c == l) v = 1.0;
      m.h[static_cast<std::size_t>(l) * k + c] = v;
    }
  }
  return m;
}

void softmax(std::span<double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) sum += (v = std::exp(v - mx));
  for (double& v : z) v /= sum;
}

double decode_score(DefectKind defect, std::span<const double> probs) {
  if (static_cast<int>(probs.size()) != class_count(defect)) {
    throw ArgumentError("decode_score: expected " + std::to_string(class_count(defect)) + " probabilities");
  }
  double s = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) s += probs[k] * class_to_score(defect, static_cast<int>(k));
  return s;
}

LossResult infogain_loss(std::span<const double> probs, std::span<const int> labels,
                         const InfogainMatrix& h) {
  const int k = h.k;
  if (k <= 0 || probs.size() % k != 0) throw ArgumentError("infogain_loss: probabilities are not N x K");
  const std::size_t n = probs.size() / k;
  validate_labels(labels, k, n);
  LossResult out;
  out.grad.resize(probs.size());
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int l = labels[i];
    double row_sum = 0.0;
    for (int c = 0; c < k; ++c) {
      const double hv = h.at(l, c);
      row_sum += hv;
      out.loss -= hv * std::log(std::max(probs[i * k + c], kProbFloor));
    }
    for (int c = 0; c < k; ++c) out.grad[i * k + c] = inv_n * (probs[i * k + c] * row_sum - h.at(l, c));
  }
  out.loss *= inv_n;
  return out;
}

LossResult l2_decoded_loss(std::span<const double> probs, std::span<const double> targets,
                           DefectKind defect) {
  const int k = class_count(defect);
  if (probs.size() % k != 0 || probs.size() / k != targets.size()) {
    throw ArgumentError("l2_decoded_loss: probabilities and targets disagree on batch size");
  }
  const std::size_t n = targets.size();
  LossResult out;
  out.grad.resize(probs.size());
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = probs.subspan(i * k, k);
    const double s = decode_score(defect, row);
    const double d = s - targets[i];
    out.loss += d * d;
    for (int c = 0; c < k; ++c) {
      out.grad[i * k + c] = 2.0 * inv_n * d * row[c] * (class_to_score(defect, c) - s);
    }
  }
  out.loss *= inv_n;
  return out;
}

}  // namespace dfl
