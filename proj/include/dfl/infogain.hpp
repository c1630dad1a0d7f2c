#pragma once

#include <optional>
#include <span>
#include <vector>

#include "dfl/core.hpp"

namespace dfl {

// H[l][k]: reward for predicting class k when the label is l.
struct InfogainMatrix {
  DefectKind defect = DefectKind::BadExposure;
  int k = 0;
  std::vector<double> h;  // row-major k x k

  double at(int l, int c) const { return h[static_cast<std::size_t>(l) * k + c]; }
};

InfogainMatrix identity_infogain(DefectKind defect);
// exp(-(l - k)^2 / (2 sigma^2)) in class units.
InfogainMatrix gaussian_infogain(DefectKind defect, double sigma = 1.5);

// Confusion over the defect's raw annotation levels: rows are the intended
// level, columns the level a single annotator picks.
using ConfusionMatrix = std::vector<std::vector<double>>;

// With stats: five conditionally independent annotators per true class,
// averaged and binned, P(class | true class) rescaled so each row peaks at 1,
// floored at 1e-3, diagonal set to 1. Without stats: gaussian_infogain.
InfogainMatrix derive_infogain_matrix(DefectKind defect, const std::optional<ConfusionMatrix>& stats,
                                      SeededRng& rng, int simulations = 100000);

struct LossResult {
  double loss = 0.0;
  std::vector<double> grad;  // N x K, w.r.t. pre-softmax logits
};

// E = -(1/N) sum_n sum_k H[l_n][k] log p_nk, probabilities floored at 1e-12
// inside the log.
LossResult infogain_loss(std::span<const double> probs, std::span<const int> labels,
                         const InfogainMatrix& h);

// E = (1/N) sum_n (decoded_n - target_n)^2 on the probability-weighted score.
LossResult l2_decoded_loss(std::span<const double> probs, std::span<const double> targets,
                           DefectKind defect);

// In-place numerically stable softmax of one row.
void softmax(std::span<double> logits);

// sum_k p_k class_to_score(defect, k).
double decode_score(DefectKind defect, std::span<const double> probs);

}  // namespace dfl
