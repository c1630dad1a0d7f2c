#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dfl/core.hpp"

namespace dfl {

struct MetricResult {
  double value = 0.0;
  int repetitions_used = 0;
  int degenerate_count = 0;
  std::optional<double> p_value;
  // Monte-Carlo standard error of the mean; zero for closed-form statistics.
  double std_error = 0.0;
  // Number of non-empty severity classes (cross-class rho only).
  int class_count = 0;
};

struct CrossClassConfig {
  int repetitions = 15000;
  std::uint64_t seed = 0;
  int min_nonempty_classes = 3;
};

struct ScoredItem {
  std::string item;
  double score;
};

// Fractional ranks starting at 1; ties share their average rank.
std::vector<double> average_ranks(std::span<const double> values);

// Tie-aware Spearman rho. nullopt when either rank vector has zero variance.
std::optional<double> spearman(std::span<const double> x, std::span<const double> y);

// Mean Spearman rho over repeated draws of one item per non-empty severity
// class. Labels and predictions are matched by item id.
MetricResult cross_class_rho(std::span<const ScoredItem> labels,
                             std::span<const ScoredItem> predictions, DefectKind defect,
                             const CrossClassConfig& cfg);
// Same statistic on aligned arrays.
MetricResult cross_class_rho(std::span<const double> truth, std::span<const double> predicted,
                             DefectKind defect, const CrossClassConfig& cfg);

// Kendall's W over a judges x items score matrix, with tie correction and a
// chi-squared p-value.
MetricResult kendalls_w(const std::vector<std::vector<double>>& scores);

// Step-up Benjamini-Hochberg; flags in input order.
std::vector<bool> benjamini_hochberg(std::span<const double> p_values, double q);

// Two-tailed p for a correlation under the t approximation with n - 2 df.
double spearman_p_value(double rho, int n);
// Upper-tail chi-squared probability.
double chi_squared_sf(double statistic, double dof);

namespace serial {
MetricResult cross_class_rho(std::span<const double> truth, std::span<const double> predicted,
                             DefectKind defect, const CrossClassConfig& cfg);
}  // namespace serial

}  // namespace dfl
