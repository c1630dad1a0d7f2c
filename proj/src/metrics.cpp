#include "dfl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <unordered_map>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/students_t.hpp>

namespace dfl {

namespace {

struct ClassBins {
  // Members of each non-empty class, classes in ascending severity order.
  std::vector<std::vector<double>> members;
};

ClassBins bin_by_class(std::span<const double> truth, std::span<const double> predicted,
                       DefectKind defect, const CrossClassConfig& cfg) {
  if (truth.size() != predicted.size()) {
    throw ArgumentError("cross-class rho: label and prediction counts differ");
  }
  if (cfg.repetitions < 1) throw ArgumentError("cross-class rho: repetitions must be >= 1");
  std::vector<std::vector<double>> by_class(class_count(defect));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!std::isfinite(predicted[i])) {
      throw ArgumentError("cross-class rho: non-finite prediction");
    }
    by_class[score_to_class(defect, truth[i]).class_index].push_back(predicted[i]);
  }
  ClassBins bins;
  for (auto& c : by_class) {
    if (!c.empty()) bins.members.push_back(std::move(c));
  }
  if (static_cast<int>(bins.members.size()) < cfg.min_nonempty_classes) {
    throw MetricUndefined("cross-class rho undefined for " + std::string(defect_name(defect)) +
                          ": " + std::to_string(bins.members.size()) +
                          " non-empty classes, need " + std::to_string(cfg.min_nonempty_classes));
  }
  return bins;
}

// One repetition: draw one item per class from the repetition's own stream.
std::optional<double> sample_repetition(const ClassBins& bins, std::span<const double> class_order,
                                        const CrossClassConfig& cfg, int rep,
                                        std::vector<double>& scratch) {
  SeededRng rng(cfg.seed, mix_stream(streams::kCrossClass, static_cast<std::uint64_t>(rep)));
  for (std::size_t c = 0; c < bins.members.size(); ++c) {
    const auto& m = bins.members[c];
    scratch[c] = m[rng.below(m.size())];
  }
  return spearman(class_order, scratch);
}

MetricResult summarize(const std::vector<std::optional<double>>& per_rep, int classes) {
  MetricResult r;
  r.repetitions_used = static_cast<int>(per_rep.size());
  r.class_count = classes;
  double sum = 0.0;
  double sum_sq = 0.0;
  int valid = 0;
  for (const auto& v : per_rep) {
    if (!v) {
      ++r.degenerate_count;
      continue;
    }
    sum += *v;
    sum_sq += *v * *v;
    ++valid;
  }
  if (valid > 0) {
    r.value = sum / valid;
    if (valid > 1) {
      const double var = std::max(0.0, (sum_sq - sum * sum / valid) / (valid - 1));
      r.std_error = std::sqrt(var / valid);
    }
  }
  return r;
}

std::vector<double> class_positions(std::size_t n) {
  std::vector<double> pos(n);
  std::iota(pos.begin(), pos.end(), 0.0);
  return pos;
}

}  // namespace

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    // Positions i..j-1 (0-based) share the mean of ranks i+1..j.
    const double rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = rank;
    i = j;
  }
  return ranks;
}

std::optional<double> spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ArgumentError("spearman: length mismatch");
  if (x.size() < 2) throw ArgumentError("spearman: need at least two observations");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mean = (n + 1.0) / 2.0;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mean;
    const double dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

MetricResult cross_class_rho(std::span<const ScoredItem> labels,
                             std::span<const ScoredItem> predictions, DefectKind defect,
                             const CrossClassConfig& cfg) {
  if (labels.size() != predictions.size()) {
    throw ArgumentError("cross-class rho: " + std::to_string(labels.size()) + " labels vs " +
                        std::to_string(predictions.size()) + " predictions");
  }
  std::unordered_map<std::string, double> pred_by_id;
  pred_by_id.reserve(predictions.size());
  for (const auto& p : predictions) {
    if (!pred_by_id.emplace(p.item, p.score).second) {
      throw ArgumentError("cross-class rho: duplicate prediction for '" + p.item + "'");
    }
  }
  std::vector<double> truth, pred;
  truth.reserve(labels.size());
  pred.reserve(labels.size());
  for (const auto& l : labels) {
    auto it = pred_by_id.find(l.item);
    if (it == pred_by_id.end()) {
      throw ArgumentError("cross-class rho: no prediction for '" + l.item + "'");
    }
    truth.push_back(l.score);
    pred.push_back(it->second);
  }
  return cross_class_rho(truth, pred, defect, cfg);
}

MetricResult cross_class_rho(std::span<const double> truth, std::span<const double> predicted,
                             DefectKind defect, const CrossClassConfig& cfg) {
  const ClassBins bins = bin_by_class(truth, predicted, defect, cfg);
  const auto order = class_positions(bins.members.size());
  std::vector<std::optional<double>> per_rep(cfg.repetitions);
#pragma omp parallel
  {
    std::vector<double> scratch(bins.members.size());
#pragma omp for schedule(static)
    for (int rep = 0; rep < cfg.repetitions; ++rep) {
      per_rep[rep] = sample_repetition(bins, order, cfg, rep, scratch);
    }
  }
  return summarize(per_rep, static_cast<int>(bins.members.size()));
}

MetricResult kendalls_w(const std::vector<std::vector<double>>& scores) {
  const std::size_t m = scores.size();
  if (m < 2) throw ArgumentError("kendall's W: need at least two judges");
  const std::size_t n = scores.front().size();
  if (n < 2) throw ArgumentError("kendall's W: need at least two items");
  std::vector<double> rank_sums(n, 0.0);
  double tie_sum = 0.0;
  for (const auto& judge : scores) {
    if (judge.size() != n) throw ArgumentError("kendall's W: ragged score matrix");
    const auto ranks = average_ranks(judge);
    for (std::size_t i = 0; i < n; ++i) rank_sums[i] += ranks[i];
    std::map<double, int> groups;
    for (double v : judge) ++groups[v];
    for (const auto& [value, t] : groups) {
      const double tt = t;
      tie_sum += tt * tt * tt - tt;
    }
  }
  const double md = static_cast<double>(m);
  const double nd = static_cast<double>(n);
  const double mean = md * (nd + 1.0) / 2.0;
  double s = 0.0;
  for (double r : rank_sums) s += (r - mean) * (r - mean);
  const double denom = md * md * (nd * nd * nd - nd) - md * tie_sum;
  if (denom <= 0.0) {
    throw MetricUndefined("kendall's W undefined: every judge tied all items");
  }
  MetricResult r;
  r.value = std::clamp(12.0 * s / denom, 0.0, 1.0);
  r.repetitions_used = 1;
  r.p_value = chi_squared_sf(md * (nd - 1.0) * r.value, nd - 1.0);
  return r;
}

std::vector<bool> benjamini_hochberg(std::span<const double> p_values, double q) {
  if (!(q > 0.0 && q < 1.0)) throw ArgumentError("benjamini-hochberg: q must be in (0, 1)");
  const std::size_t m = p_values.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p_values[a] < p_values[b]; });
  std::size_t k = 0;
  for (std::size_t i = m; i > 0; --i) {
    if (p_values[order[i - 1]] <= static_cast<double>(i) * q / static_cast<double>(m)) {
      k = i;
      break;
    }
  }
  std::vector<bool> reject(m, false);
  for (std::size_t i = 0; i < k; ++i) reject[order[i]] = true;
  return reject;
}

double spearman_p_value(double rho, int n) {
  if (n < 3) throw ArgumentError("spearman p-value: need n >= 3");
  if (!std::isfinite(rho)) throw ArgumentError("spearman p-value: non-finite rho");
  if (std::abs(rho) >= 1.0) return 0.0;
  const double df = n - 2.0;
  const double t = rho * std::sqrt(df / (1.0 - rho * rho));
  const boost::math::students_t dist(df);
  return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))));
}

double chi_squared_sf(double statistic, double dof) {
  if (statistic <= 0.0) return 1.0;
  const boost::math::chi_squared dist(dof);
  return boost::math::cdf(boost::math::complement(dist, statistic));
}

namespace serial {

MetricResult cross_class_rho(std::span<const double> truth, std::span<const double> predicted,
                             DefectKind defect, const CrossClassConfig& cfg) {
  const ClassBins bins = bin_by_class(truth, predicted, defect, cfg);
  const auto order = class_positions(bins.members.size());
  std::vector<std::optional<double>> per_rep(cfg.repetitions);
  std::vector<double> scratch(bins.members.size());
  for (int rep = 0; rep < cfg.repetitions; ++rep) {
    per_rep[rep] = sample_repetition(bins, order, cfg, rep, scratch);
  }
  return summarize(per_rep, static_cast<int>(bins.members.size()));
}

}  // namespace serial

}  // namespace dfl
