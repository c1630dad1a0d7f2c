#pragma once

// Deliberately naive statistics used as oracles for the library versions.
// Nothing here calls into dfl.

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

namespace dfl::testing {

// Rank by counting: 1 + #smaller + (#equal - 1) / 2.
inline std::vector<double> brute_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, equal = 0;
    for (double w : v) {
      if (w < v[i]) ++less;
      if (w == v[i]) ++equal;
    }
    r[i] = 1.0 + less + (equal - 1.0) / 2.0;
  }
  return r;
}

// Pearson on counted ranks using raw power sums.
inline std::optional<double> brute_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const auto a = brute_ranks(x);
  const auto b = brute_ranks(y);
  const double n = static_cast<double>(a.size());
  double sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += a[i];
    sb += b[i];
    sab += a[i] * b[i];
    saa += a[i] * a[i];
    sbb += b[i] * b[i];
  }
  const double va = n * saa - sa * sa;
  const double vb = n * sbb - sb * sb;
  if (std::abs(va) < 1e-9 || std::abs(vb) < 1e-9) return std::nullopt;
  return (n * sab - sa * sb) / std::sqrt(va * vb);
}

// W = (12 sum R_i^2 - 3 m^2 n (n+1)^2) / (m^2 (n^3 - n) - m sum T_j), with the
// tie term counted pairwise.
inline std::optional<double> brute_kendall_w(const std::vector<std::vector<double>>& s) {
  const double m = static_cast<double>(s.size());
  const double n = static_cast<double>(s[0].size());
  std::vector<double> R(s[0].size(), 0.0);
  double T = 0.0;
  for (const auto& judge : s) {
    const auto r = brute_ranks(judge);
    for (std::size_t i = 0; i < r.size(); ++i) R[i] += r[i];
    for (std::size_t i = 0; i < judge.size(); ++i) {
      bool first = true;
      for (std::size_t j = 0; j < i; ++j) first &= judge[j] != judge[i];
      if (!first) continue;
      double t = 0;
      for (double v : judge) t += v == judge[i];
      T += t * t * t - t;
    }
  }
  double sum_sq = 0.0;
  for (double r : R) sum_sq += r * r;
  const double denom = m * m * (n * n * n - n) - m * T;
  if (denom <= 0.0) return std::nullopt;
  return (12.0 * sum_sq - 3.0 * m * m * n * (n + 1.0) * (n + 1.0)) / denom;
}

// Reject every p at or below the largest p_(k) satisfying p_(k) <= k q / m.
inline std::vector<bool> brute_bh(const std::vector<double>& p, double q) {
  std::vector<double> sorted = p;
  std::sort(sorted.begin(), sorted.end());
  const double m = static_cast<double>(p.size());
  double cutoff = -1.0;
  for (std::size_t k = 1; k <= sorted.size(); ++k) {
    if (sorted[k - 1] <= k * q / m) cutoff = sorted[k - 1];
  }
  std::vector<bool> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[i] <= cutoff;
  return out;
}

inline double student_t_density(double x, double df) {
  const double c = std::lgamma((df + 1.0) / 2.0) - std::lgamma(df / 2.0) - 0.5 * std::log(df * M_PI);
  return std::exp(c - (df + 1.0) / 2.0 * std::log1p(x * x / df));
}

// Two-tailed tail mass by composite Simpson over [0, |t|].
inline double quadrature_t_two_tailed(double t, double df, int intervals = 200000) {
  const double a = 0.0, b = std::abs(t);
  const double h = (b - a) / intervals;
  double s = student_t_density(a, df) + student_t_density(b, df);
  for (int i = 1; i < intervals; ++i) s += (i % 2 ? 4.0 : 2.0) * student_t_density(a + i * h, df);
  const double central = s * h / 3.0;
  return 1.0 - 2.0 * central;
}

}  // namespace dfl::testing
