#pragma once

// Categorical value supports and the HL-Gauss (truncated normal) target projection.

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "deas/error.hpp"

namespace deas {

/// Uniform bins over [v_min, v_max].
struct SupportGrid {
  double v_min = 0.0;
  double v_max = 1.0;
  int m = 2;
  Eigen::VectorXd edges;    // [m + 1]
  Eigen::VectorXd centers;  // [m]

  [[nodiscard]] double width() const { return (v_max - v_min) / m; }
  [[nodiscard]] double range() const { return v_max - v_min; }
  bool operator==(const SupportGrid& o) const { return v_min == o.v_min && v_max == o.v_max && m == o.m; }
};

/// Probabilities over the bins of a SupportGrid.
struct CategoricalDist {
  Eigen::VectorXd probs;

  static CategoricalDist from_logits(const Eigen::VectorXd& logits) {
    Eigen::VectorXd e = (logits.array() - logits.maxCoeff()).exp();
    return {e / e.sum()};
  }
  [[nodiscard]] bool valid(double tol = 1e-9) const {
    return probs.size() > 0 && (probs.array() >= 0.0).all() && std::abs(probs.sum() - 1.0) <= tol;
  }
};

inline SupportGrid make_support(double v_min, double v_max, int m) {
  require_config(std::isfinite(v_min) && std::isfinite(v_max) && v_min < v_max,
                 "support requires finite v_min < v_max");
  require_config(m >= 2, "support requires at least 2 bins");
  SupportGrid g{v_min, v_max, m, Eigen::VectorXd(m + 1), Eigen::VectorXd(m)};
  const double w = (v_max - v_min) / m;
  for (int i = 0; i <= m; ++i) g.edges[i] = v_min + w * i;
  g.edges[m] = v_max;
  for (int i = 0; i < m; ++i) g.centers[i] = v_min + w * (i + 0.5);
  return g;
}

inline constexpr double kMinSupportWidth = 1.0;

/// A range narrower than `floor` becomes [c - floor, c + floor] about its center c.
inline std::pair<double, double> widen_to_floor(std::pair<double, double> r, double floor = kMinSupportWidth) {
  if (r.second - r.first >= floor) return r;
  const double c = 0.5 * (r.first + r.second);
  return {c - floor, c + floor};
}

namespace detail {
// sum_{k<n} exp(k * log_ratio), via expm1 so ratios near 1 keep full precision.
inline double geometric_sum_log(double log_ratio, long n) {
  if (log_ratio == 0.0) return static_cast<double>(n);
  return std::expm1(static_cast<double>(n) * log_ratio) / std::expm1(log_ratio);
}
}  // namespace detail

/// Theoretical return bounds for K = ceil(L / H) options of H steps:
/// r * (sum_{k<H} g1^k) * (sum_{j<K} (g2^H)^j). Not widened.
inline std::pair<double, double> universal_support(double r_min, double r_max, int H, int L, double gamma1,
                                                   double gamma2) {
  require_config(H >= 1, "option length must be >= 1");
  require_config(L >= H, "horizon must be >= option length");
  require_config(gamma1 > 0.0 && gamma1 <= 1.0 && gamma2 > 0.0 && gamma2 <= 1.0, "discounts must lie in (0, 1]");
  require_config(r_min <= r_max, "r_min must not exceed r_max");
  const long K = (L + H - 1) / H;
  require_config(K >= 1, "need at least one option");
  const double scale = detail::geometric_sum_log(std::log1p(gamma1 - 1.0), H) *
                       detail::geometric_sum_log(H * std::log1p(gamma2 - 1.0), K);
  return {r_min * scale, r_max * scale};
}

/// Linear-interpolated sample quantile of sorted data (numpy's default rule).
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  require_config(!sorted.empty(), "quantile of an empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

/// [q01, q99] of the sample, widened symmetrically by `pad` about its center,
/// then floored to kMinSupportWidth.
inline std::pair<double, double> data_centric_support(std::vector<double> returns, double pad = 0.2) {
  require_config(!returns.empty(), "data-centric support needs at least one return");
  require_config(pad >= 0.0, "padding must be non-negative");
  std::sort(returns.begin(), returns.end());
  const double lo = quantile_sorted(returns, 0.01);
  const double hi = quantile_sorted(returns, 0.99);
  const double c = 0.5 * (lo + hi);
  const double half = 0.5 * (hi - lo) * (1.0 + pad);
  return widen_to_floor({c - half, c + half});
}

/// Standard deviation of the HL-Gauss target: coef times the bin width.
inline double hl_gauss_sigma(const SupportGrid& g, double coef = 0.75) { return coef * g.width(); }

namespace detail {
/// P(a < Z < b) for a standard normal, accurate in both tails.
inline double normal_interval_mass(double a, double b) {
  if (a >= 0.0) return 0.5 * (std::erfc(a * M_SQRT1_2) - std::erfc(b * M_SQRT1_2));
  if (b <= 0.0) return 0.5 * (std::erfc(-b * M_SQRT1_2) - std::erfc(-a * M_SQRT1_2));
  return 0.5 * (std::erf(b * M_SQRT1_2) - std::erf(a * M_SQRT1_2));
}
}  // namespace detail

/// Writes the truncated-normal bin masses for N(mu, sigma^2) into `out` (length m).
/// Mass outside [v_min, v_max] is discarded and the rest renormalized; when
/// nothing numerically survives, all mass goes to the bin nearest mu.
inline void project_truncated_normal_into(double mu, double sigma, const SupportGrid& g,
                                          Eigen::Ref<Eigen::VectorXd> out) {
  require_config(sigma > 0.0, "projection sigma must be positive");
  require_shape(out.size() == g.m, "projection output length must equal bin count");
  if (std::isnan(mu)) {
    // Propagate so the caller's loss turns non-finite instead of picking a bin.
    out.setConstant(std::numeric_limits<double>::quiet_NaN());
    return;
  }
  double total = 0.0;
  for (int i = 0; i < g.m; ++i) {
    const double mass = detail::normal_interval_mass((g.edges[i] - mu) / sigma, (g.edges[i + 1] - mu) / sigma);
    out[i] = std::max(mass, 0.0);
    total += out[i];
  }
  if (!(total > 0.0) || !std::isfinite(total)) {
    out.setZero();
    const int idx = mu <= g.v_min ? 0
                    : mu >= g.v_max
                        ? g.m - 1
                        : std::min(g.m - 1, static_cast<int>(std::floor((mu - g.v_min) / g.width())));
    out[idx] = 1.0;
    return;
  }
  out /= total;
}

inline CategoricalDist project_truncated_normal(double mu, double sigma, const SupportGrid& g) {
  CategoricalDist d{Eigen::VectorXd(g.m)};
  project_truncated_normal_into(mu, sigma, g, d.probs);
  return d;
}

inline double dist_mean(const Eigen::VectorXd& probs, const SupportGrid& g) {
  require_shape(probs.size() == g.m, "distribution length does not match the support");
  return probs.dot(g.centers);
}

inline double dist_mean(const CategoricalDist& d, const SupportGrid& g) { return dist_mean(d.probs, g); }

/// Column-wise softmax of a [m x B] logit matrix.
inline Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd p = logits;
  for (Eigen::Index j = 0; j < p.cols(); ++j) {
    auto c = p.col(j);
    c.array() = (c.array() - c.maxCoeff()).exp();
    c /= c.sum();
  }
  return p;
}

/// Column-wise log-softmax of a [m x B] logit matrix.
inline Eigen::MatrixXd log_softmax_columns(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd lp = logits;
  for (Eigen::Index j = 0; j < lp.cols(); ++j) {
    auto c = lp.col(j);
    const double mx = c.maxCoeff();
    const double lse = mx + std::log((c.array() - mx).exp().sum());
    c.array() -= lse;
  }
  return lp;
}

/// -sum_i p_i log q_i, with 0 log 0 = 0.
inline double cross_entropy(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  require_shape(p.size() == q.size(), "cross_entropy: length mismatch");
  double s = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s -= p[i] * std::log(q[i]);
  return s;
}

inline double entropy(const Eigen::VectorXd& p) { return cross_entropy(p, p); }

}  // namespace deas
