#pragma once

// Exact reference values for tabular tasks.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "deas/dataset.hpp"
#include "deas/envs.hpp"
#include "deas/error.hpp"

namespace deas {

inline constexpr long kMaxOptionSequences = 1'000'000;

/// Option index <-> action sequence, first action most significant.
inline std::vector<int> decode_option(long index, int n_actions, int H) {
  std::vector<int> a(static_cast<std::size_t>(H));
  for (int k = H - 1; k >= 0; --k) {
    a[static_cast<std::size_t>(k)] = static_cast<int>(index % n_actions);
    index /= n_actions;
  }
  return a;
}

inline long encode_option(std::span<const int> actions, int n_actions) {
  long idx = 0;
  for (int a : actions) idx = idx * n_actions + a;
  return idx;
}

inline long count_options(int n_actions, int H) {
  long n = 1;
  for (int k = 0; k < H; ++k) {
    n *= n_actions;
    if (n > kMaxOptionSequences)
      throw ConfigError("option enumeration budget exceeded: " + std::to_string(n_actions) + "^" + std::to_string(H) +
                        " > " + std::to_string(kMaxOptionSequences));
  }
  return n;
}

struct OptionOutcome {
  double rhat = 0.0;
  int next = 0;
};

/// Executes a fixed action sequence from s.
inline OptionOutcome run_option(const TabularMDP& m, int s, std::span<const int> actions, double gamma1) {
  OptionOutcome o{0.0, s};
  double disc = 1.0;
  for (int a : actions) {
    o.rhat += disc * m.reward[o.next][a];
    o.next = m.next[o.next][a];
    disc *= gamma1;
  }
  return o;
}

struct SmdpQTable {
  int H = 1;
  int n_actions = 0;
  Eigen::MatrixXd q;  // [n_states x n_options]
  int iterations = 0;

  [[nodiscard]] Eigen::VectorXd values() const { return q.rowwise().maxCoeff(); }
};

/// Fixed point of Q(s,o) = R-hat(s,o) + gamma2^H max_o' Q(s', o') by value iteration.
inline SmdpQTable oracle_smdp_q(const TabularMDP& m, int H, double gamma1, double gamma2, double tol = 1e-10,
                                int max_iterations = 10'000'000) {
  m.validate();
  require_config(H >= 1, "option length must be >= 1");
  require_config(gamma2 > 0.0 && gamma2 < 1.0, "gamma2 must lie in (0, 1)");
  const long n_opt = count_options(m.n_actions, H);
  std::vector<OptionOutcome> out(static_cast<std::size_t>(m.n_states * n_opt));
  for (int s = 0; s < m.n_states; ++s)
    for (long o = 0; o < n_opt; ++o)
      out[static_cast<std::size_t>(s * n_opt + o)] = run_option(m, s, decode_option(o, m.n_actions, H), gamma1);
  const double boot = std::pow(gamma2, H);
  SmdpQTable t{H, m.n_actions, Eigen::MatrixXd::Zero(m.n_states, n_opt), 0};
  Eigen::VectorXd v = Eigen::VectorXd::Zero(m.n_states);
  for (; t.iterations < max_iterations; ++t.iterations) {
    double change = 0.0;
    for (int s = 0; s < m.n_states; ++s)
      for (long o = 0; o < n_opt; ++o) {
        const auto& oc = out[static_cast<std::size_t>(s * n_opt + o)];
        const double nq = oc.rhat + boot * v[oc.next];
        change = std::max(change, std::abs(nq - t.q(s, o)));
        t.q(s, o) = nq;
      }
    v = t.q.rowwise().maxCoeff();
    if (change <= tol) break;
  }
  return t;
}

/// tau-expectile of a weighted finite sample: the root of
/// sum_i w_i |tau - 1(x_i < v)| (x_i - v) = 0, solved exactly segment by segment.
inline double sample_expectile(std::span<const double> xs, std::span<const double> ws, double tau) {
  require_config(!xs.empty() && xs.size() == ws.size(), "expectile needs a non-empty weighted sample");
  require_config(tau >= 0.0 && tau <= 1.0, "tau must lie in [0, 1]");
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  if (tau == 1.0) return xs[order.back()];
  if (tau == 0.0) return xs[order.front()];
  double w_hi = 0.0, s_hi = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    w_hi += ws[i];
    s_hi += ws[i] * xs[i];
  }
  double w_lo = 0.0, s_lo = 0.0;
  // Candidate segment j: items order[0..j) lie below v.
  for (std::size_t j = 0; j <= order.size(); ++j) {
    const double den = (1.0 - tau) * w_lo + tau * w_hi;
    if (den > 0.0) {
      const double v = ((1.0 - tau) * s_lo + tau * s_hi) / den;
      const double lo = j == 0 ? -std::numeric_limits<double>::infinity() : xs[order[j - 1]];
      const double hi = j == order.size() ? std::numeric_limits<double>::infinity() : xs[order[j]];
      if (v >= lo && v <= hi) return v;
    }
    if (j < order.size()) {
      const std::size_t i = order[j];
      w_lo += ws[i];
      s_lo += ws[i] * xs[i];
      w_hi -= ws[i];
      s_hi -= ws[i] * xs[i];
    }
  }
  // Rounding can leave the root just outside every segment; fall back to bisection.
  double a = xs[order.front()], b = xs[order.back()];
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (a + b);
    double f = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) f += ws[i] * (xs[i] < mid ? 1.0 - tau : tau) * (xs[i] - mid);
    (f > 0.0 ? a : b) = mid;
  }
  return 0.5 * (a + b);
}

/// One distinct in-dataset option outcome at a state.
struct DatasetOption {
  int state = 0;
  long option = 0;
  int next = 0;
  double rhat = 0.0;
  double mask = 1.0;
  double count = 0.0;
};

struct ExpectileOracle {
  std::vector<double> v;        // NaN for uncovered states
  std::vector<bool> covered;
  std::vector<DatasetOption> options;
  long dropped = 0;             // occurrences bootstrapping into uncovered states
  int iterations = 0;
  double gamma2_H = 1.0;

  /// R-hat + mask * gamma2^H * V(s') for a dataset option.
  [[nodiscard]] double q(const DatasetOption& o) const { return o.rhat + o.mask * gamma2_H * v[static_cast<std::size_t>(o.next)]; }
  [[nodiscard]] int num_covered() const { return static_cast<int>(std::count(covered.begin(), covered.end(), true)); }
};

/// Groups every valid option occurrence in the dataset by (state, option, outcome).
inline std::vector<DatasetOption> dataset_options(const TabularMDP& m, const TrajectoryDataset& ds, int H,
                                                  double gamma1) {
  require_config(ds.action_space.is_discrete() && ds.obs_dim == m.n_states, "dataset does not match the MDP");
  std::map<std::tuple<int, long, int, double, double>, double> counts;
  std::vector<int> acts(static_cast<std::size_t>(H));
  for (const auto& tr : ds.trajectories) {
    for (int t = 0; t + H <= tr.length(); ++t) {
      for (int k = 0; k < H; ++k) acts[static_cast<std::size_t>(k)] = static_cast<int>(std::lround(tr.actions(0, t + k)));
      const int s = m.state_of(tr.states.col(t));
      const int s2 = m.state_of(tr.states.col(t + H));
      const double rhat = intra_return(std::span<const double>(tr.rewards.data() + t, H), gamma1);
      const double mask = (tr.terminal && t + H == tr.length()) ? 0.0 : 1.0;
      counts[{s, encode_option(acts, m.n_actions), s2, rhat, mask}] += 1.0;
    }
  }
  std::vector<DatasetOption> out;
  for (const auto& [k, c] : counts)
    out.push_back({std::get<0>(k), std::get<1>(k), std::get<2>(k), std::get<3>(k), std::get<4>(k), c});
  return out;
}

/// Fixed point of V(s) = expectile_tau over in-dataset options o at s of
/// [R-hat(s,o) + gamma2^H V(s')], frequency weighted.
inline ExpectileOracle oracle_expectile_v(const TabularMDP& m, const TrajectoryDataset& ds, int H, double gamma1,
                                          double gamma2, double tau, double tol = 1e-10,
                                          int max_iterations = 10'000'000) {
  require_config(H >= 1, "option length must be >= 1");
  require_config(gamma2 > 0.0 && gamma2 < 1.0, "gamma2 must lie in (0, 1)");
  ExpectileOracle r;
  r.gamma2_H = std::pow(gamma2, H);
  const auto all = dataset_options(m, ds, H, gamma1);
  // Drop occurrences that bootstrap into states with no options of their own,
  // repeating until the covered set is closed under bootstrapping.
  r.options = all;
  for (bool changed = true; changed;) {
    r.covered.assign(static_cast<std::size_t>(m.n_states), false);
    for (const auto& o : r.options) r.covered[static_cast<std::size_t>(o.state)] = true;
    std::vector<DatasetOption> kept;
    for (const auto& o : r.options) {
      if (o.mask > 0.0 && !r.covered[static_cast<std::size_t>(o.next)]) r.dropped += static_cast<long>(o.count);
      else kept.push_back(o);
    }
    changed = kept.size() != r.options.size();
    r.options = std::move(kept);
  }
  std::vector<std::vector<std::size_t>> by_state(static_cast<std::size_t>(m.n_states));
  for (std::size_t i = 0; i < r.options.size(); ++i) by_state[static_cast<std::size_t>(r.options[i].state)].push_back(i);
  r.v.assign(static_cast<std::size_t>(m.n_states), std::numeric_limits<double>::quiet_NaN());
  for (int s = 0; s < m.n_states; ++s)
    if (r.covered[static_cast<std::size_t>(s)]) r.v[static_cast<std::size_t>(s)] = 0.0;
  std::vector<double> xs, ws;
  for (; r.iterations < max_iterations; ++r.iterations) {
    double change = 0.0;
    std::vector<double> nv = r.v;
    for (int s = 0; s < m.n_states; ++s) {
      const auto& idx = by_state[static_cast<std::size_t>(s)];
      if (idx.empty()) continue;
      xs.clear();
      ws.clear();
      for (std::size_t i : idx) {
        xs.push_back(r.q(r.options[i]));
        ws.push_back(r.options[i].count);
      }
      nv[static_cast<std::size_t>(s)] = sample_expectile(xs, ws, tau);
      change = std::max(change, std::abs(nv[static_cast<std::size_t>(s)] - r.v[static_cast<std::size_t>(s)]));
    }
    r.v = std::move(nv);
    if (change <= tol) break;
  }
  return r;
}

}  // namespace deas
