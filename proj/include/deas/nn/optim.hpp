#pragma once

#include <cmath>
#include <concepts>

#include "deas/error.hpp"

namespace deas::nn {

/// A bundle of Eigen arrays that can be visited in lockstep with other bundles
/// of the same layout (MlpParams, PolicyParams, ...).
template <class P>
concept ParameterSet = std::copyable<P> && requires(P& p, const P& cp) {
  P::zip([](auto&...) {}, p, cp);
  { p.zeros_like() } -> std::same_as<P>;
  { cp.all_finite() } -> std::convertible_to<bool>;
};

template <ParameterSet P>
struct AdamState {
  P m;
  P v;
  long t = 0;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <ParameterSet P>
AdamState<P> make_adam(const P& params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  require_config(lr > 0.0, "Adam learning rate must be positive");
  require_config(eps > 0.0, "Adam epsilon must be positive");
  require_config(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "Adam betas must lie in [0, 1)");
  return AdamState<P>{params.zeros_like(), params.zeros_like(), 0, lr, beta1, beta2, eps};
}

/// One bias-corrected Adam step, in place.
template <ParameterSet P>
void adam_step(AdamState<P>& s, P& params, const P& grads) {
  ++s.t;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  P::zip(
      [&](auto& p, const auto& g, auto& m, auto& v) {
        require_shape(p.rows() == g.rows() && p.cols() == g.cols(), "adam_step: gradient shape mismatch");
        m = s.beta1 * m + (1.0 - s.beta1) * g;
        v = s.beta2 * v + (1.0 - s.beta2) * g.cwiseProduct(g);
        p.array() -= s.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + s.eps);
      },
      params, grads, s.m, s.v);
}

/// target <- (1 - beta) * target + beta * online
template <ParameterSet P>
void polyak_update(P& target, const P& online, double beta) {
  require_config(beta >= 0.0 && beta <= 1.0, "Polyak rate must lie in [0, 1]");
  P::zip(
      [&](auto& t, const auto& o) {
        require_shape(t.rows() == o.rows() && t.cols() == o.cols(), "polyak_update: architecture mismatch");
        t = (1.0 - beta) * t + beta * o;
      },
      target, online);
}

template <ParameterSet P>
double global_norm(const P& g) {
  double sq = 0.0;
  P::zip([&](const auto& a) { sq += a.squaredNorm(); }, g);
  return std::sqrt(sq);
}

/// Rescales g so its global L2 norm is at most max_norm. Returns the norm before clipping.
template <ParameterSet P>
double clip_global_norm(P& g, double max_norm) {
  const double n = global_norm(g);
  if (n > max_norm && n > 0.0) {
    const double s = max_norm / n;
    P::zip([&](auto& a) { a *= s; }, g);
  }
  return n;
}

}  // namespace deas::nn
