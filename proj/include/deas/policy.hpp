#pragma once

// H-step sequence policies and the policy-extraction losses.
//
// Continuous action spaces use a tanh-squashed diagonal Gaussian with a
// state-independent, clamped log-std. Discrete spaces use an independent
// softmax per step. Both expose the same batched interface, so extraction
// code does not care which one it is training.

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "deas/dataset.hpp"
#include "deas/distributional.hpp"
#include "deas/error.hpp"
#include "deas/nn/mlp.hpp"
#include "deas/nn/optim.hpp"

namespace deas {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;
inline constexpr double kSquashEps = 1e-6;

struct PolicyParams {
  nn::MlpParams net;
  VectorXd log_std;  // empty for categorical policies

  [[nodiscard]] PolicyParams zeros_like() const { return {net.zeros_like(), VectorXd::Zero(log_std.size())}; }
  [[nodiscard]] bool all_finite() const { return net.all_finite() && log_std.allFinite(); }

  template <class F, class First, class... Rest>
  static void zip(F&& f, First& first, Rest&... rest) {
    nn::MlpParams::zip(f, first.net, rest.net...);
    if (first.log_std.size() > 0) f(first.log_std, rest.log_std...);
  }
};

/// Encodes stored option actions [H*dim x B] into network features [H*feature_dim x B].
inline MatrixXd encode_options(const ActionSpace& space, int H, const MatrixXd& actions) {
  require_shape(actions.rows() == static_cast<Eigen::Index>(H) * space.dim, "encode_options: action rows mismatch");
  if (!space.is_discrete()) return actions;
  const int fd = space.feature_dim();
  MatrixXd f = MatrixXd::Zero(static_cast<Eigen::Index>(H) * fd, actions.cols());
  for (Eigen::Index j = 0; j < actions.cols(); ++j)
    for (int k = 0; k < H; ++k) {
      const auto a = static_cast<int>(std::lround(actions(k, j)));
      require_shape(a >= 0 && a < fd, "encode_options: discrete action out of range");
      f(k * fd + a, j) = 1.0;
    }
  return f;
}

class SequencePolicy {
 public:
  SequencePolicy() = default;

  template <class Rng>
  static SequencePolicy create(int obs_dim, const ActionSpace& space, int H, std::span<const int> hidden, Rng& rng,
                               double init_log_std = -0.5) {
    require_config(H >= 1, "policy option length must be >= 1");
    SequencePolicy p;
    p.space_ = space;
    p.H_ = H;
    std::vector<int> sizes{obs_dim};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(H * (space.is_discrete() ? space.n_actions : space.dim));
    p.params_.net = nn::MlpParams::init(sizes, rng);
    if (!space.is_discrete()) p.params_.log_std = VectorXd::Constant(H * space.dim, init_log_std);
    return p;
  }

  static SequencePolicy from_params(const ActionSpace& space, int H, PolicyParams params) {
    SequencePolicy p;
    p.space_ = space;
    p.H_ = H;
    p.params_ = std::move(params);
    const int out = H * (space.is_discrete() ? space.n_actions : space.dim);
    require_shape(p.params_.net.out_dim() == out, "policy network output does not match action space");
    require_shape(space.is_discrete() ? p.params_.log_std.size() == 0 : p.params_.log_std.size() == out,
                  "policy log-std length mismatch");
    return p;
  }

  [[nodiscard]] bool gaussian() const { return !space_.is_discrete(); }
  [[nodiscard]] int option_length() const { return H_; }
  [[nodiscard]] const ActionSpace& action_space() const { return space_; }
  [[nodiscard]] Eigen::Index obs_dim() const { return params_.net.in_dim(); }
  [[nodiscard]] int stored_dim() const { return H_ * space_.dim; }
  [[nodiscard]] int feature_dim() const { return H_ * space_.feature_dim(); }
  [[nodiscard]] const PolicyParams& params() const { return params_; }
  PolicyParams& params() { return params_; }

  [[nodiscard]] VectorXd clamped_log_std() const { return params_.log_std.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax); }

  /// log pi(o | s) per column of stored actions [H*dim x B].
  [[nodiscard]] VectorXd log_prob(const MatrixXd& states, const MatrixXd& actions) const {
    return weighted_log_prob(states, actions, VectorXd::Zero(states.cols()), false).log_prob;
  }

  struct LogProbGrad {
    VectorXd log_prob;
    PolicyParams grad;  // gradient of sum_j coef_j * log pi(o_j | s_j)
  };

  [[nodiscard]] LogProbGrad weighted_log_prob(const MatrixXd& states, const MatrixXd& actions, const VectorXd& coef,
                                              bool with_grad = true) const {
    require_shape(actions.rows() == stored_dim() && actions.cols() == states.cols(), "log_prob: action shape mismatch");
    nn::ForwardCache cache;
    const MatrixXd out = nn::forward(params_.net, states, with_grad ? &cache : nullptr);
    const Eigen::Index B = states.cols();
    LogProbGrad r{VectorXd(B), {}};
    MatrixXd dout = MatrixXd::Zero(out.rows(), B);
    VectorXd dlog_std;
    if (gaussian()) {
      const VectorXd ls = clamped_log_std();
      const VectorXd inv_std = (-ls.array()).exp();
      dlog_std = VectorXd::Zero(ls.size());
      for (Eigen::Index j = 0; j < B; ++j) {
        double lp = 0.0;
        for (Eigen::Index i = 0; i < out.rows(); ++i) {
          const double a = std::clamp(actions(i, j), -1.0 + kSquashEps, 1.0 - kSquashEps);
          const double u = std::atanh(a);
          const double z = (u - out(i, j)) * inv_std[i];
          lp += -0.5 * z * z - ls[i] - 0.5 * std::log(2.0 * M_PI) - std::log(1.0 - a * a);
          dout(i, j) = coef[j] * z * inv_std[i];
          dlog_std[i] += coef[j] * (z * z - 1.0);
        }
        r.log_prob[j] = lp;
      }
      for (Eigen::Index i = 0; i < ls.size(); ++i)
        if (params_.log_std[i] < kLogStdMin || params_.log_std[i] > kLogStdMax) dlog_std[i] = 0.0;
    } else {
      const int n = space_.n_actions;
      for (Eigen::Index j = 0; j < B; ++j) {
        double lp = 0.0;
        for (int k = 0; k < H_; ++k) {
          auto logits = out.col(j).segment(k * n, n);
          const double mx = logits.maxCoeff();
          const VectorXd e = (logits.array() - mx).exp();
          const double z = e.sum();
          const auto a = static_cast<int>(std::lround(actions(k, j)));
          require_shape(a >= 0 && a < n, "log_prob: discrete action out of range");
          lp += logits[a] - mx - std::log(z);
          dout.col(j).segment(k * n, n) = -coef[j] * e / z;
          dout(k * n + a, j) += coef[j];
        }
        r.log_prob[j] = lp;
      }
    }
    if (with_grad) {
      r.grad.net = nn::backward(params_.net, cache, dout).params;
      r.grad.log_std = dlog_std;
    }
    return r;
  }

  /// Deterministic "mean" action in network feature space [H*feature_dim x B]:
  /// tanh(mean) for Gaussian policies, per-step softmax probabilities for categorical.
  [[nodiscard]] MatrixXd mean_features(const MatrixXd& states, nn::ForwardCache* cache = nullptr) const {
    MatrixXd out = nn::forward(params_.net, states, cache);
    if (gaussian()) return out.array().tanh().matrix();
    const int n = space_.n_actions;
    for (int k = 0; k < H_; ++k) out.middleRows(k * n, n) = softmax_columns(out.middleRows(k * n, n));
    return out;
  }

  /// Backpropagates dL/d(mean_features) into policy parameters.
  [[nodiscard]] PolicyParams mean_features_backward(const nn::ForwardCache& cache, const MatrixXd& features,
                                                    const MatrixXd& dfeatures) const {
    MatrixXd dout(dfeatures.rows(), dfeatures.cols());
    if (gaussian()) {
      dout = dfeatures.array() * (1.0 - features.array().square());
    } else {
      const int n = space_.n_actions;
      for (Eigen::Index j = 0; j < dfeatures.cols(); ++j)
        for (int k = 0; k < H_; ++k) {
          const auto p = features.col(j).segment(k * n, n);
          const auto d = dfeatures.col(j).segment(k * n, n);
          dout.col(j).segment(k * n, n) = p.cwiseProduct(d - VectorXd::Constant(n, p.dot(d)));
        }
    }
    PolicyParams g{nn::backward(params_.net, cache, dout).params, VectorXd::Zero(params_.log_std.size())};
    return g;
  }

  /// N sequential draws for one observation, stored format [H*dim x N].
  template <class Rng>
  MatrixXd sample_n(const VectorXd& obs, int N, Rng& rng) const {
    const VectorXd out = nn::forward(params_.net, obs);
    MatrixXd a(stored_dim(), N);
    if (gaussian()) {
      const VectorXd std = clamped_log_std().array().exp();
      for (int c = 0; c < N; ++c)
        for (Eigen::Index i = 0; i < out.size(); ++i) {
          std::normal_distribution<double> nd(0.0, 1.0);
          a(i, c) = std::tanh(out[i] + std[i] * nd(rng));
        }
    } else {
      const int n = space_.n_actions;
      std::vector<VectorXd> probs;
      for (int k = 0; k < H_; ++k) probs.push_back(CategoricalDist::from_logits(out.segment(k * n, n)).probs);
      for (int c = 0; c < N; ++c)
        for (int k = 0; k < H_; ++k) a(k, c) = static_cast<double>(sample_index(probs[k], rng));
    }
    return a;
  }

  template <class Rng>
  VectorXd sample(const VectorXd& obs, Rng& rng) const {
    return sample_n(obs, 1, rng).col(0);
  }

  /// Per-column draws for a batch of states [obs_dim x B].
  template <class Rng>
  MatrixXd sample_batch(const MatrixXd& states, Rng& rng) const {
    MatrixXd a(stored_dim(), states.cols());
    for (Eigen::Index j = 0; j < states.cols(); ++j) a.col(j) = sample(VectorXd(states.col(j)), rng);
    return a;
  }

  /// Most likely sequence: tanh(mean), or per-step argmax (lowest index on ties).
  [[nodiscard]] VectorXd mode(const VectorXd& obs) const {
    const VectorXd out = nn::forward(params_.net, obs);
    if (gaussian()) return out.array().tanh().matrix();
    VectorXd a(H_);
    const int n = space_.n_actions;
    for (int k = 0; k < H_; ++k) {
      Eigen::Index idx = 0;
      out.segment(k * n, n).maxCoeff(&idx);
      a[k] = static_cast<double>(idx);
    }
    return a;
  }

  template <class Rng>
  static int sample_index(const VectorXd& probs, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double x = u(rng) * probs.sum();
    for (Eigen::Index i = 0; i < probs.size(); ++i) {
      x -= probs[i];
      if (x < 0.0) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size() - 1);
  }

 private:
  ActionSpace space_;
  int H_ = 1;
  PolicyParams params_;
};

// --- extraction losses ----------------------------------------------------

struct PolicyLoss {
  double loss = 0.0;
  PolicyParams grad;
};

/// Mean negative log-likelihood of the batch's option actions.
inline PolicyLoss bc_loss(const SequencePolicy& pi, const OptionBatch& batch) {
  const auto B = static_cast<double>(batch.size());
  auto r = pi.weighted_log_prob(batch.states, batch.actions, VectorXd::Constant(batch.size(), -1.0 / B));
  return {-r.log_prob.mean(), std::move(r.grad)};
}

struct AwrSettings {
  double temperature = 1.0;
  double max_weight = 100.0;
};

inline VectorXd awr_weights(const VectorXd& advantages, const AwrSettings& s) {
  return (advantages.array() / s.temperature).exp().min(s.max_weight).max(0.0).matrix();
}

/// mean_j -min(exp(A_j / lambda), w_max) * log pi(o_j | s_j); advantages are constants.
inline PolicyLoss awr_loss(const SequencePolicy& pi, const OptionBatch& batch, const VectorXd& advantages,
                           const AwrSettings& s = {}) {
  require_shape(advantages.size() == batch.size(), "awr_loss: advantage count mismatch");
  const auto B = static_cast<double>(batch.size());
  const VectorXd w = awr_weights(advantages, s);
  auto r = pi.weighted_log_prob(batch.states, batch.actions, -w / B);
  return {-(w.array() * r.log_prob.array()).mean(), std::move(r.grad)};
}

/// Critic evaluated in feature space, with the input gradient needed by DPG.
struct CriticEval {
  VectorXd q;          // [B]
  MatrixXd dq_dinput;  // [feature_dim x B]
};

template <class C>
concept SequenceCritic = requires(const C& c, const MatrixXd& s, const MatrixXd& f) {
  { c.evaluate(s, f) } -> std::convertible_to<VectorXd>;
  { c.evaluate_with_grad(s, f) } -> std::convertible_to<CriticEval>;
};

/// -Q(s, mu(s)) / mean|Q| + alpha * MSE(mu(s), o_data); the normalizer is a constant.
template <SequenceCritic Critic>
PolicyLoss dpg_bc_loss(const SequencePolicy& pi, const OptionBatch& batch, const Critic& critic, double alpha) {
  nn::ForwardCache cache;
  const MatrixXd mu = pi.mean_features(batch.states, &cache);
  const MatrixXd data = encode_options(pi.action_space(), pi.option_length(), batch.actions);
  const CriticEval ce = critic.evaluate_with_grad(batch.states, mu);
  const auto B = static_cast<double>(batch.size());
  const double norm = std::max(ce.q.cwiseAbs().mean(), 1e-8);
  const MatrixXd diff = mu - data;
  const double mse = diff.squaredNorm() / static_cast<double>(diff.size());
  const double loss = -ce.q.mean() / norm + alpha * mse;
  const MatrixXd dmu = -ce.dq_dinput / (B * norm) + alpha * 2.0 * diff / static_cast<double>(diff.size());
  return {loss, pi.mean_features_backward(cache, mu, dmu)};
}

enum class SelectionMode { Greedy, Softmax };

struct BestOfN {
  VectorXd action;  // stored format [H*dim]
  double q = 0.0;
  int index = 0;
};

/// Samples N candidates from the policy and selects by critic score: greedy
/// argmax (lowest index on ties) or a draw from softmax(Q / temperature).
template <SequenceCritic Critic, class Rng>
BestOfN best_of_n(const SequencePolicy& pi, const Critic& critic, const VectorXd& obs, int N, SelectionMode mode,
                  double temperature, Rng& rng) {
  require_config(N >= 1, "best-of-N needs N >= 1");
  const MatrixXd cands = pi.sample_n(obs, N, rng);
  if (N == 1) {
    const MatrixXd s = obs;
    const double q = critic.evaluate(s, encode_options(pi.action_space(), pi.option_length(), cands))[0];
    return {cands.col(0), q, 0};
  }
  const MatrixXd states = obs.replicate(1, N);
  const VectorXd q = critic.evaluate(states, encode_options(pi.action_space(), pi.option_length(), cands));
  int idx = 0;
  if (mode == SelectionMode::Greedy) {
    for (int i = 1; i < N; ++i)
      if (q[i] > q[idx]) idx = i;
  } else {
    require_config(temperature > 0.0, "softmax temperature must be positive");
    const VectorXd p = ((q.array() - q.maxCoeff()) / temperature).exp().matrix();
    idx = SequencePolicy::sample_index(p, rng);
  }
  return {cands.col(idx), q[idx], idx};
}

}  // namespace deas
