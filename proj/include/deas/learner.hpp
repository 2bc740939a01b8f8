#pragma once

// Detached value learning over action sequences.
//
// One training step, in order:
//   1. V(s; psi)      <- expectile / alpha-weighted classification toward min_j Qbar_j(s, o)
//   2. Q_j(s, o)      <- R-hat + mask * gamma2^H * V(s'), using the freshly updated psi
//   3. pi(o | s)      <- the configured extractor (BC, AWR, DPG+BC); never touches psi/theta
//   4. Qbar_j         <- Polyak average of Q_j
//
// Scalar mode uses 1-output heads and squared / expectile losses. Distributional
// mode uses m-logit heads over a fixed SupportGrid with HL-Gauss targets.

#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "deas/dataset.hpp"
#include "deas/distributional.hpp"
#include "deas/error.hpp"
#include "deas/io.hpp"
#include "deas/nn/mlp.hpp"
#include "deas/nn/optim.hpp"
#include "deas/policy.hpp"

namespace deas {

enum class Objective { Scalar, Distributional };
enum class SupportMode { Universal, DataCentric };
enum class ExtractorKind { None, BC, AWR, DPG_BC };

inline std::string to_string(Objective o) { return o == Objective::Scalar ? "scalar" : "distributional"; }
inline std::string to_string(SupportMode s) { return s == SupportMode::Universal ? "universal" : "data-centric"; }
inline std::string to_string(ExtractorKind e) {
  switch (e) {
    case ExtractorKind::None: return "none";
    case ExtractorKind::BC: return "bc";
    case ExtractorKind::AWR: return "awr";
    case ExtractorKind::DPG_BC: return "dpg-bc";
  }
  return "?";
}

inline Objective parse_objective(const std::string& s) {
  if (s == "scalar") return Objective::Scalar;
  if (s == "distributional") return Objective::Distributional;
  throw ConfigError("unknown objective '" + s + "' (scalar | distributional)");
}
inline SupportMode parse_support_mode(const std::string& s) {
  if (s == "universal") return SupportMode::Universal;
  if (s == "data-centric") return SupportMode::DataCentric;
  throw ConfigError("unknown support mode '" + s + "' (universal | data-centric)");
}
inline ExtractorKind parse_extractor(const std::string& s) {
  if (s == "none") return ExtractorKind::None;
  if (s == "bc") return ExtractorKind::BC;
  if (s == "awr") return ExtractorKind::AWR;
  if (s == "dpg-bc") return ExtractorKind::DPG_BC;
  throw ConfigError("unknown extractor '" + s + "' (none | bc | awr | dpg-bc)");
}

struct LearnerConfig {
  int H = 4;                 // option length
  double gamma1 = 0.9;       // intra-option discount
  double gamma2 = 0.99;      // inter-option discount
  double expectile = 0.9;    // tau
  double polyak = 0.005;     // target update rate
  int atoms = 101;
  double sigma_coef = 0.75;  // HL-Gauss sigma in bin widths
  SupportMode support = SupportMode::Universal;
  double support_pad = 0.2;
  int ensemble = 2;
  Objective objective = Objective::Distributional;
  int batch_size = 256;
  double learning_rate = 3e-4;
  double grad_clip = 10.0;
  std::vector<int> value_hidden{64, 64};
  std::vector<int> critic_hidden{64, 64};
  std::vector<int> actor_hidden{64, 64};
  ExtractorKind extractor = ExtractorKind::AWR;
  double bc_alpha = 1.0;
  double awr_temperature = 1.0;
  double awr_max_weight = 100.0;
  // Ablation: regress Q toward max over policy samples at s' instead of V(s').
  bool coupled_target = false;
  int coupled_samples = 10;

  void validate() const {
    require_config(H >= 1, "H must be >= 1");
    require_config(gamma1 > 0.0 && gamma1 <= 1.0, "gamma1 must lie in (0, 1]");
    require_config(gamma2 > 0.0 && gamma2 < 1.0, "gamma2 must lie in (0, 1)");
    require_config(expectile >= 0.5 && expectile < 1.0, "expectile must lie in [0.5, 1)");
    require_config(polyak >= 0.0 && polyak <= 1.0, "polyak must lie in [0, 1]");
    require_config(atoms >= 2, "atoms must be >= 2");
    require_config(sigma_coef > 0.0, "sigma_coef must be positive");
    require_config(ensemble >= 1, "ensemble must be >= 1");
    require_config(batch_size >= 1, "batch_size must be >= 1");
    require_config(learning_rate > 0.0, "learning_rate must be positive");
    require_config(grad_clip > 0.0, "grad_clip must be positive");
    require_config(awr_temperature > 0.0 && awr_max_weight > 0.0, "AWR temperature and weight clip must be positive");
    require_config(bc_alpha >= 0.0, "bc_alpha must be non-negative");
    require_config(coupled_samples >= 1, "coupled_samples must be >= 1");
    for (const auto* h : {&value_hidden, &critic_hidden, &actor_hidden})
      for (int w : *h) require_config(w > 0, "hidden sizes must be positive");
  }

  [[nodiscard]] nlohmann::ordered_json to_json() const {
    return {{"H", H},
            {"gamma1", gamma1},
            {"gamma2", gamma2},
            {"expectile", expectile},
            {"polyak", polyak},
            {"atoms", atoms},
            {"sigma_coef", sigma_coef},
            {"support", to_string(support)},
            {"support_pad", support_pad},
            {"ensemble", ensemble},
            {"objective", to_string(objective)},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"grad_clip", grad_clip},
            {"value_hidden", value_hidden},
            {"critic_hidden", critic_hidden},
            {"actor_hidden", actor_hidden},
            {"extractor", to_string(extractor)},
            {"bc_alpha", bc_alpha},
            {"awr_temperature", awr_temperature},
            {"awr_max_weight", awr_max_weight},
            {"coupled_target", coupled_target},
            {"coupled_samples", coupled_samples}};
  }

  /// Reads the keys present in `j`; unknown keys are an error.
  static LearnerConfig from_json(const nlohmann::json& j) { return from_json(j, LearnerConfig{}); }

  static LearnerConfig from_json(const nlohmann::json& j, LearnerConfig c) {
    for (const auto& [k, v] : j.items()) {
      if (k == "H") c.H = v.get<int>();
      else if (k == "gamma1") c.gamma1 = v.get<double>();
      else if (k == "gamma2") c.gamma2 = v.get<double>();
      else if (k == "expectile") c.expectile = v.get<double>();
      else if (k == "polyak") c.polyak = v.get<double>();
      else if (k == "atoms") c.atoms = v.get<int>();
      else if (k == "sigma_coef") c.sigma_coef = v.get<double>();
      else if (k == "support") c.support = parse_support_mode(v.get<std::string>());
      else if (k == "support_pad") c.support_pad = v.get<double>();
      else if (k == "ensemble") c.ensemble = v.get<int>();
      else if (k == "objective") c.objective = parse_objective(v.get<std::string>());
      else if (k == "batch_size") c.batch_size = v.get<int>();
      else if (k == "learning_rate") c.learning_rate = v.get<double>();
      else if (k == "grad_clip") c.grad_clip = v.get<double>();
      else if (k == "value_hidden") c.value_hidden = v.get<std::vector<int>>();
      else if (k == "critic_hidden") c.critic_hidden = v.get<std::vector<int>>();
      else if (k == "actor_hidden") c.actor_hidden = v.get<std::vector<int>>();
      else if (k == "extractor") c.extractor = parse_extractor(v.get<std::string>());
      else if (k == "bc_alpha") c.bc_alpha = v.get<double>();
      else if (k == "awr_temperature") c.awr_temperature = v.get<double>();
      else if (k == "awr_max_weight") c.awr_max_weight = v.get<double>();
      else if (k == "coupled_target") c.coupled_target = v.get<bool>();
      else if (k == "coupled_samples") c.coupled_samples = v.get<int>();
      else throw ConfigError("unknown learner key '" + k + "'");
    }
    c.validate();
    return c;
  }
};

/// Support grid for a run: universal bounds from the reward range, or
/// data-centric quantiles of the dual-discount returns-to-go.
inline SupportGrid build_support(const LearnerConfig& c, const TrajectoryDataset& ds) {
  const ReturnStatistics st = return_statistics(ds, c.gamma1, c.gamma2, c.H);
  std::pair<double, double> r;
  if (c.support == SupportMode::Universal) {
    int L = 0;
    for (const auto& t : ds.trajectories) L = std::max(L, t.length());
    r = universal_support(st.r_min, st.r_max, c.H, std::max(L, c.H), c.gamma1, c.gamma2);
  } else {
    r = data_centric_support(st.returns_to_go, c.support_pad);
  }
  r = widen_to_floor(r);
  return make_support(r.first, r.second, c.atoms);
}

// --- losses ------------------------------------------------------------------

/// |tau - 1(u < 0)| * u^2
inline double expectile_loss(double u, double tau) { return (u < 0.0 ? 1.0 - tau : tau) * u * u; }

/// R-hat + mask * gamma2^H * v_next
inline double bellman_target(double rhat, double v_next, double mask, double gamma2, int H) {
  return rhat + mask * std::pow(gamma2, H) * v_next;
}

struct NetLoss {
  double loss = 0.0;
  nn::MlpParams grad;
};

struct EnsembleLoss {
  double loss = 0.0;  // summed over members
  std::vector<nn::MlpParams> grads;
  double max_target_mass_error = 0.0;
};

inline MatrixXd stack_rows(const MatrixXd& top, const MatrixXd& bottom) {
  require_shape(top.cols() == bottom.cols(), "stack_rows: column mismatch");
  MatrixXd m(top.rows() + bottom.rows(), top.cols());
  m << top, bottom;
  return m;
}

/// mean_b L2^tau(qbar_b - V(s_b)); gradients flow into the value network only.
inline NetLoss value_loss_scalar(const nn::MlpParams& value, const MatrixXd& states, const VectorXd& qbar, double tau) {
  require_shape(value.out_dim() == 1, "scalar value loss needs a 1-output value head");
  nn::ForwardCache cache;
  const MatrixXd v = nn::forward(value, states, &cache);
  const auto B = static_cast<double>(states.cols());
  MatrixXd dv(1, states.cols());
  double loss = 0.0;
  for (Eigen::Index j = 0; j < states.cols(); ++j) {
    const double u = qbar[j] - v(0, j);
    const double w = u < 0.0 ? 1.0 - tau : tau;
    loss += w * u * u;
    dv(0, j) = -2.0 * w * u / B;
  }
  return {loss / B, nn::backward(value, cache, dv).params};
}

/// sum_j mean_b (y_b - Q_j(s_b, o_b))^2
inline EnsembleLoss critic_loss_scalar(std::span<const nn::MlpParams> critics, const MatrixXd& critic_input,
                                       const VectorXd& targets) {
  EnsembleLoss r;
  const auto B = static_cast<double>(critic_input.cols());
  for (const auto& c : critics) {
    require_shape(c.out_dim() == 1, "scalar critic loss needs 1-output critic heads");
    nn::ForwardCache cache;
    const MatrixXd q = nn::forward(c, critic_input, &cache);
    const MatrixXd diff = q - targets.transpose();
    r.loss += diff.squaredNorm() / B;
    r.grads.push_back(nn::backward(c, cache, 2.0 * diff / B).params);
  }
  return r;
}

/// mean_b alpha_b * CE(target_b || softmax(V logits_b)), alpha_b = tau if qbar_b >= E[V_b] else 1 - tau.
inline NetLoss value_loss_distributional(const nn::MlpParams& value, const MatrixXd& states,
                                         const MatrixXd& target_probs, const VectorXd& qbar, const SupportGrid& g,
                                         double tau) {
  require_shape(value.out_dim() == g.m, "value head width does not match the support");
  require_shape(target_probs.rows() == g.m, "target distribution width does not match the support");
  nn::ForwardCache cache;
  const MatrixXd logits = nn::forward(value, states, &cache);
  const MatrixXd logp = log_softmax_columns(logits);
  const MatrixXd p = logp.array().exp();
  const auto B = static_cast<double>(states.cols());
  MatrixXd dlogits(g.m, states.cols());
  double loss = 0.0;
  for (Eigen::Index j = 0; j < states.cols(); ++j) {
    const double v_mean = p.col(j).dot(g.centers);
    const double alpha = qbar[j] >= v_mean ? tau : 1.0 - tau;
    loss += -alpha * target_probs.col(j).dot(logp.col(j));
    dlogits.col(j) = alpha * (p.col(j) - target_probs.col(j)) / B;
  }
  return {loss / B, nn::backward(value, cache, dlogits).params};
}

/// sum_j mean_b CE(HL-Gauss(target_mean_b, sigma) || softmax(Q_j logits_b)).
inline EnsembleLoss critic_loss_distributional(std::span<const nn::MlpParams> critics, const MatrixXd& critic_input,
                                               const VectorXd& target_means, const SupportGrid& g, double sigma) {
  const Eigen::Index Bn = critic_input.cols();
  MatrixXd target(g.m, Bn);
  EnsembleLoss r;
  for (Eigen::Index j = 0; j < Bn; ++j) {
    project_truncated_normal_into(target_means[j], sigma, g, target.col(j));
    r.max_target_mass_error = std::max(r.max_target_mass_error, std::abs(target.col(j).sum() - 1.0));
  }
  const auto B = static_cast<double>(Bn);
  for (const auto& c : critics) {
    require_shape(c.out_dim() == g.m, "critic head width does not match the support");
    nn::ForwardCache cache;
    const MatrixXd logits = nn::forward(c, critic_input, &cache);
    const MatrixXd logp = log_softmax_columns(logits);
    r.loss += -(target.array() * logp.array()).sum() / B;
    const MatrixXd dlogits = (logp.array().exp().matrix() - target) / B;
    r.grads.push_back(nn::backward(c, cache, dlogits).params);
  }
  return r;
}

// --- critic ensemble view -----------------------------------------------------

/// Read-only view over an ensemble of critic networks; scores are min over members.
class EnsembleCritic {
 public:
  EnsembleCritic(std::span<const nn::MlpParams> members, Objective objective, const SupportGrid& grid)
      : members_(members), objective_(objective), grid_(&grid) {}

  struct Detail {
    std::vector<VectorXd> member_q;
    std::vector<MatrixXd> member_probs;  // distributional only
    VectorXd min_q;
    std::vector<int> argmin;
  };

  [[nodiscard]] Detail evaluate_detail(const MatrixXd& states, const MatrixXd& features) const {
    const MatrixXd input = stack_rows(states, features);
    Detail d;
    for (const auto& m : members_) {
      const MatrixXd out = nn::forward(m, input);
      if (objective_ == Objective::Scalar) {
        d.member_q.push_back(out.row(0).transpose());
      } else {
        MatrixXd p = softmax_columns(out);
        d.member_q.push_back(p.transpose() * grid_->centers);
        d.member_probs.push_back(std::move(p));
      }
    }
    d.min_q = d.member_q[0];
    d.argmin.assign(static_cast<std::size_t>(input.cols()), 0);
    for (std::size_t k = 1; k < d.member_q.size(); ++k)
      for (Eigen::Index j = 0; j < input.cols(); ++j)
        if (d.member_q[k][j] < d.min_q[j]) {
          d.min_q[j] = d.member_q[k][j];
          d.argmin[static_cast<std::size_t>(j)] = static_cast<int>(k);
        }
    return d;
  }

  [[nodiscard]] VectorXd evaluate(const MatrixXd& states, const MatrixXd& features) const {
    return evaluate_detail(states, features).min_q;
  }

  /// min_j Q_j and its gradient with respect to the action features (through the argmin member).
  [[nodiscard]] CriticEval evaluate_with_grad(const MatrixXd& states, const MatrixXd& features) const {
    const MatrixXd input = stack_rows(states, features);
    const Eigen::Index B = input.cols();
    std::vector<VectorXd> qs;
    std::vector<MatrixXd> dins;
    for (const auto& m : members_) {
      nn::ForwardCache cache;
      const MatrixXd out = nn::forward(m, input, &cache);
      MatrixXd dout;
      if (objective_ == Objective::Scalar) {
        qs.push_back(out.row(0).transpose());
        dout = MatrixXd::Ones(1, B);
      } else {
        const MatrixXd p = softmax_columns(out);
        VectorXd q = p.transpose() * grid_->centers;
        dout = p.array() * (grid_->centers.replicate(1, B).array().rowwise() - q.transpose().array());
        qs.push_back(std::move(q));
      }
      dins.push_back(nn::backward(m, cache, dout).input.bottomRows(features.rows()));
    }
    CriticEval ce{qs[0], dins[0]};
    for (std::size_t k = 1; k < qs.size(); ++k)
      for (Eigen::Index j = 0; j < B; ++j)
        if (qs[k][j] < ce.q[j]) {
          ce.q[j] = qs[k][j];
          ce.dq_dinput.col(j) = dins[k].col(j);
        }
    return ce;
  }

 private:
  std::span<const nn::MlpParams> members_;
  Objective objective_;
  const SupportGrid* grid_;
};

// --- learner ------------------------------------------------------------------

struct TrainMetrics {
  long step = 0;
  double loss_v = 0.0;
  double loss_q = 0.0;
  double loss_pi = 0.0;
  double mean_q = 0.0;
  double mean_v = 0.0;
  double max_target_mass_error = 0.0;
};

struct LearnerState {
  nn::MlpParams value;
  std::vector<nn::MlpParams> critics;
  std::vector<nn::MlpParams> targets;
  SequencePolicy policy;
  nn::AdamState<nn::MlpParams> value_opt;
  std::vector<nn::AdamState<nn::MlpParams>> critic_opts;
  nn::AdamState<PolicyParams> policy_opt;
  SupportGrid grid;
  long step = 0;
};

class Learner {
 public:
  template <class Rng>
  static Learner create(const LearnerConfig& cfg, int obs_dim, const ActionSpace& space, const SupportGrid& grid,
                        Rng& rng) {
    cfg.validate();
    require_config(obs_dim > 0, "obs_dim must be positive");
    require_config(grid.m == cfg.atoms || cfg.objective == Objective::Scalar, "support bin count must equal atoms");
    Learner l;
    l.cfg_ = cfg;
    l.obs_dim_ = obs_dim;
    l.space_ = space;
    LearnerState& s = l.st_;
    s.grid = grid;
    const int head = cfg.objective == Objective::Scalar ? 1 : grid.m;
    std::vector<int> vs{obs_dim};
    vs.insert(vs.end(), cfg.value_hidden.begin(), cfg.value_hidden.end());
    vs.push_back(head);
    s.value = nn::MlpParams::init(vs, rng);
    std::vector<int> cs{obs_dim + cfg.H * space.feature_dim()};
    cs.insert(cs.end(), cfg.critic_hidden.begin(), cfg.critic_hidden.end());
    cs.push_back(head);
    for (int k = 0; k < cfg.ensemble; ++k) s.critics.push_back(nn::MlpParams::init(cs, rng));
    s.targets = s.critics;
    s.policy = SequencePolicy::create(obs_dim, space, cfg.H, cfg.actor_hidden, rng);
    l.reset_optimizers();
    return l;
  }

  /// Rebuilds a learner around existing parameters (checkpoint loading); optimizer state starts fresh.
  static Learner from_state(const LearnerConfig& cfg, int obs_dim, const ActionSpace& space, LearnerState st) {
    cfg.validate();
    Learner l;
    l.cfg_ = cfg;
    l.obs_dim_ = obs_dim;
    l.space_ = space;
    l.st_ = std::move(st);
    l.check_architecture();
    l.reset_optimizers();
    return l;
  }

  [[nodiscard]] const LearnerConfig& config() const { return cfg_; }
  [[nodiscard]] const LearnerState& state() const { return st_; }
  LearnerState& mutable_state() { return st_; }
  [[nodiscard]] int obs_dim() const { return obs_dim_; }
  [[nodiscard]] const ActionSpace& action_space() const { return space_; }
  [[nodiscard]] const SupportGrid& grid() const { return st_.grid; }
  [[nodiscard]] const SequencePolicy& policy() const { return st_.policy; }
  [[nodiscard]] bool distributional() const { return cfg_.objective == Objective::Distributional; }

  [[nodiscard]] EnsembleCritic critic() const { return {st_.critics, cfg_.objective, st_.grid}; }
  [[nodiscard]] EnsembleCritic target_critic() const { return {st_.targets, cfg_.objective, st_.grid}; }

  /// Scalar V(s) per column: head output, or the mean of the value distribution.
  [[nodiscard]] VectorXd v_batch(const MatrixXd& states) const {
    const MatrixXd out = nn::forward(st_.value, states);
    if (!distributional()) return out.row(0).transpose();
    return softmax_columns(out).transpose() * st_.grid.centers;
  }

  /// min over the online ensemble of Q(s, o) for stored-format options.
  [[nodiscard]] VectorXd q_batch(const MatrixXd& states, const MatrixXd& options) const {
    return critic().evaluate(states, encode_options(space_, cfg_.H, options));
  }

  [[nodiscard]] double v_value(const VectorXd& obs) const { return v_batch(MatrixXd(obs))[0]; }
  [[nodiscard]] double q_value(const VectorXd& obs, const VectorXd& option) const {
    require_shape(obs.size() == obs_dim_, "q_value: observation size mismatch");
    require_shape(option.size() == cfg_.H * space_.dim, "q_value: option size mismatch");
    return q_batch(MatrixXd(obs), MatrixXd(option))[0];
  }

  /// Network inputs derived from a batch, shared by the update phases of one step.
  struct Prepared {
    const OptionBatch* batch = nullptr;
    MatrixXd features;
    MatrixXd critic_input;
  };

  [[nodiscard]] Prepared prepare(const OptionBatch& b) const {
    require_shape(b.H == cfg_.H, "batch option length " + std::to_string(b.H) + " != learner H " +
                                     std::to_string(cfg_.H));
    require_shape(b.states.rows() == obs_dim_, "batch observation size mismatch");
    Prepared p{&b, encode_options(space_, cfg_.H, b.actions), {}};
    p.critic_input = stack_rows(b.states, p.features);
    return p;
  }

  /// Value phase. Reads the target critics, writes psi only.
  double update_value(const Prepared& p, TrainMetrics& m) {
    const OptionBatch& b = *p.batch;
    const auto detail = target_critic().evaluate_detail(b.states, p.features);
    m.mean_q = detail.min_q.mean();
    NetLoss vl;
    if (distributional()) {
      MatrixXd target(st_.grid.m, b.size());
      for (Eigen::Index j = 0; j < b.size(); ++j)
        target.col(j) = detail.member_probs[static_cast<std::size_t>(detail.argmin[static_cast<std::size_t>(j)])].col(j);
      vl = value_loss_distributional(st_.value, b.states, target, detail.min_q, st_.grid, cfg_.expectile);
    } else {
      vl = value_loss_scalar(st_.value, b.states, detail.min_q, cfg_.expectile);
    }
    check_finite(vl.loss, "loss_v");
    nn::clip_global_norm(vl.grad, cfg_.grad_clip);
    nn::adam_step(st_.value_opt, st_.value, vl.grad);
    m.loss_v = vl.loss;
    return vl.loss;
  }

  /// Bootstrap targets for the critic phase.
  template <class Rng>
  [[nodiscard]] VectorXd critic_targets(const OptionBatch& b, Rng& rng) const {
    VectorXd next(b.size());
    if (cfg_.coupled_target) {
      const int N = cfg_.coupled_samples;
      MatrixXd states(obs_dim_, b.size() * N);
      MatrixXd cands(st_.policy.stored_dim(), b.size() * N);
      for (Eigen::Index j = 0; j < b.size(); ++j) {
        const VectorXd s = b.next_states.col(j);
        cands.middleCols(j * N, N) = st_.policy.sample_n(s, N, rng);
        states.middleCols(j * N, N) = s.replicate(1, N);
      }
      const VectorXd q = target_critic().evaluate(states, encode_options(space_, cfg_.H, cands));
      for (Eigen::Index j = 0; j < b.size(); ++j) next[j] = q.segment(j * N, N).maxCoeff();
    } else {
      next = v_batch(b.next_states);
    }
    VectorXd y(b.size());
    for (Eigen::Index j = 0; j < b.size(); ++j)
      y[j] = bellman_target(b.returns[j], next[j], b.mask[j], cfg_.gamma2, cfg_.H);
    return y;
  }

  /// Critic phase. Reads psi (or the policy, in the coupled ablation), writes theta only.
  template <class Rng>
  double update_critic(const Prepared& p, Rng& rng, TrainMetrics& m) {
    const VectorXd y = critic_targets(*p.batch, rng);
    if (!y.allFinite()) throw NonFiniteLoss("loss_q", st_.step);
    EnsembleLoss cl;
    if (distributional())
      cl = critic_loss_distributional(st_.critics, p.critic_input, y, st_.grid,
                                      hl_gauss_sigma(st_.grid, cfg_.sigma_coef));
    else
      cl = critic_loss_scalar(st_.critics, p.critic_input, y);
    check_finite(cl.loss, "loss_q");
    for (std::size_t k = 0; k < st_.critics.size(); ++k) {
      nn::clip_global_norm(cl.grads[k], cfg_.grad_clip);
      nn::adam_step(st_.critic_opts[k], st_.critics[k], cl.grads[k]);
    }
    m.loss_q = cl.loss;
    m.max_target_mass_error = cl.max_target_mass_error;
    return cl.loss;
  }

  /// Actor phase. Reads psi/theta/theta-bar as constants, writes phi only.
  double update_actor(const Prepared& p, TrainMetrics& m) {
    const OptionBatch& b = *p.batch;
    PolicyLoss pl;
    switch (cfg_.extractor) {
      case ExtractorKind::None: return 0.0;
      case ExtractorKind::BC: pl = bc_loss(st_.policy, b); break;
      case ExtractorKind::AWR: {
        const VectorXd adv = target_critic().evaluate(b.states, p.features) - v_batch(b.states);
        pl = awr_loss(st_.policy, b, adv, {cfg_.awr_temperature, cfg_.awr_max_weight});
        break;
      }
      case ExtractorKind::DPG_BC: pl = dpg_bc_loss(st_.policy, b, critic(), cfg_.bc_alpha); break;
    }
    check_finite(pl.loss, "loss_pi");
    nn::clip_global_norm(pl.grad, cfg_.grad_clip);
    nn::adam_step(st_.policy_opt, st_.policy.params(), pl.grad);
    m.loss_pi = pl.loss;
    return pl.loss;
  }

  void update_targets() {
    for (std::size_t k = 0; k < st_.critics.size(); ++k) nn::polyak_update(st_.targets[k], st_.critics[k], cfg_.polyak);
  }

  template <class Rng>
  TrainMetrics train_step(const OptionBatch& b, Rng& rng) {
    TrainMetrics m;
    m.step = st_.step;
    const Prepared p = prepare(b);
    update_value(p, m);
    update_critic(p, rng, m);
    update_actor(p, m);
    update_targets();
    m.mean_v = v_batch(b.states).mean();
    ++st_.step;
    m.step = st_.step;
    return m;
  }

 private:
  void reset_optimizers() {
    st_.value_opt = nn::make_adam(st_.value, cfg_.learning_rate);
    st_.critic_opts.clear();
    for (const auto& c : st_.critics) st_.critic_opts.push_back(nn::make_adam(c, cfg_.learning_rate));
    st_.policy_opt = nn::make_adam(st_.policy.params(), cfg_.learning_rate);
  }

  void check_architecture() const {
    const int head = distributional() ? st_.grid.m : 1;
    require_shape(st_.value.in_dim() == obs_dim_ && st_.value.out_dim() == head, "value network shape mismatch");
    require_shape(static_cast<int>(st_.critics.size()) == cfg_.ensemble && st_.targets.size() == st_.critics.size(),
                  "critic ensemble size mismatch");
    for (std::size_t k = 0; k < st_.critics.size(); ++k) {
      require_shape(st_.critics[k].in_dim() == obs_dim_ + cfg_.H * space_.feature_dim() &&
                        st_.critics[k].out_dim() == head,
                    "critic network shape mismatch");
      require_shape(st_.critics[k].same_architecture(st_.targets[k]), "target critic architecture mismatch");
    }
    require_shape(st_.policy.obs_dim() == obs_dim_ && st_.policy.option_length() == cfg_.H,
                  "policy network shape mismatch");
  }

  void check_finite(double loss, const char* which) const {
    if (!std::isfinite(loss)) throw NonFiniteLoss(which, st_.step);
  }

  LearnerConfig cfg_;
  int obs_dim_ = 0;
  ActionSpace space_;
  LearnerState st_;
};

// --- checkpoint container -----------------------------------------------------
//
//   "DEASCKPT" u32 version
//   string learner config (JSON), u32 obs_dim, u8 action kind, u32 act_dim, u32 n_actions
//   f64 v_min, f64 v_max, u32 m, i64 step
//   value MLP, u32 ensemble, critic MLPs, target MLPs, policy MLP, u64 n_log_std, f64 log_std[n]

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(std::ostream& os, const Learner& l) {
  const LearnerState& s = l.state();
  io::write_magic(os, "DEASCKPT");
  io::write_pod(os, kCheckpointVersion);
  io::write_string(os, l.config().to_json().dump());
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(l.obs_dim()));
  io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(l.action_space().kind));
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(l.action_space().dim));
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(l.action_space().n_actions));
  io::write_pod(os, s.grid.v_min);
  io::write_pod(os, s.grid.v_max);
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.grid.m));
  io::write_pod<std::int64_t>(os, s.step);
  nn::write_mlp(os, s.value);
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.critics.size()));
  for (const auto& c : s.critics) nn::write_mlp(os, c);
  for (const auto& c : s.targets) nn::write_mlp(os, c);
  nn::write_mlp(os, s.policy.params().net);
  io::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(s.policy.params().log_std.size()));
  io::write_doubles(os, s.policy.params().log_std);
}

inline Learner read_checkpoint(std::istream& is) {
  io::expect_magic(is, "DEASCKPT");
  if (io::read_pod<std::uint32_t>(is) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  LearnerConfig cfg;
  try {
    cfg = LearnerConfig::from_json(nlohmann::json::parse(io::read_string(is)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint config: ") + e.what());
  }
  const int obs_dim = static_cast<int>(io::read_pod<std::uint32_t>(is));
  ActionSpace space;
  const auto kind = io::read_pod<std::uint8_t>(is);
  if (kind > 1) throw FormatError("unknown action kind");
  space.kind = static_cast<ActionKind>(kind);
  space.dim = static_cast<int>(io::read_pod<std::uint32_t>(is));
  space.n_actions = static_cast<int>(io::read_pod<std::uint32_t>(is));
  LearnerState s;
  const double v_min = io::read_pod<double>(is);
  const double v_max = io::read_pod<double>(is);
  const int m = static_cast<int>(io::read_pod<std::uint32_t>(is));
  s.grid = make_support(v_min, v_max, m);
  s.step = io::read_pod<std::int64_t>(is);
  s.value = nn::read_mlp(is);
  const auto n = io::read_pod<std::uint32_t>(is);
  if (n == 0 || n > 64) throw FormatError("critic ensemble size out of range");
  for (std::uint32_t k = 0; k < n; ++k) s.critics.push_back(nn::read_mlp(is));
  for (std::uint32_t k = 0; k < n; ++k) s.targets.push_back(nn::read_mlp(is));
  PolicyParams pp;
  pp.net = nn::read_mlp(is);
  const auto nls = io::read_pod<std::uint64_t>(is);
  if (nls > (1u << 20)) throw FormatError("log-std length out of range");
  pp.log_std.resize(static_cast<Eigen::Index>(nls));
  io::read_doubles(is, pp.log_std);
  s.policy = SequencePolicy::from_params(space, cfg.H, std::move(pp));
  return Learner::from_state(cfg, obs_dim, space, std::move(s));
}

inline void save_checkpoint(const std::string& path, const Learner& l) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_checkpoint(os, l);
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline Learner load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_checkpoint(is);
}

}  // namespace deas
