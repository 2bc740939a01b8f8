#pragma once

// Toy tasks with semi-sparse rewards: reward at each step is minus the number
// of subtasks not yet completed in the current state.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "deas/dataset.hpp"
#include "deas/error.hpp"

namespace deas {

/// A small deterministic MDP with subtask bookkeeping.
struct TabularMDP {
  int n_states = 0;
  int n_actions = 0;
  std::vector<std::vector<int>> next;       // next[s][a]
  std::vector<std::vector<double>> reward;  // reward[s][a]
  std::vector<int> completed;               // subtasks completed in state s
  std::vector<int> scripted;                // expert action per state
  int n_subtasks = 0;
  int initial = 0;
  int horizon = 0;  // episode length L

  void validate() const {
    require_config(n_states >= 1 && n_actions >= 1, "MDP needs states and actions");
    require_config(static_cast<int>(next.size()) == n_states && static_cast<int>(reward.size()) == n_states &&
                       static_cast<int>(completed.size()) == n_states,
                   "MDP tables must have one row per state");
    require_config(initial >= 0 && initial < n_states, "initial state out of range");
    require_config(horizon >= 1, "horizon must be >= 1");
    for (int s = 0; s < n_states; ++s) {
      require_config(static_cast<int>(next[s].size()) == n_actions && static_cast<int>(reward[s].size()) == n_actions,
                     "MDP rows must have one entry per action");
      for (int a = 0; a < n_actions; ++a) {
        require_config(next[s][a] >= 0 && next[s][a] < n_states, "transition lands outside the state space");
        require_config(std::isfinite(reward[s][a]), "non-finite reward");
        require_config(reward[s][a] == -static_cast<double>(n_subtasks - completed[s]),
                       "reward must equal minus the number of uncompleted subtasks");
      }
    }
  }

  [[nodiscard]] bool success(int s) const { return completed[s] == n_subtasks; }

  [[nodiscard]] Eigen::VectorXd observation(int s) const {
    Eigen::VectorXd o = Eigen::VectorXd::Zero(n_states);
    o[s] = 1.0;
    return o;
  }

  /// Inverse of observation().
  [[nodiscard]] int state_of(const Eigen::Ref<const Eigen::VectorXd>& obs) const {
    require_shape(obs.size() == n_states, "observation size does not match the MDP");
    Eigen::Index s = 0;
    obs.maxCoeff(&s);
    return static_cast<int>(s);
  }
};

/// Sequential subtasks on a line. State s = k * steps + p (subtask k, progress p);
/// the goal state K * steps is absorbing. The correct action in state s is
/// s mod n_actions and advances one step; a wrong action stalls, or with
/// reset_on_wrong drops progress back to the start of the current subtask.
inline TabularMDP chain_env(int K, int steps_per_subtask, int n_actions = 3, int horizon = 0,
                            bool reset_on_wrong = false) {
  require_config(K >= 1, "chain needs at least one subtask");
  require_config(steps_per_subtask >= 1, "steps per subtask must be >= 1");
  require_config(n_actions >= 1, "chain needs at least one action");
  TabularMDP m;
  m.n_subtasks = K;
  m.n_actions = n_actions;
  m.n_states = K * steps_per_subtask + 1;
  m.horizon = horizon > 0 ? horizon : 4 * K * steps_per_subtask;
  const int goal = m.n_states - 1;
  for (int s = 0; s < m.n_states; ++s) {
    const int k = s / steps_per_subtask;
    m.completed.push_back(std::min(k, K));
    const double r = static_cast<double>(std::min(k, K) - K);
    std::vector<int> nx(n_actions);
    const int correct = s % n_actions;
    for (int a = 0; a < n_actions; ++a) {
      if (s == goal) nx[a] = goal;
      else if (a == correct) nx[a] = s + 1;
      else nx[a] = reset_on_wrong ? k * steps_per_subtask : s;
    }
    m.next.push_back(std::move(nx));
    m.reward.emplace_back(n_actions, r);
    m.scripted.push_back(correct);
  }
  m.validate();
  return m;
}

/// Chain whose mistakes surface late. Each subtask opens with a key action and
/// continues down a corridor of steps - 1 cells that every action walks through.
/// A wrong key is remembered and only punished at the end of the corridor, where
/// the subtask restarts instead of completing. Rewards still change only when a
/// subtask completes.
inline TabularMDP delayed_chain_env(int K, int steps_per_subtask, int n_actions = 3, int horizon = 0) {
  require_config(K >= 1, "chain needs at least one subtask");
  require_config(steps_per_subtask >= 1, "steps per subtask must be >= 1");
  require_config(n_actions >= 1, "chain needs at least one action");
  const int n = steps_per_subtask;
  const int per = 2 * n - 1;  // key cell, then armed and disarmed corridors
  TabularMDP m;
  m.n_subtasks = K;
  m.n_actions = n_actions;
  m.n_states = K * per + 1;
  m.horizon = horizon > 0 ? horizon : 4 * K * n;
  const int goal = m.n_states - 1;
  auto cell = [&](int k, int p, bool armed) { return p == 0 ? k * per : k * per + (armed ? p : n - 1 + p); };
  m.next.assign(static_cast<std::size_t>(m.n_states), std::vector<int>(static_cast<std::size_t>(n_actions), goal));
  m.reward.assign(static_cast<std::size_t>(m.n_states), std::vector<double>(static_cast<std::size_t>(n_actions), 0.0));
  m.completed.assign(static_cast<std::size_t>(m.n_states), K);
  m.scripted.assign(static_cast<std::size_t>(m.n_states), 0);
  for (int k = 0; k < K; ++k)
    for (int p = 0; p < n; ++p)
      for (bool armed : {true, false}) {
        if (p == 0 && !armed) continue;
        const int s = cell(k, p, armed);
        const int correct = (k * n + p) % n_actions;
        m.completed[static_cast<std::size_t>(s)] = k;
        m.scripted[static_cast<std::size_t>(s)] = correct;
        for (int a = 0; a < n_actions; ++a) {
          m.reward[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)] = -static_cast<double>(K - k);
          const bool ok = a == correct;
          const bool still_armed = p == 0 ? ok : armed;
          int nx = s;
          if (p == 0 && n == 1) nx = ok ? (k + 1 == K ? goal : cell(k + 1, 0, true)) : s;
          else if (p == 0) nx = cell(k, 1, still_armed);
          else if (p + 1 < n) nx = cell(k, p + 1, armed);
          else nx = armed ? (k + 1 == K ? goal : cell(k + 1, 0, true)) : cell(k, 0, true);
          m.next[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)] = nx;
        }
      }
  m.validate();
  return m;
}

/// Episode runner over a TabularMDP with the common environment interface.
class TabularEnv {
 public:
  explicit TabularEnv(const TabularMDP& m) : mdp_(&m) {}

  [[nodiscard]] int obs_dim() const { return mdp_->n_states; }
  [[nodiscard]] ActionSpace action_space() const { return ActionSpace::discrete(mdp_->n_actions); }
  [[nodiscard]] int horizon() const { return mdp_->horizon; }
  [[nodiscard]] const TabularMDP& mdp() const { return *mdp_; }

  Eigen::VectorXd reset() {
    s_ = mdp_->initial;
    return observation();
  }
  [[nodiscard]] Eigen::VectorXd observation() const { return mdp_->observation(s_); }
  double step(std::span<const double> action) {
    const auto a = static_cast<int>(std::lround(action[0]));
    require_shape(a >= 0 && a < mdp_->n_actions, "action out of range");
    const double r = mdp_->reward[s_][a];
    s_ = mdp_->next[s_][a];
    return r;
  }
  [[nodiscard]] bool success() const { return mdp_->success(s_); }
  [[nodiscard]] bool terminal() const { return false; }
  [[nodiscard]] int state() const { return s_; }

  /// Expert action for the current state.
  [[nodiscard]] Eigen::VectorXd scripted_action() const {
    return Eigen::VectorXd::Constant(1, static_cast<double>(mdp_->scripted[s_]));
  }

 private:
  const TabularMDP* mdp_;
  int s_ = 0;
};

/// 2-D point mass visiting waypoints in order inside the box [-1, 1]^2.
/// Observation: x, y, vx, vy, fraction of waypoints reached.
class PointMassTask {
 public:
  struct Waypoint {
    double x = 0.0, y = 0.0, radius = 0.15;
  };

  explicit PointMassTask(std::vector<Waypoint> waypoints, int horizon = 200, double dt = 0.1)
      : waypoints_(std::move(waypoints)), horizon_(horizon), dt_(dt) {
    require_config(!waypoints_.empty(), "point-mass task needs at least one waypoint");
    require_config(horizon_ >= 1 && dt_ > 0.0, "invalid point-mass horizon or time step");
  }

  static PointMassTask standard(int n_waypoints = 2, int horizon = 200) {
    static const Waypoint all[] = {{0.6, 0.6, 0.15}, {-0.6, 0.6, 0.15}, {-0.6, -0.6, 0.15}, {0.6, -0.6, 0.15}};
    require_config(n_waypoints >= 1 && n_waypoints <= 4, "standard point-mass task has 1..4 waypoints");
    return PointMassTask(std::vector<Waypoint>(all, all + n_waypoints), horizon);
  }

  [[nodiscard]] int obs_dim() const { return 5; }
  [[nodiscard]] ActionSpace action_space() const { return ActionSpace::continuous(2); }
  [[nodiscard]] int horizon() const { return horizon_; }
  [[nodiscard]] int n_subtasks() const { return static_cast<int>(waypoints_.size()); }

  Eigen::VectorXd reset() {
    pos_.setZero();
    vel_.setZero();
    reached_ = 0;
    return observation();
  }

  [[nodiscard]] Eigen::VectorXd observation() const {
    Eigen::VectorXd o(5);
    o << pos_, vel_, static_cast<double>(reached_) / n_subtasks();
    return o;
  }

  double step(std::span<const double> action) {
    const double r = static_cast<double>(reached_ - n_subtasks());
    Eigen::Vector2d a(std::clamp(action[0], -1.0, 1.0), std::clamp(action[1], -1.0, 1.0));
    vel_ = 0.8 * vel_ + dt_ * 2.0 * a;
    pos_ += dt_ * vel_;
    for (int i = 0; i < 2; ++i) {
      if (pos_[i] > 1.0 || pos_[i] < -1.0) {
        pos_[i] = std::clamp(pos_[i], -1.0, 1.0);
        vel_[i] = 0.0;
      }
    }
    if (reached_ < n_subtasks()) {
      const auto& w = waypoints_[static_cast<std::size_t>(reached_)];
      if ((pos_ - Eigen::Vector2d(w.x, w.y)).norm() <= w.radius) ++reached_;
    }
    return r;
  }

  [[nodiscard]] bool success() const { return reached_ == n_subtasks(); }
  [[nodiscard]] bool terminal() const { return false; }
  [[nodiscard]] int reached() const { return reached_; }

  /// PD controller toward the next waypoint.
  [[nodiscard]] Eigen::VectorXd scripted_action() const {
    if (success()) return Eigen::VectorXd::Zero(2);
    const auto& w = waypoints_[static_cast<std::size_t>(reached_)];
    const Eigen::Vector2d a = 4.0 * (Eigen::Vector2d(w.x, w.y) - pos_) - 1.5 * vel_;
    return a.cwiseMax(-1.0).cwiseMin(1.0);
  }

 private:
  std::vector<Waypoint> waypoints_;
  int horizon_;
  double dt_;
  Eigen::Vector2d pos_ = Eigen::Vector2d::Zero();
  Eigen::Vector2d vel_ = Eigen::Vector2d::Zero();
  int reached_ = 0;
};

template <class E>
concept Environment = requires(E& e, const E& ce, std::span<const double> a) {
  { ce.obs_dim() } -> std::convertible_to<int>;
  { ce.action_space() } -> std::convertible_to<ActionSpace>;
  { ce.horizon() } -> std::convertible_to<int>;
  { e.reset() } -> std::convertible_to<Eigen::VectorXd>;
  { e.step(a) } -> std::convertible_to<double>;
  { ce.observation() } -> std::convertible_to<Eigen::VectorXd>;
  { ce.success() } -> std::convertible_to<bool>;
  { ce.terminal() } -> std::convertible_to<bool>;
  { ce.scripted_action() } -> std::convertible_to<Eigen::VectorXd>;
};

struct PlayNoise {
  double stickiness = 0.5;  // discrete: chance a noisy step repeats the previous action
  double correlation = 0.9; // continuous: AR(1) coefficient of the noise process
};

/// Scripted expert corrupted by temporally correlated noise, fixed-length episodes.
/// Discrete: with probability `noise` a step is noisy, repeating the previous
/// action (stickiness) or drawing a uniform one. Continuous: the action is
/// (1 - noise) * expert + noise * n_t with n_t an AR(1) process.
template <Environment Env, class Rng>
TrajectoryDataset collect_play_data(Env env, int n_trajectories, double noise, Rng& rng, PlayNoise opts = {},
                                    int* n_success = nullptr) {
  require_config(noise >= 0.0 && noise <= 1.0, "noise must lie in [0, 1]");
  require_config(n_trajectories >= 0, "trajectory count must be non-negative");
  TrajectoryDataset ds;
  if (n_success) *n_success = 0;
  ds.obs_dim = env.obs_dim();
  ds.action_space = env.action_space();
  const int L = env.horizon();
  const int ad = ds.action_space.dim;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int i = 0; i < n_trajectories; ++i) {
    Trajectory tr;
    tr.states.resize(ds.obs_dim, L + 1);
    tr.actions.resize(ad, L);
    tr.rewards.resize(L);
    tr.states.col(0) = env.reset();
    Eigen::VectorXd prev = Eigen::VectorXd::Zero(ad);
    Eigen::VectorXd ou = Eigen::VectorXd::Zero(ad);
    bool have_prev = false;
    int T = L;
    for (int t = 0; t < L; ++t) {
      Eigen::VectorXd a = env.scripted_action();
      if (ds.action_space.is_discrete()) {
        if (unif(rng) < noise) {
          if (have_prev && unif(rng) < opts.stickiness) {
            a = prev;
          } else {
            std::uniform_int_distribution<int> pick(0, ds.action_space.n_actions - 1);
            a[0] = pick(rng);
          }
        }
      } else {
        const double rho = opts.correlation;
        for (int d = 0; d < ad; ++d) ou[d] = rho * ou[d] + std::sqrt(1.0 - rho * rho) * gauss(rng);
        a = ((1.0 - noise) * a + noise * ou).cwiseMax(-1.0).cwiseMin(1.0);
      }
      prev = a;
      have_prev = true;
      tr.actions.col(t) = a;
      tr.rewards[t] = env.step(std::span<const double>(a.data(), a.size()));
      tr.states.col(t + 1) = env.observation();
      if (env.terminal()) {
        T = t + 1;
        tr.terminal = true;
        break;
      }
    }
    if (n_success && env.success()) ++*n_success;
    if (T < L) {
      tr.states.conservativeResize(Eigen::NoChange, T + 1);
      tr.actions.conservativeResize(Eigen::NoChange, T);
      tr.rewards.conservativeResize(T);
    }
    ds.trajectories.push_back(std::move(tr));
  }
  return ds;
}

// --- evaluation ---------------------------------------------------------------

/// Maps an observation to an action chunk [act_dim x n_steps] using the supplied RNG.
using ChunkController = std::function<Eigen::MatrixXd(const Eigen::VectorXd& obs, std::mt19937_64& rng)>;

struct EvalStats {
  double mean_return = 0.0;
  double success_rate = 0.0;
  int episodes = 0;
  std::uint64_t seed = 0;
};

/// Runs episodes to the horizon, executing each chunk in full before re-querying.
/// Episode i uses its own RNG stream seeded from (seed, i), so results do not
/// depend on `threads`.
template <Environment Env>
EvalStats evaluate_controller(const Env& prototype, const ChunkController& controller, int n_episodes,
                              std::uint64_t seed, int threads = 1) {
  require_config(n_episodes >= 1, "need at least one evaluation episode");
  std::vector<double> returns(static_cast<std::size_t>(n_episodes));
  std::vector<int> success(static_cast<std::size_t>(n_episodes));
  auto run = [&](int first, int stride) {
    for (int i = first; i < n_episodes; i += stride) {
      std::seed_seq sq{seed, static_cast<std::uint64_t>(i), std::uint64_t{0x5eed}};
      std::mt19937_64 rng(sq);
      Env env = prototype;
      Eigen::VectorXd obs = env.reset();
      double ret = 0.0;
      int t = 0;
      bool done = false;
      while (t < env.horizon() && !done) {
        const Eigen::MatrixXd chunk = controller(obs, rng);
        for (Eigen::Index k = 0; k < chunk.cols() && t < env.horizon(); ++k, ++t) {
          const Eigen::VectorXd a = chunk.col(k);
          ret += env.step(std::span<const double>(a.data(), a.size()));
          if (env.terminal()) {
            done = true;
            break;
          }
        }
        obs = env.observation();
      }
      returns[static_cast<std::size_t>(i)] = ret;
      success[static_cast<std::size_t>(i)] = env.success() ? 1 : 0;
    }
  };
  threads = std::max(1, std::min(threads, n_episodes));
  if (threads == 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) pool.emplace_back(run, w, threads);
    for (auto& th : pool) th.join();
  }
  EvalStats st;
  st.episodes = n_episodes;
  st.seed = seed;
  for (int i = 0; i < n_episodes; ++i) {
    st.mean_return += returns[static_cast<std::size_t>(i)];
    st.success_rate += success[static_cast<std::size_t>(i)];
  }
  st.mean_return /= n_episodes;
  st.success_rate /= n_episodes;
  return st;
}

/// Evaluates the scripted expert (no RNG use).
template <Environment Env>
EvalStats evaluate_scripted(const Env& prototype, int n_episodes, std::uint64_t seed) {
  EvalStats st;
  st.episodes = n_episodes;
  st.seed = seed;
  for (int i = 0; i < n_episodes; ++i) {
    Env env = prototype;
    env.reset();
    double ret = 0.0;
    for (int t = 0; t < env.horizon(); ++t) {
      const Eigen::VectorXd a = env.scripted_action();
      ret += env.step(std::span<const double>(a.data(), a.size()));
      if (env.terminal()) break;
    }
    st.mean_return += ret;
    st.success_rate += env.success() ? 1.0 : 0.0;
  }
  st.mean_return /= n_episodes;
  st.success_rate /= n_episodes;
  return st;
}

/// Uniformly random actions, one step per chunk.
inline ChunkController random_controller(const ActionSpace& space) {
  return [space](const Eigen::VectorXd&, std::mt19937_64& rng) {
    Eigen::MatrixXd a(space.dim, 1);
    if (space.is_discrete()) {
      std::uniform_int_distribution<int> pick(0, space.n_actions - 1);
      a(0, 0) = pick(rng);
    } else {
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      for (int d = 0; d < space.dim; ++d) a(d, 0) = u(rng);
    }
    return a;
  };
}

}  // namespace deas
