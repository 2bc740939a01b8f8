#pragma once

// Offline trajectory storage and SMDP option sampling.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "deas/error.hpp"
#include "deas/io.hpp"

namespace deas {

enum class ActionKind : std::uint8_t { Continuous = 0, Discrete = 1 };

/// Per-step action space. Discrete actions are a single integer code in
/// [0, n_actions) stored as a double; networks see them one-hot encoded.
struct ActionSpace {
  ActionKind kind = ActionKind::Continuous;
  int dim = 1;        // numbers per step as stored in the dataset
  int n_actions = 0;  // discrete only

  static ActionSpace continuous(int dim) { return {ActionKind::Continuous, dim, 0}; }
  static ActionSpace discrete(int n) { return {ActionKind::Discrete, 1, n}; }

  [[nodiscard]] bool is_discrete() const { return kind == ActionKind::Discrete; }
  /// Width of one step's network encoding.
  [[nodiscard]] int feature_dim() const { return is_discrete() ? n_actions : dim; }

  /// Encodes one step's stored action into `out` (length feature_dim()).
  void encode(std::span<const double> action, std::span<double> out) const {
    if (is_discrete()) {
      std::fill(out.begin(), out.end(), 0.0);
      out[static_cast<std::size_t>(std::lround(action[0]))] = 1.0;
    } else {
      std::copy(action.begin(), action.end(), out.begin());
    }
  }

  bool operator==(const ActionSpace&) const = default;
};

struct Trajectory {
  Eigen::MatrixXd states;   // [obs_dim x (T + 1)]
  Eigen::MatrixXd actions;  // [act_dim x T]
  Eigen::VectorXd rewards;  // [T]
  bool terminal = false;    // true when the final state ends the episode (no bootstrap)

  [[nodiscard]] int length() const { return static_cast<int>(rewards.size()); }
};

struct TrajectoryDataset {
  int obs_dim = 0;
  ActionSpace action_space;
  std::vector<Trajectory> trajectories;

  [[nodiscard]] bool empty() const { return trajectories.empty(); }
  [[nodiscard]] std::size_t num_transitions() const {
    std::size_t n = 0;
    for (const auto& t : trajectories) n += static_cast<std::size_t>(t.length());
    return n;
  }
  [[nodiscard]] int min_length() const {
    int m = std::numeric_limits<int>::max();
    for (const auto& t : trajectories) m = std::min(m, t.length());
    return m;
  }

  void validate() const {
    require_shape(obs_dim > 0, "dataset obs_dim must be positive");
    require_shape(action_space.dim > 0, "dataset act_dim must be positive");
    if (action_space.is_discrete()) require_shape(action_space.n_actions >= 1, "discrete dataset needs n_actions");
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
      const auto& tr = trajectories[i];
      const auto T = tr.rewards.size();
      const std::string where = "trajectory " + std::to_string(i);
      require_shape(tr.states.rows() == obs_dim && tr.states.cols() == T + 1, where + ": states must be obs_dim x (T+1)");
      require_shape(tr.actions.rows() == action_space.dim && tr.actions.cols() == T,
                    where + ": actions must be act_dim x T");
      require_shape(tr.states.allFinite() && tr.actions.allFinite() && tr.rewards.allFinite(),
                    where + ": non-finite values");
      if (action_space.is_discrete()) {
        for (Eigen::Index k = 0; k < tr.actions.size(); ++k) {
          const double a = tr.actions.data()[k];
          require_shape(a == std::round(a) && a >= 0 && a < action_space.n_actions,
                        where + ": discrete action code out of range");
        }
      }
    }
  }
};

/// sum_k gamma1^k r_k
inline double intra_return(std::span<const double> rewards, double gamma1) {
  double acc = 0.0;
  for (std::size_t k = rewards.size(); k-- > 0;) acc = rewards[k] + gamma1 * acc;
  return acc;
}

/// A batch of SMDP transitions (s_t, o_t = a_{t:t+H-1}, R-hat, s_{t+H}, mask), one per column.
struct OptionBatch {
  int H = 1;
  Eigen::MatrixXd states;       // [obs_dim x B]
  Eigen::MatrixXd actions;      // [H * act_dim x B], stored (un-encoded) actions, step-major
  Eigen::VectorXd returns;      // [B] intra-option discounted return
  Eigen::MatrixXd next_states;  // [obs_dim x B]
  Eigen::VectorXd mask;         // [B] 0 where s_{t+H} is terminal
  std::vector<int> trajectory;  // source trajectory per column
  std::vector<int> start;       // source start step per column

  [[nodiscard]] Eigen::Index size() const { return returns.size(); }
};

/// Uniform sampler over every valid option start t in [0, T - H] of every trajectory.
class OptionSampler {
 public:
  OptionSampler(const TrajectoryDataset& ds, int H, double gamma1) : ds_(&ds), H_(H), gamma1_(gamma1) {
    require_config(H >= 1, "option length must be >= 1");
    require_config(!ds.empty(), "cannot sample from an empty dataset");
    require_config(H <= ds.min_length(), "option length " + std::to_string(H) +
                                             " exceeds the shortest trajectory (" +
                                             std::to_string(ds.min_length()) + ")");
    long total = 0;
    for (const auto& tr : ds.trajectories) {
      total += tr.length() - H + 1;
      cumulative_.push_back(total);
    }
  }

  [[nodiscard]] long num_positions() const { return cumulative_.back(); }
  [[nodiscard]] int option_length() const { return H_; }

  /// Maps a flat position index to (trajectory, start).
  [[nodiscard]] std::pair<int, int> locate(long flat) const {
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), flat);
    const int traj = static_cast<int>(it - cumulative_.begin());
    const long before = traj == 0 ? 0 : cumulative_[traj - 1];
    return {traj, static_cast<int>(flat - before)};
  }

  template <class Rng>
  OptionBatch sample(int batch_size, Rng& rng) const {
    require_config(batch_size >= 1, "batch size must be >= 1");
    std::uniform_int_distribution<long> pick(0, num_positions() - 1);
    std::vector<std::pair<int, int>> where(batch_size);
    for (auto& w : where) w = locate(pick(rng));
    return gather(where);
  }

  /// Builds a batch from explicit (trajectory, start) pairs.
  [[nodiscard]] OptionBatch gather(const std::vector<std::pair<int, int>>& where) const {
    const int obs = ds_->obs_dim;
    const int act = ds_->action_space.dim;
    const auto B = static_cast<Eigen::Index>(where.size());
    OptionBatch b;
    b.H = H_;
    b.states.resize(obs, B);
    b.next_states.resize(obs, B);
    b.actions.resize(static_cast<Eigen::Index>(H_) * act, B);
    b.returns.resize(B);
    b.mask.resize(B);
    b.trajectory.resize(where.size());
    b.start.resize(where.size());
    for (Eigen::Index j = 0; j < B; ++j) {
      const auto [ti, t] = where[static_cast<std::size_t>(j)];
      const Trajectory& tr = ds_->trajectories[static_cast<std::size_t>(ti)];
      require_config(t >= 0 && t + H_ <= tr.length(), "option start out of range");
      b.states.col(j) = tr.states.col(t);
      b.next_states.col(j) = tr.states.col(t + H_);
      for (int k = 0; k < H_; ++k) b.actions.col(j).segment(k * act, act) = tr.actions.col(t + k);
      b.returns[j] = intra_return(std::span<const double>(tr.rewards.data() + t, H_), gamma1_);
      b.mask[j] = (tr.terminal && t + H_ == tr.length()) ? 0.0 : 1.0;
      b.trajectory[static_cast<std::size_t>(j)] = ti;
      b.start[static_cast<std::size_t>(j)] = t;
    }
    return b;
  }

 private:
  const TrajectoryDataset* ds_;
  int H_;
  double gamma1_;
  std::vector<long> cumulative_;
};

template <class Rng>
OptionBatch sample_option_batch(const TrajectoryDataset& ds, int H, double gamma1, int batch_size, Rng& rng) {
  return OptionSampler(ds, H, gamma1).sample(batch_size, rng);
}

struct ReturnStatistics {
  double r_min = 0.0;
  double r_max = 0.0;
  /// Dual-discount returns-to-go G_t = R-hat_t + gamma2^H G_{t+H} for every step t.
  std::vector<double> returns_to_go;
};

inline ReturnStatistics return_statistics(const TrajectoryDataset& ds, double gamma1, double gamma2, int H) {
  require_config(!ds.empty() && ds.num_transitions() > 0, "return statistics of an empty dataset");
  require_config(H >= 1, "option length must be >= 1");
  ReturnStatistics st{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(), {}};
  const double bootstrap = std::pow(gamma2, H);
  for (const auto& tr : ds.trajectories) {
    const int T = tr.length();
    if (T == 0) continue;
    st.r_min = std::min(st.r_min, tr.rewards.minCoeff());
    st.r_max = std::max(st.r_max, tr.rewards.maxCoeff());
    std::vector<double> g(static_cast<std::size_t>(T), 0.0);
    for (int t = T - 1; t >= 0; --t) {
      const int n = std::min(H, T - t);
      const double rhat = intra_return(std::span<const double>(tr.rewards.data() + t, n), gamma1);
      g[t] = rhat + (t + H < T ? bootstrap * g[t + H] : 0.0);
    }
    st.returns_to_go.insert(st.returns_to_go.end(), g.begin(), g.end());
  }
  return st;
}

// --- file format ---------------------------------------------------------
//
//   "DEASDATA" u32 version
//   u8 action kind, u32 obs_dim, u32 act_dim, u32 n_actions, u64 n_trajectories
//   per trajectory:
//     u64 T, u8 terminal, u64 payload count (= (T+1)*obs_dim + T*act_dim + T)
//     f64 states[(T+1) * obs_dim], f64 actions[T * act_dim], f64 rewards[T]

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

inline void save_dataset(const TrajectoryDataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  io::write_magic(os, "DEASDATA");
  io::write_pod(os, kDatasetFormatVersion);
  io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(ds.action_space.kind));
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.obs_dim));
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.action_space.dim));
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.action_space.n_actions));
  io::write_pod<std::uint64_t>(os, ds.trajectories.size());
  for (const auto& tr : ds.trajectories) {
    const auto T = static_cast<std::uint64_t>(tr.length());
    io::write_pod<std::uint64_t>(os, T);
    io::write_pod<std::uint8_t>(os, tr.terminal ? 1 : 0);
    io::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(tr.states.size() + tr.actions.size() + tr.rewards.size()));
    io::write_doubles(os, tr.states);
    io::write_doubles(os, tr.actions);
    io::write_doubles(os, tr.rewards);
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline TrajectoryDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  io::expect_magic(is, "DEASDATA");
  if (io::read_pod<std::uint32_t>(is) != kDatasetFormatVersion) throw FormatError("unsupported dataset version");
  TrajectoryDataset ds;
  const auto kind = io::read_pod<std::uint8_t>(is);
  if (kind > 1) throw FormatError("unknown action kind");
  ds.action_space.kind = static_cast<ActionKind>(kind);
  ds.obs_dim = static_cast<int>(io::read_pod<std::uint32_t>(is));
  ds.action_space.dim = static_cast<int>(io::read_pod<std::uint32_t>(is));
  ds.action_space.n_actions = static_cast<int>(io::read_pod<std::uint32_t>(is));
  if (ds.obs_dim <= 0 || ds.action_space.dim <= 0) throw FormatError("malformed header dimensions");
  const auto n = io::read_pod<std::uint64_t>(is);
  if (n > (1u << 28)) throw FormatError("trajectory count out of range");
  ds.trajectories.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto T = static_cast<Eigen::Index>(io::read_pod<std::uint64_t>(is));
    const auto terminal = io::read_pod<std::uint8_t>(is);
    const auto payload = io::read_pod<std::uint64_t>(is);
    if (T < 0 || T > (1 << 24)) throw FormatError("trajectory length out of range");
    const auto expected = static_cast<std::uint64_t>((T + 1) * ds.obs_dim + T * ds.action_space.dim + T);
    if (payload != expected)
      throw ShapeError("trajectory " + std::to_string(i) + ": payload of " + std::to_string(payload) +
                       " values does not match header dimensions (expected " + std::to_string(expected) + ")");
    Trajectory tr;
    tr.terminal = terminal != 0;
    tr.states.resize(ds.obs_dim, T + 1);
    tr.actions.resize(ds.action_space.dim, T);
    tr.rewards.resize(T);
    io::read_doubles(is, tr.states);
    io::read_doubles(is, tr.actions);
    io::read_doubles(is, tr.rewards);
    ds.trajectories.push_back(std::move(tr));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw ShapeError("trailing bytes after the last trajectory");
  ds.validate();
  return ds;
}

}  // namespace deas
