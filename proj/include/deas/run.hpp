#pragma once

// Experiment pipeline behind the `deas` command line tool.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <variant>

#include "json.hpp"

#include "deas/dataset.hpp"
#include "deas/distributional.hpp"
#include "deas/envs.hpp"
#include "deas/evaluation.hpp"
#include "deas/learner.hpp"
#include "deas/oracle.hpp"

namespace deas {

struct ChainSpec {
  int subtasks = 2;
  int steps_per_subtask = 3;
  int n_actions = 3;
  int horizon = 60;
  bool reset_on_wrong = false;
  bool delayed = false;  // key action per subtask, judged at the end of the subtask
};

struct PointMassSpec {
  int waypoints = 2;
  int horizon = 200;
};

using EnvSpec = std::variant<ChainSpec, PointMassSpec>;

struct RunConfig {
  EnvSpec env = ChainSpec{};
  std::string dataset = "dataset.bin";
  int trajectories = 500;
  double noise = 0.3;
  LearnerConfig learner;
  long steps = 50'000;
  long eval_interval = 5'000;
  int eval_episodes = 100;
  EvalSpec eval;
  std::uint64_t seed = 0;
  std::string output_dir = "run";
  int threads = 1;

  static RunConfig from_json(const nlohmann::json& j) {
    require_config(j.is_object(), "config must be a JSON object");
    RunConfig c;
    nlohmann::json learner_keys = nlohmann::json::object();
    for (const auto& [k, v] : j.items()) {
      if (k == "env") c.env = parse_env(v);
      else if (k == "dataset") c.dataset = v.get<std::string>();
      else if (k == "trajectories") c.trajectories = v.get<int>();
      else if (k == "noise") c.noise = v.get<double>();
      else if (k == "steps") c.steps = v.get<long>();
      else if (k == "eval_interval") c.eval_interval = v.get<long>();
      else if (k == "eval_episodes") c.eval_episodes = v.get<int>();
      else if (k == "eval_mode") c.eval.mode = parse_eval_mode(v.get<std::string>());
      else if (k == "best_of_n") c.eval.n = v.get<int>();
      else if (k == "selection") c.eval.selection = parse_selection(v.get<std::string>());
      else if (k == "softmax_temperature") c.eval.temperature = v.get<double>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "output_dir") c.output_dir = v.get<std::string>();
      else if (k == "threads") c.threads = v.get<int>();
      else learner_keys[k] = v;  // everything else must be a learner key
    }
    c.learner = LearnerConfig::from_json(learner_keys);
    c.validate();
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
    try {
      return from_json(j);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
  }

  /// DEAS_OUTPUT_DIR and DEAS_THREADS override the file's values.
  void apply_environment() {
    if (const char* d = std::getenv("DEAS_OUTPUT_DIR"); d && *d) output_dir = d;
    if (const char* t = std::getenv("DEAS_THREADS"); t && *t) threads = std::max(1, std::atoi(t));
  }

  void validate() const {
    require_config(trajectories >= 0, "trajectories must be non-negative");
    require_config(noise >= 0.0 && noise <= 1.0, "noise must lie in [0, 1]");
    require_config(steps >= 0, "steps must be non-negative");
    require_config(eval_interval >= 1, "eval_interval must be >= 1");
    require_config(eval_episodes >= 1, "eval_episodes must be >= 1");
    require_config(eval.n >= 1, "best_of_n must be >= 1");
    require_config(eval.temperature > 0.0, "softmax_temperature must be positive");
    require_config(threads >= 1, "threads must be >= 1");
    learner.validate();
  }

  static EnvSpec parse_env(const nlohmann::json& j) {
    require_config(j.is_object() && j.contains("kind"), "env block needs a 'kind'");
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "chain") {
      ChainSpec s;
      for (const auto& [k, v] : j.items()) {
        if (k == "kind") continue;
        if (k == "subtasks") s.subtasks = v.get<int>();
        else if (k == "steps_per_subtask") s.steps_per_subtask = v.get<int>();
        else if (k == "n_actions") s.n_actions = v.get<int>();
        else if (k == "horizon") s.horizon = v.get<int>();
        else if (k == "reset_on_wrong") s.reset_on_wrong = v.get<bool>();
        else if (k == "delayed") s.delayed = v.get<bool>();
        else throw ConfigError("unknown env key '" + k + "' for chain");
      }
      return s;
    }
    if (kind == "pointmass") {
      PointMassSpec s;
      for (const auto& [k, v] : j.items()) {
        if (k == "kind") continue;
        if (k == "waypoints") s.waypoints = v.get<int>();
        else if (k == "horizon") s.horizon = v.get<int>();
        else throw ConfigError("unknown env key '" + k + "' for pointmass");
      }
      return s;
    }
    throw ConfigError("unknown env kind '" + kind + "' (chain | pointmass)");
  }
};

inline TabularMDP make_chain(const ChainSpec& s) {
  require_config(!(s.delayed && s.reset_on_wrong), "chain: delayed and reset_on_wrong are exclusive");
  if (s.delayed) return delayed_chain_env(s.subtasks, s.steps_per_subtask, s.n_actions, s.horizon);
  return chain_env(s.subtasks, s.steps_per_subtask, s.n_actions, s.horizon, s.reset_on_wrong);
}

/// Calls f(env) with the concrete environment named by the spec.
template <class F>
decltype(auto) with_env(const EnvSpec& spec, F&& f) {
  if (const auto* c = std::get_if<ChainSpec>(&spec)) {
    const TabularMDP mdp = make_chain(*c);
    return f(TabularEnv(mdp));
  }
  const auto& p = std::get<PointMassSpec>(spec);
  return f(PointMassTask::standard(p.waypoints, p.horizon));
}

// --- gen-data -----------------------------------------------------------------

struct GenDataReport {
  int trajectories = 0;
  double success_fraction = 0.0;
  double r_min = 0.0;
  double r_max = 0.0;

  [[nodiscard]] nlohmann::ordered_json to_json() const {
    return {{"trajectories", trajectories}, {"success_fraction", success_fraction}, {"r_min", r_min}, {"r_max", r_max}};
  }
};

inline TrajectoryDataset generate_dataset(const RunConfig& cfg, int* n_success = nullptr) {
  std::seed_seq sq{cfg.seed, std::uint64_t{0xDA7A}};
  std::mt19937_64 rng(sq);
  return with_env(cfg.env, [&](auto env) {
    return collect_play_data(std::move(env), cfg.trajectories, cfg.noise, rng, {}, n_success);
  });
}

inline GenDataReport cmd_gen_data(const RunConfig& cfg) {
  int ok = 0;
  const TrajectoryDataset ds = generate_dataset(cfg, &ok);
  const auto parent = std::filesystem::path(cfg.dataset).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  save_dataset(ds, cfg.dataset);
  GenDataReport r;
  r.trajectories = static_cast<int>(ds.trajectories.size());
  r.success_fraction = ds.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(ds.trajectories.size());
  if (ds.num_transitions() > 0) {
    const auto st = return_statistics(ds, cfg.learner.gamma1, cfg.learner.gamma2, cfg.learner.H);
    r.r_min = st.r_min;
    r.r_max = st.r_max;
  }
  return r;
}

// --- stats --------------------------------------------------------------------

inline nlohmann::ordered_json cmd_stats(const TrajectoryDataset& ds, double gamma1, double gamma2, int H) {
  const auto st = return_statistics(ds, gamma1, gamma2, H);
  std::vector<double> sorted = st.returns_to_go;
  std::sort(sorted.begin(), sorted.end());
  return {{"trajectories", ds.trajectories.size()},
          {"transitions", ds.num_transitions()},
          {"obs_dim", ds.obs_dim},
          {"action_kind", ds.action_space.is_discrete() ? "discrete" : "continuous"},
          {"r_min", st.r_min},
          {"r_max", st.r_max},
          {"return_q01", quantile_sorted(sorted, 0.01)},
          {"return_q50", quantile_sorted(sorted, 0.50)},
          {"return_q99", quantile_sorted(sorted, 0.99)}};
}

// --- train --------------------------------------------------------------------

struct IntervalRecord {
  long step = 0;
  TrainMetrics mean;  // averages over the interval (max for the mass error)
  std::optional<EvalStats> eval;
};

inline std::string metrics_header() {
  return "step,loss_v,loss_q,loss_pi,mean_q,mean_v,max_target_mass_error,eval_return,eval_success";
}

inline std::string metrics_row(const IntervalRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%ld,%.10g,%.10g,%.10g,%.10g,%.10g,%.3g,%.10g,%.10g", r.step, r.mean.loss_v,
                r.mean.loss_q, r.mean.loss_pi, r.mean.mean_q, r.mean.mean_v, r.mean.max_target_mass_error,
                r.eval ? r.eval->mean_return : std::nan(""), r.eval ? r.eval->success_rate : std::nan(""));
  return buf;
}

/// Runs `steps` training steps, calling `on_interval` every `interval` steps and at the end.
/// Learner init and batch sampling use independent streams derived from `seed`.
template <class OnInterval>
Learner train_learner(const LearnerConfig& lc, const TrajectoryDataset& ds, long steps, long interval,
                      std::uint64_t seed, OnInterval&& on_interval) {
  std::seed_seq init_seq{seed, std::uint64_t{1}};
  std::mt19937_64 init_rng(init_seq);
  std::seed_seq batch_seq{seed, std::uint64_t{2}};
  std::mt19937_64 batch_rng(batch_seq);
  Learner learner = Learner::create(lc, ds.obs_dim, ds.action_space, build_support(lc, ds), init_rng);
  const OptionSampler sampler(ds, lc.H, lc.gamma1);
  TrainMetrics acc;
  long n = 0;
  for (long step = 1; step <= steps; ++step) {
    const OptionBatch b = sampler.sample(lc.batch_size, batch_rng);
    const TrainMetrics m = learner.train_step(b, batch_rng);
    acc.loss_v += m.loss_v;
    acc.loss_q += m.loss_q;
    acc.loss_pi += m.loss_pi;
    acc.mean_q += m.mean_q;
    acc.mean_v += m.mean_v;
    acc.max_target_mass_error = std::max(acc.max_target_mass_error, m.max_target_mass_error);
    ++n;
    if (step % interval == 0 || step == steps) {
      IntervalRecord r;
      r.step = step;
      r.mean = acc;
      r.mean.step = step;
      for (double* f : {&r.mean.loss_v, &r.mean.loss_q, &r.mean.loss_pi, &r.mean.mean_q, &r.mean.mean_v}) *f /= n;
      on_interval(learner, r);
      acc = TrainMetrics{};
      n = 0;
    }
  }
  return learner;
}

inline std::string checkpoint_name(long step) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "checkpoint_%08ld.bin", step);
  return buf;
}

inline std::uint64_t eval_seed(std::uint64_t seed) { return seed * 1000003ULL + 7919ULL; }

struct TrainReport {
  std::string final_checkpoint;
  std::vector<IntervalRecord> intervals;
  bool diverged = false;
  std::string error;
};

/// Trains per the config, writing checkpoint_<step>.bin files, final.bin and
/// metrics.csv into the output directory. On a non-finite loss training stops,
/// the previously written checkpoints are left untouched, and the report says why.
inline TrainReport cmd_train(const RunConfig& cfg) {
  const TrajectoryDataset ds = load_dataset(cfg.dataset);
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);
  const fs::path out(cfg.output_dir);
  std::ofstream metrics(out / "metrics.csv", std::ios::trunc);
  metrics << metrics_header() << '\n';
  TrainReport rep;
  {
    std::seed_seq init_seq{cfg.seed, std::uint64_t{1}};
    std::mt19937_64 init_rng(init_seq);
    const Learner initial = Learner::create(cfg.learner, ds.obs_dim, ds.action_space, build_support(cfg.learner, ds), init_rng);
    save_checkpoint((out / checkpoint_name(0)).string(), initial);
    rep.final_checkpoint = (out / checkpoint_name(0)).string();
  }
  try {
    with_env(cfg.env, [&](auto env) {
      train_learner(cfg.learner, ds, cfg.steps, cfg.eval_interval, cfg.seed, [&](const Learner& l, IntervalRecord& r) {
        r.eval = evaluate_policy(env, l, cfg.eval, cfg.eval_episodes, eval_seed(cfg.seed), cfg.threads);
        metrics << metrics_row(r) << '\n';
        metrics.flush();
        const auto path = (out / checkpoint_name(r.step)).string();
        save_checkpoint(path, l);
        rep.final_checkpoint = path;
        rep.intervals.push_back(r);
      });
      return 0;
    });
  } catch (const NonFiniteLoss& e) {
    rep.diverged = true;
    rep.error = e.what();
    return rep;
  }
  fs::copy_file(rep.final_checkpoint, out / "final.bin", fs::copy_options::overwrite_existing);
  return rep;
}

// --- eval ---------------------------------------------------------------------

inline EvalStats cmd_eval(const RunConfig& cfg, const Learner& learner, int episodes, std::uint64_t seed) {
  return with_env(cfg.env, [&](auto env) { return evaluate_policy(env, learner, cfg.eval, episodes, seed, cfg.threads); });
}

/// A checkpoint whose policy replays the chain's scripted expert: a linear
/// (no hidden layer) categorical policy with large logits on the expert option.
inline Learner scripted_checkpoint(const RunConfig& cfg) {
  const auto* spec = std::get_if<ChainSpec>(&cfg.env);
  require_config(spec != nullptr, "scripted checkpoints are only defined for chain environments");
  const TabularMDP mdp = make_chain(*spec);
  LearnerConfig lc = cfg.learner;
  lc.actor_hidden.clear();
  std::seed_seq sq{cfg.seed, std::uint64_t{1}};
  std::mt19937_64 rng(sq);
  const ActionSpace space = ActionSpace::discrete(mdp.n_actions);
  const SupportGrid grid = make_support(-static_cast<double>(mdp.n_subtasks) * mdp.horizon, 0.0, lc.atoms);
  Learner l = Learner::create(lc, mdp.n_states, space, grid, rng);
  nn::Layer& layer = l.mutable_state().policy.params().net.layers.back();
  layer.weight.setZero();
  layer.bias.setZero();
  const int n = mdp.n_actions;
  for (int s = 0; s < mdp.n_states; ++s) {
    int cur = s;
    for (int k = 0; k < lc.H; ++k) {
      layer.weight(k * n + mdp.scripted[cur], s) = 50.0;
      cur = mdp.next[cur][mdp.scripted[cur]];
    }
  }
  return l;
}

// --- oracle-check -------------------------------------------------------------

struct OracleGap {
  double mean_v_gap = 0.0;
  double max_v_gap = 0.0;
  double mean_q_gap = 0.0;
  double max_q_gap = 0.0;
  double mean_q_signed = 0.0;  // frequency-weighted mean of Q_learned - Q_oracle over dataset options
  int covered_states = 0;
  int options = 0;
};

/// Compares value estimates against the expectile oracle over dataset-covered
/// states and dataset options. `v_of(state)` and `q_of(option)` supply the estimates.
template <class VFn, class QFn>
OracleGap compare_to_oracle(const ExpectileOracle& oracle, VFn&& v_of, QFn&& q_of) {
  OracleGap g;
  for (std::size_t s = 0; s < oracle.v.size(); ++s) {
    if (!oracle.covered[s]) continue;
    const double gap = std::abs(v_of(static_cast<int>(s)) - oracle.v[s]);
    g.mean_v_gap += gap;
    g.max_v_gap = std::max(g.max_v_gap, gap);
    ++g.covered_states;
  }
  if (g.covered_states > 0) g.mean_v_gap /= g.covered_states;
  double weight = 0.0;
  for (const auto& o : oracle.options) {
    const double d = q_of(o) - oracle.q(o);
    g.mean_q_gap += std::abs(d);
    g.max_q_gap = std::max(g.max_q_gap, std::abs(d));
    g.mean_q_signed += o.count * d;
    weight += o.count;
    ++g.options;
  }
  if (g.options > 0) g.mean_q_gap /= g.options;
  if (weight > 0) g.mean_q_signed /= weight;
  return g;
}

inline OracleGap learner_oracle_gap(const Learner& l, const TabularMDP& mdp, const ExpectileOracle& oracle) {
  // Batch all queries: one column per covered state / dataset option.
  std::vector<int> states;
  for (std::size_t s = 0; s < oracle.v.size(); ++s)
    if (oracle.covered[s]) states.push_back(static_cast<int>(s));
  Eigen::MatrixXd sv(mdp.n_states, static_cast<Eigen::Index>(states.size()));
  for (std::size_t i = 0; i < states.size(); ++i) sv.col(static_cast<Eigen::Index>(i)) = mdp.observation(states[i]);
  const Eigen::VectorXd v = states.empty() ? Eigen::VectorXd() : l.v_batch(sv);
  std::vector<double> v_by_state(oracle.v.size(), 0.0);
  for (std::size_t i = 0; i < states.size(); ++i) v_by_state[static_cast<std::size_t>(states[i])] = v[static_cast<Eigen::Index>(i)];

  const int H = l.config().H;
  const auto n_opt = static_cast<Eigen::Index>(oracle.options.size());
  Eigen::MatrixXd qs(mdp.n_states, n_opt), qo(H, n_opt);
  for (Eigen::Index i = 0; i < n_opt; ++i) {
    const auto& o = oracle.options[static_cast<std::size_t>(i)];
    qs.col(i) = mdp.observation(o.state);
    const auto acts = decode_option(o.option, mdp.n_actions, H);
    for (int k = 0; k < H; ++k) qo(k, i) = acts[static_cast<std::size_t>(k)];
  }
  const Eigen::VectorXd q = n_opt == 0 ? Eigen::VectorXd() : l.q_batch(qs, qo);
  std::map<const DatasetOption*, double> q_by_opt;
  for (Eigen::Index i = 0; i < n_opt; ++i) q_by_opt[&oracle.options[static_cast<std::size_t>(i)]] = q[i];
  return compare_to_oracle(
      oracle, [&](int s) { return v_by_state[static_cast<std::size_t>(s)]; },
      [&](const DatasetOption& o) { return q_by_opt.at(&o); });
}

inline nlohmann::ordered_json oracle_tables_json(const TabularMDP& mdp, const ExpectileOracle& oracle, int H) {
  nlohmann::ordered_json v = nlohmann::ordered_json::array();
  for (std::size_t s = 0; s < oracle.v.size(); ++s)
    if (oracle.covered[s]) v.push_back({{"state", s}, {"v", oracle.v[s]}});
  nlohmann::ordered_json q = nlohmann::ordered_json::array();
  for (const auto& o : oracle.options)
    q.push_back({{"state", o.state},
                 {"option", decode_option(o.option, mdp.n_actions, H)},
                 {"next", o.next},
                 {"count", o.count},
                 {"q", oracle.q(o)}});
  return {{"H", H}, {"dropped_occurrences", oracle.dropped}, {"v", v}, {"q", q}};
}

}  // namespace deas
