#pragma once

// Policy-driven controllers for evaluate_controller().

#include <memory>
#include <random>
#include <string>

#include <Eigen/Dense>

#include "deas/envs.hpp"
#include "deas/learner.hpp"
#include "deas/policy.hpp"

namespace deas {

enum class EvalMode { Sample, Mode, BestOfN };

inline EvalMode parse_eval_mode(const std::string& s) {
  if (s == "sample") return EvalMode::Sample;
  if (s == "mode") return EvalMode::Mode;
  if (s == "best-of-n") return EvalMode::BestOfN;
  throw ConfigError("unknown eval mode '" + s + "' (sample | mode | best-of-n)");
}

inline std::string to_string(EvalMode m) {
  switch (m) {
    case EvalMode::Sample: return "sample";
    case EvalMode::Mode: return "mode";
    case EvalMode::BestOfN: return "best-of-n";
  }
  return "?";
}

inline SelectionMode parse_selection(const std::string& s) {
  if (s == "greedy") return SelectionMode::Greedy;
  if (s == "softmax") return SelectionMode::Softmax;
  throw ConfigError("unknown selection '" + s + "' (greedy | softmax)");
}

inline std::string to_string(SelectionMode m) { return m == SelectionMode::Greedy ? "greedy" : "softmax"; }

struct EvalSpec {
  EvalMode mode = EvalMode::Sample;
  int n = 10;
  SelectionMode selection = SelectionMode::Greedy;
  double temperature = 1.0;
};

/// Reshapes a stored option [H*dim] into an executable chunk [dim x H].
inline Eigen::MatrixXd option_to_chunk(const Eigen::VectorXd& option, int dim) {
  return Eigen::Map<const Eigen::MatrixXd>(option.data(), dim, option.size() / dim);
}

/// Queries the learner's policy (and critic, for best-of-N). The learner must outlive the controller.
inline ChunkController policy_controller(const Learner& learner, const EvalSpec& spec) {
  const int dim = learner.action_space().dim;
  return [&learner, spec, dim](const Eigen::VectorXd& obs, std::mt19937_64& rng) -> Eigen::MatrixXd {
    const SequencePolicy& pi = learner.policy();
    switch (spec.mode) {
      case EvalMode::Sample: return option_to_chunk(pi.sample(obs, rng), dim);
      case EvalMode::Mode: return option_to_chunk(pi.mode(obs), dim);
      case EvalMode::BestOfN:
        return option_to_chunk(best_of_n(pi, learner.critic(), obs, spec.n, spec.selection, spec.temperature, rng).action,
                               dim);
    }
    return {};
  };
}

template <Environment Env>
EvalStats evaluate_policy(const Env& env, const Learner& learner, const EvalSpec& spec, int n_episodes,
                          std::uint64_t seed, int threads = 1) {
  require_shape(env.obs_dim() == learner.obs_dim(), "checkpoint observation size does not match the environment");
  require_shape(env.action_space() == learner.action_space(), "checkpoint action space does not match the environment");
  return evaluate_controller(env, policy_controller(learner, spec), n_episodes, seed, threads);
}

}  // namespace deas
