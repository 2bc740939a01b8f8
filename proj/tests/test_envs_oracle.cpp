#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "deas/envs.hpp"
#include "deas/oracle.hpp"
#include "test_support.hpp"

using namespace deas;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Discounted value of following the scripted actions from s, option by option.
double scripted_option_value(const TabularMDP& m, int s, int H, double g1, double g2, int n_options = 20000) {
  double v = 0.0, disc = 1.0;
  const double boot = std::pow(g2, H);
  std::vector<int> acts(static_cast<std::size_t>(H));
  for (int i = 0; i < n_options && disc > 1e-300; ++i) {
    int x = s;
    for (int k = 0; k < H; ++k) {
      acts[static_cast<std::size_t>(k)] = m.scripted[x];
      x = m.next[x][m.scripted[x]];
    }
    const auto o = run_option(m, s, acts, g1);
    v += disc * o.rhat;
    disc *= boot;
    s = o.next;
  }
  return v;
}

TrajectoryDataset chain_data(const TabularMDP& m, int n, double noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return collect_play_data(TabularEnv(m), n, noise, rng);
}

}  // namespace

TEST(ChainEnv, SmallestChain) {
  const auto m = chain_env(1, 1, 3, 5);
  ASSERT_EQ(m.n_states, 2);
  for (int a = 0; a < 3; ++a) {
    EXPECT_EQ(m.reward[0][a], -1.0);
    EXPECT_EQ(m.reward[1][a], 0.0);
    EXPECT_EQ(m.next[1][a], 1);
  }
  EXPECT_EQ(m.next[0][0], 1);
  EXPECT_EQ(m.next[0][1], 0);
  EXPECT_TRUE(m.success(1));
  EXPECT_FALSE(m.success(0));
}

TEST(ChainEnv, ResetOnWrongDropsToSubtaskStart) {
  const auto m = chain_env(2, 3, 3, 30, true);
  // State 4 is subtask 1, progress 1; its correct action is 4 % 3 = 1.
  EXPECT_EQ(m.next[4][1], 5);
  EXPECT_EQ(m.next[4][0], 3);
  EXPECT_EQ(m.next[4][2], 3);
  EXPECT_EQ(m.completed[4], 1);
  EXPECT_EQ(m.reward[4][0], -1.0);
}

TEST(ChainEnv, RewardRuleIsEnforced) {
  auto m = chain_env(2, 2);
  m.reward[1][0] = 0.0;
  EXPECT_THROW(m.validate(), ConfigError);
  EXPECT_THROW(chain_env(0, 2), ConfigError);
}

TEST(ChainEnv, ScriptedReturnMatchesClosedForm) {
  const auto m = chain_env(3, 2, 3, 20);
  const auto st = evaluate_scripted(TabularEnv(m), 3, 0);
  // Two steps in each subtask at rewards -3, -2, -1, then zero at the goal.
  EXPECT_EQ(st.mean_return, -12.0);
  EXPECT_EQ(st.success_rate, 1.0);
}

TEST(ChainEnv, RandomPolicyRarelySucceedsOnHardChain) {
  const auto m = chain_env(3, 3, 3, 36, true);
  const auto r = evaluate_controller(TabularEnv(m), random_controller(ActionSpace::discrete(3)), 2000, 1);
  EXPECT_LT(r.success_rate, 0.05);
  EXPECT_LT(r.mean_return, evaluate_scripted(TabularEnv(m), 1, 0).mean_return);
}

TEST(ChainEnv, EpisodeReturnTelescopesOverCompletedSubtasks) {
  const auto m = chain_env(3, 3, 3, 40);
  const auto ds = chain_data(m, 50, 0.5, 2);
  for (const auto& tr : ds.trajectories) {
    double expect = 0.0;
    for (int t = 0; t < tr.length(); ++t) {
      const int s = m.state_of(tr.states.col(t));
      expect -= m.n_subtasks - m.completed[static_cast<std::size_t>(s)];
      // Progress never regresses without resets, so rewards never decrease.
      if (t > 0) {
        EXPECT_GE(tr.rewards[t], tr.rewards[t - 1]);
      }
    }
    EXPECT_EQ(tr.rewards.sum(), expect);
  }
}

TEST(DelayedChain, ShapeAndScriptedReturn) {
  const auto m = delayed_chain_env(3, 4);
  EXPECT_EQ(m.n_states, 3 * 7 + 1);
  EXPECT_EQ(m.horizon, 48);
  const auto st = evaluate_scripted(TabularEnv(m), 2, 0);
  EXPECT_EQ(st.success_rate, 1.0);
  EXPECT_EQ(st.mean_return, -4.0 * (3 + 2 + 1));
}

TEST(DelayedChain, WrongKeyIsOnlyPunishedAtTheEndOfTheCorridor) {
  const auto m = delayed_chain_env(2, 3, 3, 40);
  // subtask 1 key cell is 5, its correct action is 3 % 3 = 0
  int s = m.next[5][1];
  EXPECT_NE(s, 5);
  EXPECT_EQ(m.completed[static_cast<std::size_t>(s)], 1);
  for (int a = 0; a < 3; ++a) EXPECT_EQ(m.next[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)],
                                        m.next[static_cast<std::size_t>(s)][0]);
  s = m.next[static_cast<std::size_t>(s)][2];
  EXPECT_EQ(m.next[static_cast<std::size_t>(s)][1], 5);
  s = m.next[5][0];
  s = m.next[static_cast<std::size_t>(s)][1];
  EXPECT_EQ(m.next[static_cast<std::size_t>(s)][2], m.n_states - 1);
}

TEST(DelayedChain, OneStepValuesSeparateOnlyAtTheKey) {
  const auto m = delayed_chain_env(2, 3, 3, 40);
  const auto q = oracle_smdp_q(m, 1, 0.9, 0.9);
  for (int k = 0; k < 2; ++k) {
    const int key = k * 5;
    const int good = m.scripted[static_cast<std::size_t>(key)];
    for (int a = 0; a < 3; ++a)
      if (a != good) {
        EXPECT_LT(q.q(key, a), q.q(key, good) - 0.1);
      }
    for (int c = key + 1; c < key + 5; ++c) EXPECT_NEAR(q.q(c, 0), q.q(c, 2), 1e-12);
  }
}

TEST(DelayedChain, SingleCellSubtasksStallOnWrongKeys) {
  const auto m = delayed_chain_env(2, 1, 2);
  EXPECT_EQ(m.n_states, 3);
  EXPECT_EQ(m.next[0][0], 1);
  EXPECT_EQ(m.next[0][1], 0);
  EXPECT_EQ(m.next[1][1], 2);
  EXPECT_EQ(m.next[1][0], 1);
  EXPECT_THROW(delayed_chain_env(0, 2), ConfigError);
}

TEST(PlayData, NoiseExtremes) {
  const auto m = chain_env(3, 3, 3, 36, true);
  int ok = 0;
  std::mt19937_64 rng(3);
  const auto clean = collect_play_data(TabularEnv(m), 50, 0.0, rng, {}, &ok);
  EXPECT_EQ(ok, 50);
  for (const auto& tr : clean.trajectories)
    for (int t = 0; t < tr.length(); ++t)
      EXPECT_EQ(tr.actions(0, t), m.scripted[static_cast<std::size_t>(m.state_of(tr.states.col(t)))]);
  collect_play_data(TabularEnv(m), 2000, 1.0, rng, {}, &ok);
  EXPECT_LT(ok / 2000.0, 0.05);
}

TEST(PlayData, ModerateNoiseGivesMixedSuccessAndIsReproducible) {
  // Stalling chain with little slack in the horizon: 9 correct actions needed in 12 steps.
  const auto m = chain_env(3, 3, 3, 12);
  int ok = 0;
  std::mt19937_64 a(4), b(4);
  const auto d1 = collect_play_data(TabularEnv(m), 200, 0.3, a, {}, &ok);
  const auto d2 = collect_play_data(TabularEnv(m), 200, 0.3, b);
  EXPECT_GT(ok, 0);
  EXPECT_LT(ok, 200);
  ASSERT_EQ(d1.trajectories.size(), d2.trajectories.size());
  for (std::size_t i = 0; i < d1.trajectories.size(); ++i) {
    EXPECT_EQ(d1.trajectories[i].actions, d2.trajectories[i].actions);
    EXPECT_EQ(d1.trajectories[i].rewards, d2.trajectories[i].rewards);
  }
  EXPECT_NO_THROW(d1.validate());
}

TEST(PointMass, ScriptedControllerVisitsEveryWaypoint) {
  for (int n = 1; n <= 4; ++n) {
    const auto task = PointMassTask::standard(n, 200);
    const auto st = evaluate_scripted(task, 1, 0);
    EXPECT_EQ(st.success_rate, 1.0) << n;
    EXPECT_LT(st.mean_return, 0.0);
    EXPECT_GE(st.mean_return, -200.0 * n);
  }
}

TEST(PointMass, StaysInBoxAndRewardsCountRemainingWaypoints) {
  auto task = PointMassTask::standard(2, 300);
  task.reset();
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int t = 0; t < 300; ++t) {
    const double a[2] = {u(rng), u(rng)};
    const int before = task.reached();
    EXPECT_EQ(task.step(a), -(2.0 - before));
    const auto o = task.observation();
    EXPECT_LE(o.head(2).cwiseAbs().maxCoeff(), 1.0);
    EXPECT_EQ(o[4], task.reached() / 2.0);
  }
}

TEST(Evaluation, DeterministicAndIndependentOfThreadCount) {
  const auto m = chain_env(2, 3, 3, 30, true);
  const auto ctl = random_controller(ActionSpace::discrete(3));
  const auto a = evaluate_controller(TabularEnv(m), ctl, 64, 9, 1);
  const auto b = evaluate_controller(TabularEnv(m), ctl, 64, 9, 3);
  const auto c = evaluate_controller(TabularEnv(m), ctl, 64, 10, 1);
  EXPECT_EQ(a.mean_return, b.mean_return);
  EXPECT_EQ(a.success_rate, b.success_rate);
  EXPECT_NE(a.mean_return, c.mean_return);
}

TEST(Evaluation, ChunksRunToCompletionBeforeRequery) {
  const auto m = chain_env(1, 4, 2, 8);
  int queries = 0;
  const ChunkController ctl = [&](const VectorXd&, std::mt19937_64&) {
    ++queries;
    return MatrixXd::Zero(1, 3);
  };
  evaluate_controller(TabularEnv(m), ctl, 1, 0);
  EXPECT_EQ(queries, 3);  // 8 steps in chunks of 3
}

TEST(OptionCodes, EncodeDecodeRoundTrip) {
  for (long o = 0; o < count_options(3, 4); ++o) EXPECT_EQ(encode_option(decode_option(o, 3, 4), 3), o);
  EXPECT_EQ(count_options(3, 4), 81);
  EXPECT_THROW(count_options(10, 7), ConfigError);
}

TEST(SmdpOracle, SingleActionChainHasClosedForm) {
  const auto m = chain_env(1, 4, 1, 20);
  const double g = 0.9;
  const auto q = oracle_smdp_q(m, 1, g, g);
  for (int s = 0; s < 5; ++s)
    EXPECT_NEAR(q.values()[s], -(1.0 - std::pow(g, 4 - s)) / (1.0 - g), 1e-9) << s;
}

TEST(SmdpOracle, SingleStepOptionsMatchTextbookQIteration) {
  for (bool reset : {false, true}) {
    const auto m = chain_env(3, 2, 3, 30, reset);
    const double g = 0.95;
    MatrixXd Q = MatrixXd::Zero(m.n_states, m.n_actions);
    for (int it = 0; it < 5000; ++it) {
      MatrixXd nq(m.n_states, m.n_actions);
      for (int s = 0; s < m.n_states; ++s)
        for (int a = 0; a < m.n_actions; ++a) nq(s, a) = m.reward[s][a] + g * Q.row(m.next[s][a]).maxCoeff();
      Q = nq;
    }
    const auto t = oracle_smdp_q(m, 1, 0.123, g);  // gamma1 is irrelevant at H = 1
    EXPECT_LE((t.q - Q).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(SmdpOracle, AgreesWithScriptedRolloutsAndBoundsEveryOption) {
  const auto m = chain_env(2, 3, 3, 60);
  const int H = 2;
  const double g1 = 0.9, g2 = 0.99;
  const auto t = oracle_smdp_q(m, H, g1, g2);
  const VectorXd v = t.values();
  const double boot = g2 * g2;
  for (int s = 0; s < m.n_states; ++s) {
    EXPECT_NEAR(v[s], scripted_option_value(m, s, H, g1, g2), 1e-8) << s;
    for (long o = 0; o < t.q.cols(); ++o) {
      const auto oc = run_option(m, s, decode_option(o, 3, H), g1);
      EXPECT_NEAR(t.q(s, o), oc.rhat + boot * scripted_option_value(m, oc.next, H, g1, g2), 1e-8);
    }
  }
}

TEST(SmdpOracle, LongerOptionsNeverBeatOneStepValueWithEqualDiscounts) {
  // With gamma1 = gamma2, H-step options are a restriction of one-step control.
  const auto m = chain_env(2, 3, 3, 60, true);
  const VectorXd v1 = oracle_smdp_q(m, 1, 0.97, 0.97).values();
  for (int H : {2, 3}) {
    const VectorXd vh = oracle_smdp_q(m, H, 0.97, 0.97).values();
    EXPECT_LE((vh - v1).maxCoeff(), 1e-9);
  }
}

TEST(SampleExpectile, ClosedFormsAndFirstOrderCondition) {
  const std::vector<double> xs{-3.0, 1.0, 0.5, 2.0, -1.0};
  const std::vector<double> ws{1.0, 2.0, 1.0, 0.5, 3.0};
  double mean = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) mean += ws[i] * xs[i], wsum += ws[i];
  EXPECT_NEAR(sample_expectile(xs, ws, 0.5), mean / wsum, 1e-14);
  EXPECT_EQ(sample_expectile(xs, ws, 1.0), 2.0);
  EXPECT_EQ(sample_expectile(xs, ws, 0.0), -3.0);
  double prev = -1e300;
  for (double tau = 0.05; tau < 1.0; tau += 0.05) {
    const double v = sample_expectile(xs, ws, tau);
    double f = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) f += ws[i] * (xs[i] < v ? 1.0 - tau : tau) * (xs[i] - v);
    EXPECT_NEAR(f, 0.0, 1e-12) << tau;
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(SampleExpectile, StochasticApproximationCrossCheck) {
  const std::vector<double> xs{-5.0, -1.0, 0.0, 4.0};
  const std::vector<double> ws{0.1, 0.4, 0.3, 0.2};
  const double tau = 0.8;
  std::mt19937_64 rng(6);
  std::discrete_distribution<int> pick(ws.begin(), ws.end());
  double v = 0.0, avg = 0.0;
  const int N = 1'000'000;
  for (int i = 1; i <= N; ++i) {
    const double x = xs[static_cast<std::size_t>(pick(rng))];
    v += (2.0 / std::pow(i + 10.0, 0.7)) * (x < v ? 1.0 - tau : tau) * (x - v);
    if (i > N / 2) avg += v / (N / 2);
  }
  EXPECT_NEAR(avg, sample_expectile(xs, ws, tau), 1e-2);
}

TEST(ExpectileOracle, HalfExpectileIsBehaviourPolicyEvaluation) {
  const auto m = chain_env(2, 3, 3, 30, true);
  const auto ds = chain_data(m, 100, 0.4, 7);
  const int H = 2;
  const double g1 = 0.9, g2 = 0.95;
  const auto o = oracle_expectile_v(m, ds, H, g1, g2, 0.5);
  // Independent linear solve: V = Rbar + gamma2^H P V over covered states.
  const int n = m.n_states;
  MatrixXd A = MatrixXd::Identity(n, n);
  VectorXd b = VectorXd::Zero(n);
  std::vector<double> w(static_cast<std::size_t>(n), 0.0);
  for (const auto& op : o.options) w[static_cast<std::size_t>(op.state)] += op.count;
  for (const auto& op : o.options) {
    const double p = op.count / w[static_cast<std::size_t>(op.state)];
    b[op.state] += p * op.rhat;
    A(op.state, op.next) -= p * op.mask * std::pow(g2, H);
  }
  const VectorXd v = A.fullPivLu().solve(b);
  ASSERT_GT(o.num_covered(), 0);
  for (int s = 0; s < n; ++s)
    if (o.covered[static_cast<std::size_t>(s)]) {
      EXPECT_NEAR(o.v[static_cast<std::size_t>(s)], v[s], 1e-8) << s;
    }
}

TEST(ExpectileOracle, MonotoneInTauAndBoundedByOptimalValue) {
  const auto m = chain_env(2, 3, 3, 30, true);
  const auto ds = chain_data(m, 200, 0.5, 8);
  const VectorXd vstar = oracle_smdp_q(m, 2, 0.9, 0.95).values();
  std::vector<double> prev(static_cast<std::size_t>(m.n_states), -1e300);
  for (double tau : {0.1, 0.5, 0.7, 0.9, 0.99, 1.0}) {
    const auto o = oracle_expectile_v(m, ds, 2, 0.9, 0.95, tau);
    for (int s = 0; s < m.n_states; ++s) {
      if (!o.covered[static_cast<std::size_t>(s)]) continue;
      const double v = o.v[static_cast<std::size_t>(s)];
      EXPECT_GE(v, prev[static_cast<std::size_t>(s)] - 1e-9) << "tau=" << tau << " s=" << s;
      EXPECT_LE(v, vstar[s] + 1e-9);
      prev[static_cast<std::size_t>(s)] = v;
    }
  }
}

TEST(ExpectileOracle, ExpertOnlyDataRecoversOptimalValue) {
  const auto m = chain_env(2, 3, 3, 30, true);
  const auto ds = chain_data(m, 5, 0.0, 9);
  const VectorXd vstar = oracle_smdp_q(m, 2, 0.9, 0.95).values();
  const auto o = oracle_expectile_v(m, ds, 2, 0.9, 0.95, 0.9);
  for (int s = 0; s < m.n_states; ++s)
    if (o.covered[static_cast<std::size_t>(s)]) {
      EXPECT_NEAR(o.v[static_cast<std::size_t>(s)], vstar[s], 1e-8) << s;
    }
}

TEST(ExpectileOracle, CoveredSetIsClosedUnderBootstrapping) {
  const auto m = chain_env(3, 3, 3, 36, true);
  const auto ds = chain_data(m, 20, 0.3, 10);
  const auto o = oracle_expectile_v(m, ds, 3, 0.9, 0.99, 0.9);
  for (const auto& op : o.options) {
    EXPECT_TRUE(o.covered[static_cast<std::size_t>(op.state)]);
    if (op.mask > 0.0) {
      EXPECT_TRUE(o.covered[static_cast<std::size_t>(op.next)]);
    }
  }
  double total = 0.0;
  for (const auto& op : o.options) total += op.count;
  long occurrences = 0;
  for (const auto& tr : ds.trajectories) occurrences += tr.length() - 3 + 1;
  EXPECT_EQ(static_cast<long>(total) + o.dropped, occurrences);
}
