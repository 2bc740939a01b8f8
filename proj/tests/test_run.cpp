#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "deas/run.hpp"
#include "test_support.hpp"

using namespace deas;
using deas::testing::read_bytes;
using deas::testing::scratch_dir;
namespace fs = std::filesystem;

namespace {

nlohmann::json small_run_json(const fs::path& dir) {
  return {{"env", {{"kind", "chain"}, {"subtasks", 2}, {"steps_per_subtask", 2}, {"n_actions", 3}, {"horizon", 20}}},
          {"dataset", (dir / "data.bin").string()},
          {"trajectories", 30},
          {"noise", 0.3},
          {"H", 2},
          {"batch_size", 16},
          {"value_hidden", {8}},
          {"critic_hidden", {8}},
          {"actor_hidden", {8}},
          {"atoms", 11},
          {"steps", 20},
          {"eval_interval", 10},
          {"eval_episodes", 4},
          {"seed", 5},
          {"output_dir", (dir / "run").string()}};
}

}  // namespace

TEST(RunConfig, ParsesRunAndLearnerKeys) {
  const auto c = RunConfig::from_json(small_run_json("/tmp/x"));
  const auto& env = std::get<ChainSpec>(c.env);
  EXPECT_EQ(env.subtasks, 2);
  EXPECT_EQ(env.horizon, 20);
  EXPECT_EQ(c.trajectories, 30);
  EXPECT_EQ(c.learner.H, 2);
  EXPECT_EQ(c.learner.value_hidden, std::vector<int>{8});
  EXPECT_EQ(c.steps, 20);
  EXPECT_EQ(c.seed, 5u);
  auto pm = RunConfig::from_json({{"env", {{"kind", "pointmass"}, {"waypoints", 3}}}, {"eval_mode", "best-of-n"},
                                  {"best_of_n", 5}, {"selection", "softmax"}});
  EXPECT_EQ(std::get<PointMassSpec>(pm.env).waypoints, 3);
  EXPECT_EQ(pm.eval.mode, EvalMode::BestOfN);
  EXPECT_EQ(pm.eval.n, 5);
  EXPECT_EQ(pm.eval.selection, SelectionMode::Softmax);
}

TEST(RunConfig, RejectsUnknownAndInvalidValues) {
  auto j = small_run_json("/tmp/x");
  j["learning_rat"] = 1e-3;
  EXPECT_THROW(RunConfig::from_json(j), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"env", {{"kind", "maze"}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"env", {{"kind", "chain"}, {"subtask", 2}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"noise", 1.5}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"eval_mode", "argmax"}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json(nlohmann::json::array()), ConfigError);
  EXPECT_THROW(RunConfig::load("/nonexistent/config.json"), ConfigError);
  const auto bad = scratch_dir("run_cfg") / "bad.json";
  std::ofstream(bad) << "{ \"steps\": ";
  EXPECT_THROW(RunConfig::load(bad.string()), ConfigError);
}

TEST(RunConfig, DelayedChainIsExclusiveWithResets) {
  auto j = small_run_json("/tmp/x");
  j["env"]["delayed"] = true;
  const auto c = RunConfig::from_json(j);
  EXPECT_TRUE(std::get<ChainSpec>(c.env).delayed);
  EXPECT_EQ(make_chain(std::get<ChainSpec>(c.env)).n_states, 2 * 3 + 1);
  j["env"]["reset_on_wrong"] = true;
  EXPECT_THROW(make_chain(std::get<ChainSpec>(RunConfig::from_json(j).env)), ConfigError);
}

TEST(RunConfig, EnvironmentOverridesOutputDirAndThreads) {
  auto c = RunConfig::from_json(small_run_json("/tmp/x"));
  ::setenv("DEAS_OUTPUT_DIR", "/tmp/override", 1);
  ::setenv("DEAS_THREADS", "3", 1);
  c.apply_environment();
  ::unsetenv("DEAS_OUTPUT_DIR");
  ::unsetenv("DEAS_THREADS");
  EXPECT_EQ(c.output_dir, "/tmp/override");
  EXPECT_EQ(c.threads, 3);
}

TEST(GenData, SameSeedIsByteIdenticalAndReportsSuccess) {
  const auto dir = scratch_dir("run_gen");
  auto c = RunConfig::from_json(small_run_json(dir));
  const auto r1 = cmd_gen_data(c);
  const auto a = read_bytes(c.dataset);
  const auto r2 = cmd_gen_data(c);
  EXPECT_EQ(read_bytes(c.dataset), a);
  EXPECT_EQ(r1.trajectories, 30);
  EXPECT_EQ(r1.success_fraction, r2.success_fraction);
  EXPECT_GE(r1.r_min, -2.0);
  EXPECT_LE(r1.r_max, 0.0);
  c.seed = 6;
  cmd_gen_data(c);
  EXPECT_NE(read_bytes(c.dataset), a);
}

TEST(Stats, ReportsCountsAndQuantiles) {
  auto c = RunConfig::from_json(small_run_json(scratch_dir("run_stats")));
  c.trajectories = 10;
  const auto ds = generate_dataset(c);
  const auto j = cmd_stats(ds, 0.9, 0.99, 2);
  EXPECT_EQ(j.at("trajectories").get<int>(), 10);
  EXPECT_EQ(j.at("transitions").get<int>(), 200);
  EXPECT_LE(j.at("return_q01").get<double>(), j.at("return_q50").get<double>());
  EXPECT_LE(j.at("return_q50").get<double>(), j.at("return_q99").get<double>());
}

TEST(Train, ZeroStepsWritesOnlyTheInitialCheckpoint) {
  const auto dir = scratch_dir("run_zero");
  auto c = RunConfig::from_json(small_run_json(dir));
  c.steps = 0;
  cmd_gen_data(c);
  const auto rep = cmd_train(c);
  EXPECT_FALSE(rep.diverged);
  EXPECT_TRUE(rep.intervals.empty());
  EXPECT_TRUE(fs::exists(fs::path(c.output_dir) / "checkpoint_00000000.bin"));
  EXPECT_EQ(read_bytes((fs::path(c.output_dir) / "final.bin").string()),
            read_bytes((fs::path(c.output_dir) / "checkpoint_00000000.bin").string()));
  EXPECT_EQ(load_checkpoint((fs::path(c.output_dir) / "final.bin").string()).state().step, 0);
}

TEST(Train, RerunIsByteIdentical) {
  const auto dir = scratch_dir("run_rerun");
  auto c = RunConfig::from_json(small_run_json(dir));
  cmd_gen_data(c);
  const auto r1 = cmd_train(c);
  ASSERT_EQ(r1.intervals.size(), 2u);
  const fs::path out(c.output_dir);
  const auto metrics = read_bytes((out / "metrics.csv").string());
  const auto ck = read_bytes((out / "checkpoint_00000020.bin").string());
  cmd_train(c);
  EXPECT_EQ(read_bytes((out / "metrics.csv").string()), metrics);
  EXPECT_EQ(read_bytes((out / "checkpoint_00000020.bin").string()), ck);
  EXPECT_EQ(read_bytes((out / "final.bin").string()), ck);
  // header plus one row per interval
  EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 3);
  EXPECT_EQ(metrics.substr(0, metrics.find('\n')), metrics_header());
}

TEST(Train, DivergenceKeepsLastGoodCheckpoint) {
  const auto dir = scratch_dir("run_diverge");
  auto j = small_run_json(dir);
  j["learning_rate"] = 1e300;
  auto c = RunConfig::from_json(j);
  cmd_gen_data(c);
  const auto rep = cmd_train(c);
  ASSERT_TRUE(rep.diverged);
  EXPECT_NE(rep.error.find("non-finite"), std::string::npos);
  EXPECT_TRUE(fs::exists(rep.final_checkpoint));
  EXPECT_NO_THROW(load_checkpoint(rep.final_checkpoint));
  EXPECT_FALSE(fs::exists(fs::path(c.output_dir) / "final.bin"));
}

TEST(Eval, ScriptedCheckpointSolvesTheChain) {
  auto c = RunConfig::from_json(small_run_json(scratch_dir("run_scripted")));
  c.eval.mode = EvalMode::Mode;
  const auto l = scripted_checkpoint(c);
  const auto st = cmd_eval(c, l, 10, 1);
  EXPECT_EQ(st.success_rate, 1.0);
  EXPECT_EQ(st.mean_return, -6.0);  // two steps at -2, two at -1
  c.env = PointMassSpec{};
  EXPECT_THROW(scripted_checkpoint(c), ConfigError);
}

TEST(Eval, CheckpointEnvironmentMismatchIsAShapeError) {
  auto c = RunConfig::from_json(small_run_json(scratch_dir("run_mismatch")));
  const auto l = scripted_checkpoint(c);
  c.env = ChainSpec{3, 2, 3, 20, false};
  EXPECT_THROW(cmd_eval(c, l, 2, 1), ShapeError);
}

TEST(Eval, BestOfOneMatchesPlainSampling) {
  const auto dir = scratch_dir("run_bo1");
  auto c = RunConfig::from_json(small_run_json(dir));
  cmd_gen_data(c);
  cmd_train(c);
  const auto l = load_checkpoint((fs::path(c.output_dir) / "final.bin").string());
  c.eval.mode = EvalMode::Sample;
  const auto a = cmd_eval(c, l, 20, 3);
  c.eval.mode = EvalMode::BestOfN;
  c.eval.n = 1;
  const auto b = cmd_eval(c, l, 20, 3);
  EXPECT_EQ(a.mean_return, b.mean_return);
  EXPECT_EQ(a.success_rate, b.success_rate);
}

TEST(Pointmass, GenerateTrainAndEvaluate) {
  const auto dir = scratch_dir("run_pm");
  auto j = small_run_json(dir);
  j["env"] = {{"kind", "pointmass"}, {"waypoints", 2}, {"horizon", 40}};
  j["H"] = 4;
  j["trajectories"] = 5;
  auto c = RunConfig::from_json(j);
  cmd_gen_data(c);
  const auto rep = cmd_train(c);
  EXPECT_FALSE(rep.diverged);
  const auto l = load_checkpoint(rep.final_checkpoint);
  EXPECT_EQ(l.action_space(), ActionSpace::continuous(2));
  const auto st = cmd_eval(c, l, 2, 0);
  EXPECT_EQ(st.episodes, 2);
  EXPECT_TRUE(std::isfinite(st.mean_return));
}

TEST(OracleGap, OracleAgainstItselfIsZero) {
  auto c = RunConfig::from_json(small_run_json(scratch_dir("run_gap")));
  const auto ds = generate_dataset(c);
  const auto mdp = make_chain(std::get<ChainSpec>(c.env));
  const auto o = oracle_expectile_v(mdp, ds, 2, 0.9, 0.99, 0.9);
  const auto g = compare_to_oracle(
      o, [&](int s) { return o.v[static_cast<std::size_t>(s)]; }, [&](const DatasetOption& d) { return o.q(d); });
  EXPECT_EQ(g.mean_v_gap, 0.0);
  EXPECT_EQ(g.max_q_gap, 0.0);
  EXPECT_EQ(g.covered_states, o.num_covered());
  const auto shifted = compare_to_oracle(
      o, [&](int s) { return o.v[static_cast<std::size_t>(s)] + 1.0; },
      [&](const DatasetOption& d) { return o.q(d) - 0.5; });
  EXPECT_DOUBLE_EQ(shifted.mean_v_gap, 1.0);
  EXPECT_DOUBLE_EQ(shifted.mean_q_signed, -0.5);
}

TEST(OracleGap, UntrainedLearnerIsFarFromTheOracle) {
  auto c = RunConfig::from_json(small_run_json(scratch_dir("run_gap2")));
  const auto ds = generate_dataset(c);
  const auto mdp = make_chain(std::get<ChainSpec>(c.env));
  const auto o = oracle_expectile_v(mdp, ds, 2, c.learner.gamma1, c.learner.gamma2, c.learner.expectile);
  std::mt19937_64 rng(1);
  const auto l = Learner::create(c.learner, ds.obs_dim, ds.action_space, build_support(c.learner, ds), rng);
  const auto g = learner_oracle_gap(l, mdp, o);
  EXPECT_GT(g.mean_v_gap, 1.0);
  EXPECT_EQ(g.options, static_cast<int>(o.options.size()));
  const auto tables = oracle_tables_json(mdp, o, 2);
  EXPECT_EQ(tables.at("q").size(), o.options.size());
}
