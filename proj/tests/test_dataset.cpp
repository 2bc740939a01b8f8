#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "deas/dataset.hpp"
#include "test_support.hpp"

using namespace deas;
using deas::testing::counting_trajectory;
using deas::testing::read_bytes;
using deas::testing::scratch_dir;

namespace {

TrajectoryDataset two_trajectory_dataset() {
  TrajectoryDataset ds;
  ds.obs_dim = 1;
  ds.action_space = ActionSpace::continuous(2);
  ds.trajectories.push_back(counting_trajectory({-2, -2, -1, -1, 0}, ds.action_space, false));
  ds.trajectories.push_back(counting_trajectory({-1, 0, 0}, ds.action_space, true, 100.0));
  return ds;
}

}  // namespace

TEST(IntraReturn, Basics) {
  const std::vector<double> zeros(4, 0.0);
  EXPECT_EQ(intra_return(zeros, 0.9), 0.0);
  const std::vector<double> one{-3.5};
  EXPECT_EQ(intra_return(one, 0.9), -3.5);
  const std::vector<double> r{-3, -3, -2, -2};
  EXPECT_NEAR(intra_return(r, 0.9), -3 - 2.7 - 1.62 - 1.458, 1e-12);
}

TEST(IntraReturn, RecursiveAndLinear) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(6), b(6), c(6);
    for (int i = 0; i < 6; ++i) {
      a[i] = n(rng);
      b[i] = n(rng);
      c[i] = 2.0 * a[i] - 0.5 * b[i];
    }
    const double g = 0.7;
    EXPECT_NEAR(intra_return(a, g), a[0] + g * intra_return(std::span<const double>(a).subspan(1), g), 1e-12);
    EXPECT_NEAR(intra_return(c, g), 2.0 * intra_return(a, g) - 0.5 * intra_return(b, g), 1e-12);
  }
}

TEST(OptionSampler, FullLengthOptionAlwaysStartsAtZero) {
  TrajectoryDataset ds;
  ds.obs_dim = 1;
  ds.action_space = ActionSpace::discrete(3);
  ds.trajectories.push_back(counting_trajectory({-1, -1, 0, 0}, ds.action_space));
  std::mt19937_64 rng(2);
  const auto b = sample_option_batch(ds, 4, 0.9, 64, rng);
  for (Eigen::Index j = 0; j < b.size(); ++j) {
    EXPECT_EQ(b.start[static_cast<std::size_t>(j)], 0);
    EXPECT_EQ(b.states(0, j), 0.0);
    EXPECT_EQ(b.next_states(0, j), 4.0);
    EXPECT_NEAR(b.returns[j], -1.0 - 0.9, 1e-15);
  }
}

TEST(OptionSampler, SameSeedSameBatches) {
  const auto ds = two_trajectory_dataset();
  const OptionSampler s(ds, 2, 0.9);
  std::mt19937_64 r1(3), r2(3);
  for (int k = 0; k < 5; ++k) {
    const auto a = s.sample(32, r1), b = s.sample(32, r2);
    EXPECT_EQ(a.states, b.states);
    EXPECT_EQ(a.actions, b.actions);
    EXPECT_EQ(a.returns, b.returns);
    EXPECT_EQ(a.start, b.start);
  }
}

TEST(OptionSampler, StartsAreUniformOverValidPositions) {
  TrajectoryDataset ds;
  ds.obs_dim = 1;
  ds.action_space = ActionSpace::discrete(2);
  ds.trajectories.push_back(counting_trajectory(std::vector<double>(12, -1.0), ds.action_space));
  // H = 3 on T = 12 leaves 10 valid starts.
  const OptionSampler s(ds, 3, 0.9);
  ASSERT_EQ(s.num_positions(), 10);
  std::mt19937_64 rng(4);
  std::vector<int> hist(10, 0);
  const int N = 100000;
  for (int k = 0; k < N / 1000; ++k) {
    const auto b = s.sample(1000, rng);
    for (int t : b.start) {
      ASSERT_GE(t, 0);
      ASSERT_LE(t, 9);
      ++hist[static_cast<std::size_t>(t)];
    }
  }
  const double p = 0.1, mean = N * p, sd = std::sqrt(N * p * (1 - p));
  for (int c : hist) EXPECT_LE(std::abs(c - mean), 3.0 * sd);
}

TEST(OptionSampler, OptionsAreContiguousSlicesWithinOneTrajectory) {
  const auto ds = two_trajectory_dataset();
  const OptionSampler s(ds, 3, 0.5);
  std::mt19937_64 rng(5);
  const auto b = s.sample(500, rng);
  for (Eigen::Index j = 0; j < b.size(); ++j) {
    const int ti = b.trajectory[static_cast<std::size_t>(j)], t = b.start[static_cast<std::size_t>(j)];
    const auto& tr = ds.trajectories[static_cast<std::size_t>(ti)];
    ASSERT_LE(t + 3, tr.length());
    EXPECT_EQ(b.states.col(j), tr.states.col(t));
    EXPECT_EQ(b.next_states.col(j), tr.states.col(t + 3));
    for (int k = 0; k < 3; ++k) EXPECT_EQ(b.actions.col(j).segment(2 * k, 2), tr.actions.col(t + k));
    const std::vector<double> r(tr.rewards.data() + t, tr.rewards.data() + t + 3);
    EXPECT_DOUBLE_EQ(b.returns[j], r[0] + 0.5 * r[1] + 0.25 * r[2]);
    // Mask drops only on the final option of a terminal trajectory.
    EXPECT_EQ(b.mask[j], (tr.terminal && t + 3 == tr.length()) ? 0.0 : 1.0);
  }
}

TEST(OptionSampler, OptionLongerThanShortestTrajectoryIsAnError) {
  const auto ds = two_trajectory_dataset();
  EXPECT_THROW(OptionSampler(ds, 4, 0.9), ConfigError);
  EXPECT_NO_THROW(OptionSampler(ds, 3, 0.9));
}

TEST(ReturnStatistics, ConstantRewards) {
  TrajectoryDataset ds;
  ds.obs_dim = 1;
  ds.action_space = ActionSpace::discrete(2);
  ds.trajectories.push_back(counting_trajectory(std::vector<double>(5, -1.0), ds.action_space));
  const auto st = return_statistics(ds, 0.9, 0.99, 2);
  EXPECT_EQ(st.r_min, -1.0);
  EXPECT_EQ(st.r_max, -1.0);
}

TEST(ReturnStatistics, EqualDiscountsGiveStandardReturns) {
  TrajectoryDataset ds;
  ds.obs_dim = 1;
  ds.action_space = ActionSpace::discrete(2);
  const std::vector<double> r{-2, 0.5, -1, 3, -4, 1, 0};
  ds.trajectories.push_back(counting_trajectory(r, ds.action_space));
  for (int H : {1, 2, 3}) {
    const auto st = return_statistics(ds, 0.8, 0.8, H);
    for (std::size_t t = 0; t < r.size(); ++t) {
      double g = 0.0;
      for (std::size_t k = t; k < r.size(); ++k) g += std::pow(0.8, static_cast<double>(k - t)) * r[k];
      EXPECT_NEAR(st.returns_to_go[t], g, 1e-12) << "H=" << H << " t=" << t;
    }
  }
}

TEST(ReturnStatistics, BackwardRecursionExample) {
  TrajectoryDataset ds;
  ds.obs_dim = 1;
  ds.action_space = ActionSpace::discrete(2);
  ds.trajectories.push_back(counting_trajectory({0, -1, -2}, ds.action_space));
  const auto st = return_statistics(ds, 0.123, 0.5, 1);
  // G2 = -2, G1 = -1 + 0.5 G2, G0 = 0 + 0.5 G1.
  ASSERT_EQ(st.returns_to_go.size(), 3u);
  EXPECT_DOUBLE_EQ(st.returns_to_go[2], -2.0);
  EXPECT_DOUBLE_EQ(st.returns_to_go[1], -2.0);
  EXPECT_DOUBLE_EQ(st.returns_to_go[0], -1.0);
  EXPECT_EQ(st.r_min, -2.0);
  EXPECT_EQ(st.r_max, 0.0);
}

TEST(ReturnStatistics, EmptyDatasetIsAnError) {
  TrajectoryDataset ds;
  ds.obs_dim = 1;
  ds.action_space = ActionSpace::discrete(2);
  EXPECT_THROW(return_statistics(ds, 0.9, 0.9, 1), ConfigError);
}

TEST(DatasetFile, RoundTripIsLosslessAndByteStable) {
  const auto ds = two_trajectory_dataset();
  const auto dir = scratch_dir("dataset_rt");
  const auto a = (dir / "a.bin").string(), b = (dir / "b.bin").string();
  save_dataset(ds, a);
  const auto back = load_dataset(a);
  ASSERT_EQ(back.trajectories.size(), 2u);
  EXPECT_EQ(back.obs_dim, ds.obs_dim);
  EXPECT_EQ(back.action_space, ds.action_space);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.trajectories[i].states, ds.trajectories[i].states);
    EXPECT_EQ(back.trajectories[i].actions, ds.trajectories[i].actions);
    EXPECT_EQ(back.trajectories[i].rewards, ds.trajectories[i].rewards);
    EXPECT_EQ(back.trajectories[i].terminal, ds.trajectories[i].terminal);
  }
  save_dataset(back, b);
  EXPECT_EQ(read_bytes(a), read_bytes(b));
}

TEST(DatasetFile, EmptyDatasetLoads) {
  TrajectoryDataset ds;
  ds.obs_dim = 4;
  ds.action_space = ActionSpace::discrete(3);
  const auto path = (scratch_dir("dataset_empty") / "e.bin").string();
  save_dataset(ds, path);
  const auto back = load_dataset(path);
  EXPECT_TRUE(back.empty());
  EXPECT_EQ(back.obs_dim, 4);
}

TEST(DatasetFile, HeaderPayloadMismatchIsShapeError) {
  const auto ds = two_trajectory_dataset();
  const auto path = (scratch_dir("dataset_bad") / "d.bin").string();
  save_dataset(ds, path);
  std::string bytes = read_bytes(path);
  // obs_dim lives after magic (8), version (4) and action kind (1).
  bytes[13] = 3;
  std::ofstream(path, std::ios::binary) << bytes;
  EXPECT_THROW(load_dataset(path), ShapeError);
}

TEST(DatasetFile, MalformedFilesAreRejected) {
  const auto dir = scratch_dir("dataset_malformed");
  const auto path = (dir / "m.bin").string();
  std::ofstream(path, std::ios::binary) << "NOTADATASET";
  EXPECT_THROW(load_dataset(path), FormatError);
  const auto ds = two_trajectory_dataset();
  const auto good = (dir / "g.bin").string();
  save_dataset(ds, good);
  const std::string bytes = read_bytes(good);
  std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() - 16);
  EXPECT_THROW(load_dataset(path), FormatError);
  std::ofstream(path, std::ios::binary) << bytes << "xx";
  EXPECT_THROW(load_dataset(path), ShapeError);
}

TEST(DatasetValidate, CatchesInconsistentTrajectories) {
  auto ds = two_trajectory_dataset();
  ds.trajectories[0].rewards[1] = std::nan("");
  EXPECT_THROW(ds.validate(), ShapeError);
  ds = two_trajectory_dataset();
  ds.trajectories[1].states.conservativeResize(1, 3);
  EXPECT_THROW(ds.validate(), ShapeError);
}
