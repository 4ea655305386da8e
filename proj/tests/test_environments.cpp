#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "metastep/environments.hpp"

using namespace metastep;

TEST(Nav2D, ClipsActionAndRewardsNegativeDistance) {
  const Transition t = nav2d_step(Vector{0.0, 0.0}, Vector{5.0, -0.05}, Vector{0.3, 0.4});
  EXPECT_DOUBLE_EQ(t.state[0], 0.1);
  EXPECT_DOUBLE_EQ(t.state[1], -0.05);
  EXPECT_DOUBLE_EQ(t.reward, -std::hypot(0.2, 0.45));
  EXPECT_FALSE(t.done);
}

TEST(Nav2D, DoneInsideGoalThreshold) {
  const Transition t = nav2d_step(Vector{0.1, 0.1}, Vector{0.005, 0.0}, Vector{0.1, 0.1});
  EXPECT_TRUE(t.done);
  EXPECT_NEAR(t.reward, -0.005, 1e-15);
  EXPECT_FALSE(t.failure);
}

TEST(Minigolf, HoleWindowByHand) {
  const MinigolfShot w = minigolf_window(1.0, 0.1);
  EXPECT_NEAR(w.deceleration, 0.7007142857142858, 1e-15);
  EXPECT_NEAR(w.v_min, 1.1838194843085543, 1e-14);
  EXPECT_NEAR(w.v_max, 2.9553080840717536, 1e-14);
}

TEST(Minigolf, OutcomesFollowTheDrawnNoise) {
  const Vector ctx{0.9, 0.1};
  int holes = 0, overshoots = 0, short_shots = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    RngStream r(17, static_cast<std::uint64_t>(trial));
    RngStream replay = r;
    const double x = 1.0 + (trial % 7);
    const double force = 0.5 + (trial % 13) * 0.4;
    const Transition t = minigolf_step(Vector{x}, Vector{force}, ctx, r);
    const double v = std::max(0.0, force * 0.81 * (1.0 + replay.normal(0.0, 0.5)));
    const double d = 5.0 / 7.0 * 0.1 * 9.81;
    const double vmin = std::sqrt(2 * d * x);
    const double vmax = std::sqrt(std::pow(0.2 - 0.02135, 2) * 9.81 / (2 * 0.02135) + vmin * vmin);
    if (v >= vmin && v <= vmax) {
      ++holes;
      EXPECT_EQ(t.reward, 0.0);
      EXPECT_TRUE(t.done);
    } else if (v > vmax) {
      ++overshoots;
      EXPECT_EQ(t.reward, -100.0);
      EXPECT_TRUE(t.done && t.failure);
    } else {
      ++short_shots;
      EXPECT_EQ(t.reward, -1.0);
      EXPECT_FALSE(t.done);
      EXPECT_NEAR(t.state[0], x - v * v / (2 * d), 1e-12);
    }
  }
  EXPECT_GT(holes, 0);
  EXPECT_GT(overshoots, 0);
  EXPECT_GT(short_shots, 0);
}

TEST(Minigolf, ForceIsClamped) {
  RngStream a(1), b(1);
  const Vector ctx{1.0, 0.1};
  const Transition t1 = minigolf_step(Vector{5.0}, Vector{-3.0}, ctx, a);
  const Transition t2 = minigolf_step(Vector{5.0}, Vector{1e-5}, ctx, b);
  EXPECT_EQ(t1.state, t2.state);
}

TEST(CartPole, EulerStepMatchesReference) {
  const Vector s1 = cartpole_dynamics(Vector{0.01, -0.02, 0.03, 0.04}, 1.0, 0.1, 0.5);
  const Vector e1{0.009600000000000001, 0.17467919574755525, 0.030799999999999998, -0.24306871796000815};
  const Vector s2 = cartpole_dynamics(Vector{0.5, 1.0, -0.2, 0.3}, -0.5, 1.5, 1.2);
  const Vector e2{0.52, 0.8888896985674619, -0.194, 0.34372269003254025};
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(s1[i], e1[i], 1e-14);
    EXPECT_NEAR(s2[i], e2[i], 1e-14);
  }
}

TEST(CartPole, FallingEndsWithZeroReward) {
  const Transition ok = cartpole_step(Vector{0, 0, 0, 0}, Vector{1.0}, Vector{0.1, 0.5});
  EXPECT_EQ(ok.reward, 1.0);
  EXPECT_FALSE(ok.done);
  const Transition fell = cartpole_step(Vector{0, 0, 0.3, 0}, Vector{1.0}, Vector{0.1, 0.5});
  EXPECT_EQ(fell.reward, 0.0);
  EXPECT_TRUE(fell.done);
  const Transition off = cartpole_step(Vector{2.45, 0, 0, 0}, Vector{1.0}, Vector{0.1, 0.5});
  EXPECT_TRUE(off.done);
}

TEST(SwingUp, CosineRewardAndTrackFailure) {
  const Transition t = swingup_step(Vector{0, 0, std::numbers::pi, 0}, Vector{-1.0}, Vector{0.5});
  EXPECT_NEAR(t.reward, std::cos(t.state[2]), 0.0);
  EXPECT_LT(t.reward, -0.99);
  const Transition f = swingup_step(Vector{2.999, 1.0, 0, 0}, Vector{1.0}, Vector{0.5});
  EXPECT_EQ(f.reward, -100.0);
  EXPECT_TRUE(f.done && f.failure);
}

TEST(Contexts, SamplesStayInTheFamilyBox) {
  RngStream r(3);
  for (Family f : {Family::Nav2D, Family::Minigolf, Family::CartPole, Family::SwingUp}) {
    const ContextBox box = family_traits(f).contexts;
    for (int i = 0; i < 1000; ++i) EXPECT_TRUE(box.contains(sample_context(f, r)));
  }
}

TEST(EnvInstance, ResetDistributions) {
  RngStream r(4);
  EnvInstance nav(Family::Nav2D, {0.1, 0.2});
  EXPECT_EQ(nav.reset(r), (Vector{0.0, 0.0}));
  EnvInstance golf(Family::Minigolf, {0.8, 0.1});
  EnvInstance swing(Family::SwingUp, {1.0});
  for (int i = 0; i < 500; ++i) {
    const double x = golf.reset(r)[0];
    EXPECT_TRUE(x >= 0.0 && x < 20.0);
    const Vector s = swing.reset(r);
    EXPECT_NEAR(s[2], std::numbers::pi, 0.05);
  }
}

TEST(EnvInstance, ValidatesContextLengthAndHorizonOverride) {
  EXPECT_THROW(EnvInstance(Family::CartPole, {1.0}), InputError);
  EnvInstance e(Family::CartPole, {1.0, 1.0}, 7);
  EXPECT_EQ(e.descriptor().horizon, 7);
  EXPECT_EQ(parse_family("minigolf"), Family::Minigolf);
  EXPECT_THROW(parse_family("pong"), InputError);
}
