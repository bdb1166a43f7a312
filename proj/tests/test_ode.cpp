#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "pulsekoop/pulsekoop.hpp"

namespace pulsekoop {
namespace {

State vec2(double a, double b) {
  State x(2);
  x << a, b;
  return x;
}

// Closed-form flow of the linear test model under a pulse.
State linear_exact(const State& x0, double mu, double tau, double t) {
  State x(2);
  const double a[2] = {-1.0, -2.0};
  for (int i = 0; i < 2; ++i) {
    const double on = std::min(t, tau);
    double xi = x0[i] * std::exp(a[i] * on) + mu / -a[i] * (1.0 - std::exp(a[i] * on));
    if (t > tau) xi *= std::exp(a[i] * (t - tau));
    x[i] = xi;
  }
  return x;
}

TEST(Dopri5, LinearPulseMatchesClosedForm) {
  const auto m = ModelSpec::linear_test();
  const State x0 = vec2(-1.0, 0.5);
  for (double t : {0.3, 1.0, 2.5, 7.0}) {
    const State got = flow_at(m, x0, Pulse{1.5, 2.0}, t);
    const State want = linear_exact(x0, 1.5, 2.0, t);
    EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-9) << "t=" << t;
  }
}

TEST(Dopri5, SemigroupOfFreeFlow) {
  const auto m = ModelSpec::repressilator();
  State x0(8);
  x0 << 3, 7, 1, 12, 5, 2, 9, 4;
  const State direct = flow_at(m, x0, Pulse::zero(), 8.0);
  const State half = flow_at(m, x0, Pulse::zero(), 3.0);
  const State split = flow_at(m, half, Pulse::zero(), 5.0);
  EXPECT_LT((direct - split).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(Dopri5, PulseSplicesWithFreeMotion) {
  const auto m = ModelSpec::repressilator();
  State x0 = State::Constant(8, 2.0);
  const Pulse p{4.0, 6.0};
  const State whole = flow_at(m, x0, p, 15.0);
  const State pulsed = flow_at(m, x0, Pulse{4.0, 6.0}, 6.0);
  const State rest = flow_at(m, pulsed, Pulse::zero(), 9.0);
  EXPECT_LT((whole - rest).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(Dopri5, TighterToleranceReducesError) {
  const auto m = ModelSpec::linear_test();
  const State x0 = vec2(2.0, -3.0);
  const State want = linear_exact(x0, 0.7, 1.3, 4.0);
  double prev = 1.0;
  for (double tol : {1e-6, 1e-8, 1e-10}) {
    IntegratorConfig cfg;
    cfg.rel_tol = tol;
    cfg.abs_tol = tol * 1e-2;
    const double err = (flow_at(m, x0, Pulse{0.7, 1.3}, 4.0, cfg) - want).cwiseAbs().maxCoeff();
    EXPECT_LT(err, prev);
    EXPECT_LT(err, 100 * tol);
    prev = err;
  }
}

TEST(Dopri5, TrajectoryRecordsMesh) {
  const auto traj = integrate(ModelSpec::fitzhugh_nagumo(), vec2(0.5, 0.2), Pulse{0.1, 5.0}, 20.0);
  ASSERT_GE(traj.size(), 3u);
  EXPECT_EQ(traj.times.front(), 0.0);
  EXPECT_EQ(traj.times.back(), 20.0);
  for (std::size_t k = 1; k < traj.size(); ++k) EXPECT_GT(traj.times[k], traj.times[k - 1]);
  // The mesh restarts at the switching instant.
  bool hit = false;
  for (double t : traj.times) hit = hit || t == 5.0;
  EXPECT_TRUE(hit);
  ASSERT_TRUE(traj.input_used.has_value());
  EXPECT_EQ(*traj.input_used, (Pulse{0.1, 5.0}));
}

TEST(Dopri5, DivergenceIsReported) {
  const auto m = ModelSpec::linear_test().with_params({{"a1", 1.0}});
  try {
    flow_at(m, vec2(1.0, 0.0), Pulse::zero(), 30.0);
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Divergence);
  }
}

TEST(Pulse, Validation) {
  EXPECT_THROW((Pulse{-1.0, 1.0}).validate(), Error);
  EXPECT_THROW((Pulse{1.0, -1.0}).validate(), Error);
  EXPECT_THROW((Pulse{NAN, 1.0}).validate(), Error);
  EXPECT_NO_THROW((Pulse{0.0, 0.0}).validate());
  EXPECT_DOUBLE_EQ((Pulse{3.53, 20.0}).energy(), 70.6);
}

TEST(IntegratorConfig, RejectsLooseTolerance) {
  IntegratorConfig cfg;
  cfg.rel_tol = 1e-3;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(Schedule, PiecewiseInputMatchesSequentialPulses) {
  const auto m = ModelSpec::linear_test();
  const State x0 = vec2(0.0, 0.0);
  const std::vector<InputSegment> segs = {{0.0, 1.0}, {1.0, 3.0}, {2.0, 0.0}};
  const State got = flow_schedule(m, x0, segs, 3.0, IntegratorConfig{});
  State want = linear_exact(x0, 1.0, 1.0, 1.0);
  want = linear_exact(want, 3.0, 1.0, 1.0);
  want = linear_exact(want, 0.0, 0.0, 1.0);
  EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-9);
}

}  // namespace
}  // namespace pulsekoop
