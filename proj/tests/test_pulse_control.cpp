#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "pulsekoop/pulsekoop.hpp"

namespace pulsekoop {
namespace {

State vec2(double a, double b) {
  State x(2);
  x << a, b;
  return x;
}

double r_linear(double x1, double mu, double tau) { return x1 * std::exp(-tau) + mu * (1.0 - std::exp(-tau)); }

Target linear_target() { return make_target(ModelSpec::linear_test(), vec2(1, 1)); }

Target repressilator_target() {
  State hi(8), lo(8);
  hi << 20, 1, 20, 1, 20, 1, 20, 1;
  lo << 1, 20, 1, 20, 1, 20, 1, 20;
  return make_target(ModelSpec::repressilator(), hi, {lo});
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::InvalidArgument;
}

TEST(PulseR, LinearClosedForm) {
  const auto t = linear_target();
  EXPECT_NEAR(r(t, vec2(-1, 0), 1.0, std::log(2.0)).value, 0.0, 1e-9);
  for (auto [x1, mu, tau] : {std::tuple{-1.0, 0.3, 2.0}, {0.5, 2.0, 0.7}, {-3.0, 4.0, 5.0}}) {
    const double want = r_linear(x1, mu, tau);
    EXPECT_NEAR(r(t, vec2(x1, 0.4), mu, tau).value, want, 1e-6 * std::abs(want) + 1e-9);
  }
}

TEST(PulseR, ZeroDurationIsS1) {
  const auto t = repressilator_target();
  State x = t.spectrum.x_star;
  x[2] -= 3.0;
  EXPECT_EQ(r(t, x, 5.0, 0.0).value, s1(t, x).value);
}

TEST(PulseR, GridMatchesClosedForm) {
  const auto t = linear_target();
  const auto grid = r_grid(t.model, t.spectrum, vec2(-1, 2), {0.0, 1.0, 2.5}, {0.0, 0.5, 3.0}, t.cfg);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(grid(i, 0), grid(0, 0));
    for (std::size_t j = 0; j < 3; ++j) {
      const double want = r_linear(-1.0, grid.mu_axis[i], grid.tau_axis[j]);
      EXPECT_NEAR(grid(i, j), want, 1e-6 * std::max(1.0, std::abs(want)));
    }
  }
}

TEST(PulseR, GridRejectsBadAxis) {
  const auto t = linear_target();
  EXPECT_EQ(kind_of([&] { r_grid(t.model, t.spectrum, vec2(-1, 0), {1.0, 0.5}, {0.0}, t.cfg); }),
            ErrorKind::InvalidArgument);
}

TEST(PulseR, RepressilatorGridIsMonotone) {
  const auto t = repressilator_target();
  const State xb = t.cfg.other_equilibria.front();
  const auto grid = r_grid(t.model, t.spectrum, xb, {3.0, 3.5, 4.0}, {10.0, 15.0, 20.0, 25.0}, t.cfg);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const double v = grid(i, j);
      if (std::isnan(v)) continue;
      if (i > 0 && !std::isnan(grid(i - 1, j))) {
        EXPECT_GE(v, grid(i - 1, j));
      }
      if (j > 0 && !std::isnan(grid(i, j - 1)) && grid(i, j - 1) <= 0.0) {
        EXPECT_GE(v, grid(i, j - 1));
      }
    }
}

TEST(LevelSet, LinearZeroLevel) {
  const auto t = linear_target();
  const std::vector<double> mus{0.5, 1.0, 2.0, 4.0};
  const auto ls = level_set(t.model, t.spectrum, vec2(-1, 0), 0.0, mus, {0.0, 5.0}, 1e-9, t.cfg);
  ASSERT_EQ(ls.points.size(), mus.size());
  for (const auto& p : ls.points) {
    const double want = std::log(1.0 + 1.0 / p.mu);
    EXPECT_NEAR(p.tau, want, 1e-6 * want);
    EXPECT_LE(p.r, 0.0);
  }
}

TEST(LevelSet, UnreachableLevel) {
  const auto t = linear_target();
  EXPECT_EQ(kind_of([&] { level_set(t.model, t.spectrum, vec2(-1, 0), 5.0, {0.5, 1.0}, {0.0, 20.0}, 1e-6, t.cfg); }),
            ErrorKind::NoBracket);
}

TEST(LevelSet, NegativeLevelNeedsLowerStart) {
  const auto t = linear_target();
  EXPECT_EQ(kind_of([&] { level_set(t.model, t.spectrum, vec2(-0.1, 0), -0.5, {1.0}, {0.0, 5.0}, 1e-6, t.cfg); }),
            ErrorKind::PreconditionViolated);
}

TEST(LevelSet, RepressilatorLevelDecreasesAndReplays) {
  const auto t = repressilator_target();
  const State xb = t.cfg.other_equilibria.front();
  const double tol = 1e-6;
  const auto ls = level_set(t.model, t.spectrum, xb, -0.01, {3.0, 4.0, 5.0, 6.5, 8.0}, {0.0, 50.0}, tol, t.cfg);
  ASSERT_EQ(ls.points.size(), 5u);
  for (std::size_t k = 1; k < ls.points.size(); ++k) EXPECT_LT(ls.points[k].tau, ls.points[k - 1].tau);
  for (const auto& p : ls.points) {
    // Replay: the level lies between the returned point and the far bracket end.
    const double lo = r(t, xb, p.mu, p.tau).value;
    const double hi = r(t, xb, p.mu, p.tau + p.width).value;
    EXPECT_LE(lo, -0.01);
    EXPECT_GE(hi, -0.01);
    EXPECT_LE(p.width, tol);
    const double slope = (r(t, xb, p.mu, p.tau + 1e-3).value - lo) / 1e-3;
    EXPECT_NEAR(lo, -0.01, 2.0 * tol * std::abs(slope) + 1e-9);
  }
}

TEST(MinTime, LinearClosedForm) {
  const auto t = linear_target();
  const double v = min_time_to_isostable(t.model, t.spectrum, vec2(-1, 0), 1.0, 0.0, {0.0, 5.0}, t.cfg);
  EXPECT_NEAR(v, std::log(2.0), 1e-6 * std::log(2.0));
  EXPECT_EQ(min_time_to_isostable(t.model, t.spectrum, vec2(0.2, 0), 1.0, 0.0, {0.0, 5.0}, t.cfg), 0.0);
  EXPECT_EQ(kind_of([&] { min_time_to_isostable(t.model, t.spectrum, vec2(-1, 0), 0.5, 0.9, {0.0, 30.0}, t.cfg); }),
            ErrorKind::Unreachable);
}

TEST(MinTime, RepressilatorDefiningRelation) {
  const auto t = repressilator_target();
  const State xb = t.cfg.other_equilibria.front();
  const double beta = -0.05;
  const double tau = min_time_to_isostable(t.model, t.spectrum, xb, 6.0, beta, {0.0, 50.0}, t.cfg);
  EXPECT_NEAR(r(t, xb, 6.0, tau).value, beta, 1e-4);
}

// Slopes of r in cone coordinates, mu and (on r <= 0) tau are positive.
TEST(PulseR, MonotoneSlopes) {
  const auto t = repressilator_target();
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> below(-3.0, 0.0), mu_d(0.0, 1.0), tau_d(0.5, 3.0);
  const double h = 1e-3;
  int checked = 0;
  for (int k = 0; k < 6; ++k) {
    State y(8);
    for (int i = 0; i < 8; ++i) y[i] = below(gen);
    const State x = t.spectrum.x_star + from_cone_coords(t.model, y);
    const double mu = mu_d(gen), tau = tau_d(gen);
    const double base = r(t, x, mu, tau).value;
    if (!std::isfinite(base)) continue;
    ++checked;
    for (int i = 0; i < 8; ++i) {
      State z = x;
      z[i] += h * t.model.cone_signature()[i];
      const double v = r(t, z, mu, tau).value;
      if (std::isfinite(v)) {
        EXPECT_GT(v - base, -1e-7) << "coordinate " << i;
      }
    }
    const double vm = r(t, x, mu + h, tau).value;
    if (std::isfinite(vm)) {
      EXPECT_GT(vm - base, -1e-7);
    }
    if (base <= 0.0) {
      const double vt = r(t, x, mu, tau + h).value;
      if (std::isfinite(vt)) {
        EXPECT_GT(vt - base, -1e-7);
      }
    }
  }
  EXPECT_GE(checked, 3);
}

TEST(Optimize, ObjectiveNonincreasingOnFeasibleSteps) {
  const auto t = repressilator_target();
  const State xb = t.cfg.other_equilibria.front();
  const std::vector<double> mus = detail::linspace(4.0, 9.0, 6), taus = detail::linspace(10.0, 30.0, 6);
  const auto grid = r_grid(t.model, t.spectrum, xb, mus, taus, t.cfg);
  const double eps = 1e-2, rate = t.spectrum.rate();
  auto J = [&](double v, double tau) { return std::log(std::abs(v)) / rate + tau; };
  for (std::size_t i = 0; i < mus.size(); ++i)
    for (std::size_t j = 0; j < taus.size(); ++j) {
      const double v = grid(i, j);
      if (!(std::isfinite(v) && v <= -eps)) continue;
      if (i + 1 < mus.size() && std::isfinite(grid(i + 1, j)) && grid(i + 1, j) <= -eps) {
        EXPECT_LE(J(grid(i + 1, j), taus[j]), J(v, taus[j]) + 1e-6);
      }
      if (j + 1 < taus.size() && std::isfinite(grid(i, j + 1)) && grid(i, j + 1) <= -eps) {
        EXPECT_LE(J(grid(i, j + 1), taus[j + 1]), J(v, taus[j]) + 1e-6);
      }
    }
}

TEST(Optimize, LinearAgainstBruteForce) {
  const auto t = linear_target();
  const State x = vec2(-1, 0);
  const double eps = 0.01, emax = 1e9;
  const auto mus = detail::linspace(0.05, 4.0, 200);
  OptimizeOptions opt;
  opt.tau_max = 6.0;
  opt.tol_tau = 1e-9;
  const auto res = optimize(t.model, t.spectrum, x, eps, emax, mus, t.cfg, opt);
  ASSERT_TRUE(res.feasible);
  EXPECT_TRUE(res.isostable_active);
  EXPECT_NEAR(res.T_conv, res.gamma_star - std::log(eps), 1e-12);
  // Along r = -eps the objective is tau + ln eps, smallest at the largest mu.
  const double tau_star = std::log((1.0 + 4.0) / (4.0 + eps));
  EXPECT_NEAR(res.mu_star, 4.0, 1e-12);
  EXPECT_NEAR(res.tau_star, tau_star, 1e-6);
  EXPECT_NEAR(res.gamma_star, tau_star + std::log(eps), 1e-6);

  // Brute force on a 200 x 200 lattice of the same mu values.
  const auto taus = detail::linspace(0.0, 6.0, 200);
  const auto brute = optimize_grid(t.model, t.spectrum, x, eps, emax, mus, taus, t.cfg);
  ASSERT_TRUE(brute.feasible);
  EXPECT_LE(res.gamma_star, brute.gamma_star + 1e-9);
  // One cell of objective variation: the spread of the objective over the
  // feasible lattice points next to the continuous optimum.
  const double dmu = mus[1] - mus[0], dtau = taus[1] - taus[0];
  double spread = 0.0;
  for (std::size_t i = 0; i < mus.size(); ++i)
    for (std::size_t j = 0; j < taus.size(); ++j) {
      if (std::abs(mus[i] - res.mu_star) > dmu * (1 + 1e-9) || std::abs(taus[j] - res.tau_star) > dtau) continue;
      const double v = r_linear(-1.0, mus[i], taus[j]);
      if (v > -eps) continue;
      spread = std::max(spread, std::abs(std::log(-v) + taus[j] - res.gamma_star));
    }
  EXPECT_GT(spread, 0.0);
  EXPECT_LE(brute.gamma_star - res.gamma_star, spread + 1e-9);
}

TEST(Optimize, InfeasibleBudget) {
  const auto t = linear_target();
  // tau = 0 costs nothing, so the budget only binds once pulses have a minimum length.
  OptimizeOptions opt;
  opt.tau_min = 1.0;
  opt.tau_max = 5.0;
  const auto res = optimize(t.model, t.spectrum, vec2(-1, 0), 0.01, 1e-3, {0.5, 1.0, 2.0}, t.cfg, opt);
  EXPECT_FALSE(res.feasible);
}

TEST(Optimize, PreconditionOnStart) {
  const auto t = linear_target();
  EXPECT_EQ(kind_of([&] { optimize(t.model, t.spectrum, vec2(0.0, 1.0), 0.01, 10.0, {1.0}, t.cfg); }),
            ErrorKind::PreconditionViolated);
}

TEST(Optimize, RepressilatorHitsBothConstraints) {
  const auto t = repressilator_target();
  const State xb = t.cfg.other_equilibria.front();
  const auto res = optimize(t.model, t.spectrum, xb, 1e-2, 100.0, detail::linspace(2.0, 10.0, 17), t.cfg);
  ASSERT_TRUE(res.feasible);
  EXPECT_TRUE(res.isostable_active);
  EXPECT_TRUE(res.energy_active);
  EXPECT_LE(res.mu_star * res.tau_star, 100.0 * (1 + 1e-9));
  EXPECT_LE(res.r_star, -1e-2 + 1e-6);
  EXPECT_NEAR(res.r_star, -1e-2, 1e-4);
}

TEST(Optimize, TauFixedPicksLargestNegativeR) {
  const auto t = repressilator_target();
  const State xb = t.cfg.other_equilibria.front();
  const auto mus = detail::linspace(2.0, 10.0, 100);
  const auto res = optimize_tau_fixed(t.model, t.spectrum, xb, 1e-2, 100.0, 20.0, mus, t.cfg);
  ASSERT_TRUE(res.feasible);
  EXPECT_NEAR(res.mu_star, mus[15], 1e-12);
  EXPECT_LT(res.r_star, 0.0);
  EXPECT_GT(r(t, xb, mus[16], 20.0).value, 0.0);
}

TEST(Optimize, ConvergenceTime) {
  EXPECT_NEAR(convergence_time(-0.5, 3.0, 0.01, -2.0), std::log(0.5 / 0.01) / 2.0 + 3.0, 1e-12);
}

TEST(LevelCurve, FromGridInterpolates) {
  RGrid g;
  g.mu_axis = {1.0, 2.0};
  g.tau_axis = {0.0, 1.0, 2.0};
  g.values.resize(2, 3);
  g.values << -1.0, -0.5, 0.5, -1.0, 1.0, 2.0;
  const auto ls = level_curve_from_grid(g, 0.0);
  ASSERT_EQ(ls.points.size(), 2u);
  EXPECT_DOUBLE_EQ(ls.points[0].tau, 1.5);
  EXPECT_DOUBLE_EQ(ls.points[1].tau, 0.5);
}

}  // namespace
}  // namespace pulsekoop
