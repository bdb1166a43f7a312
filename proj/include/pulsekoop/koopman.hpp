#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pulsekoop/errors.hpp"
#include "pulsekoop/models.hpp"
#include "pulsekoop/ode.hpp"

namespace pulsekoop {

/// Jacobian of f(., 0) by central differences, h_i = h_scale * (1 + |x_i|).
inline Eigen::MatrixXd jacobian(const ModelSpec& model, const State& x, double h_scale = 1e-5) {
  require(x.allFinite(), ErrorKind::NonFinite, "jacobian: state is not finite");
  const int n = model.dimension();
  Eigen::MatrixXd jac(n, n);
  State xp = x, xm = x, fp(n), fm(n);
  for (int j = 0; j < n; ++j) {
    const double h = h_scale * (1.0 + std::abs(x[j]));
    xp[j] = x[j] + h;
    xm[j] = x[j] - h;
    model(xp, 0.0, fp);
    model(xm, 0.0, fm);
    jac.col(j) = (fp - fm) / (xp[j] - xm[j]);
    xp[j] = x[j];
    xm[j] = x[j];
  }
  require(jac.allFinite(), ErrorKind::NonFinite, "jacobian: non-finite entries");
  return jac;
}

namespace detail {

inline std::vector<std::complex<double>> sorted_eigenvalues(const Eigen::MatrixXd& m) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(m, false);
  std::vector<std::complex<double>> ev(es.eigenvalues().data(),
                                       es.eigenvalues().data() + es.eigenvalues().size());
  std::sort(ev.begin(), ev.end(), [](auto a, auto b) {
    return a.real() != b.real() ? a.real() > b.real() : a.imag() > b.imag();
  });
  return ev;
}

}  // namespace detail

/// Damped Newton on f(., 0). The result must be exponentially stable.
inline State find_equilibrium(const ModelSpec& model, const State& guess, double tol = 1e-10,
                              int max_iter = 200) {
  require(guess.size() == model.dimension(), ErrorKind::InvalidArgument,
          "find_equilibrium: guess has the wrong dimension");
  require(guess.allFinite(), ErrorKind::NonFinite, "find_equilibrium: guess is not finite");
  const int n = model.dimension();
  State x = guess, fx(n), trial(n), ft(n);
  model(x, 0.0, fx);
  bool converged = fx.lpNorm<Eigen::Infinity>() < tol;
  for (int it = 0; it < max_iter && !converged; ++it) {
    const Eigen::MatrixXd jac = jacobian(model, x);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(jac);
    if (!lu.isInvertible()) fail(ErrorKind::NoConvergence, "find_equilibrium: singular Jacobian");
    const State step = lu.solve(fx);
    const double f0 = fx.norm();
    double damping = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 40; ++ls, damping *= 0.5) {
      trial = x - damping * step;
      if (!trial.allFinite()) continue;
      model(trial, 0.0, ft);
      if (ft.allFinite() && ft.norm() < f0) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    x = trial;
    fx = ft;
    converged = fx.lpNorm<Eigen::Infinity>() < tol;
  }
  if (!converged)
    fail(ErrorKind::NoConvergence,
         "find_equilibrium: Newton stalled with |f|=" + std::to_string(fx.lpNorm<Eigen::Infinity>()));
  const auto ev = detail::sorted_eigenvalues(jacobian(model, x));
  if (ev.front().real() >= 0.0)
    fail(ErrorKind::NotStable, "find_equilibrium: leading eigenvalue has real part " +
                                   std::to_string(ev.front().real()));
  return x;
}

/// Jacobian spectrum at a stable equilibrium with the dominant right/left
/// eigenvectors normalized so that w1' v1 = 1 and v1 points into the cone.
struct Spectrum {
  State x_star;
  std::vector<std::complex<double>> lambda;  // descending real part
  State v1;
  State w1;
  Eigen::MatrixXd jacobian;
  std::vector<std::string> warnings;

  double lambda1() const { return lambda.front().real(); }
  double rate() const { return std::abs(lambda1()); }
};

inline Spectrum spectrum(const ModelSpec& model, const State& x_star, double h_scale = 1e-5) {
  const int n = model.dimension();
  Spectrum out;
  out.x_star = x_star;
  out.jacobian = jacobian(model, x_star, h_scale);

  Eigen::EigenSolver<Eigen::MatrixXd> es(out.jacobian, true);
  const Eigen::VectorXcd values = es.eigenvalues();
  const Eigen::MatrixXcd vectors = es.eigenvectors();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return values[a].real() != values[b].real() ? values[a].real() > values[b].real()
                                                : values[a].imag() > values[b].imag();
  });
  for (int i : order) out.lambda.push_back(values[i]);

  const auto lead = out.lambda.front();
  if (lead.real() >= 0.0)
    fail(ErrorKind::NotStable, "spectrum: equilibrium is not exponentially stable");

  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(vectors);
  const auto& sv = svd.singularValues();
  if (sv(n - 1) <= 1e-10 * sv(0))
    fail(ErrorKind::Defective, "spectrum: Jacobian is not diagonalizable within tolerance");

  const double scale = std::max(1.0, std::abs(lead));
  if (std::abs(lead.imag()) > 1e-10 * scale) {
    if (model.monotone())
      fail(ErrorKind::DominanceTie, "spectrum: dominant eigenvalue is complex for a monotone model");
    out.warnings.push_back("dominant eigenvalue is complex; using its real part");
  } else if (n > 1 && lead.real() - out.lambda[1].real() < 1e-9) {
    if (model.monotone())
      fail(ErrorKind::DominanceTie, "spectrum: dominant eigenvalue is not simple");
    out.warnings.push_back("dominant eigenvalue is not strictly dominant");
  }

  const int k = order.front();
  const Eigen::MatrixXcd inverse = vectors.inverse();
  out.v1 = vectors.col(k).real();
  out.w1 = inverse.row(k).transpose().real();
  out.v1 /= out.v1.norm();
  const State v_cone = to_cone_coords(model, out.v1);
  if (v_cone.sum() < 0.0) out.v1 = -out.v1;
  out.w1 /= out.w1.dot(out.v1);

  if (model.monotone()) {
    const double tol = 1e-9;
    if ((to_cone_coords(model, out.v1).array() < -tol).any() ||
        (to_cone_coords(model, out.w1).array() < -tol * out.w1.norm()).any())
      out.warnings.push_back("dominant eigenvectors are not nonnegative in cone coordinates");
  }
  return out;
}

struct EigenfunctionConfig {
  /// Tolerances of the free-motion integration. They are applied to the
  /// deviation from the equilibrium, so they scale with the shrinking state.
  IntegratorConfig integrator = [] {
    IntegratorConfig c;
    c.abs_tol_scales_with_state = true;
    return c;
  }();
  /// Successive horizon estimates must agree to this relative tolerance...
  double rel_tol = 1e-6;
  /// ...or to this fraction of |w1|_1 |x - x*|_inf, the scale of the
  /// observable at the start. Integration noise sits near rel_tol of that
  /// scale, so estimates close to zero cannot settle any finer.
  double abs_tol = 1e-9;
  double initial_horizon = 0.0;  // 0 selects 1/|lambda1|
  double max_horizon = 0.0;      // 0 selects 400/|lambda1|
  /// Radius (max norm in cone coordinates) around another equilibrium that
  /// counts as having left the basin.
  double escape_radius = 1e-3;
  std::vector<State> other_equilibria;
};

/// Value of s1 (or r). An escaped trajectory carries value = +-inf; the sign
/// says on which side of the basin it left (the increasing extension of s1),
/// +inf when that side is unknown.
struct EigenfunctionValue {
  double value = 0.0;
  double horizon_used = 0.0;
  bool converged = false;

  bool escaped() const { return std::isinf(value); }
  bool finite() const { return std::isfinite(value); }
};

/// Bundles everything needed to evaluate the dominant eigenfunction of one
/// target equilibrium.
struct Target {
  ModelSpec model;
  Spectrum spectrum;
  EigenfunctionConfig cfg;
};

namespace detail {

// f(x* + z, u) - f(x*, 0): z = 0 is an exact equilibrium of the shifted field.
struct ShiftedField {
  const ModelSpec& model;
  const State& x_star;
  State residual;
  mutable State work;

  ShiftedField(const ModelSpec& m, const State& xs) : model(m), x_star(xs), residual(xs.size()), work(xs.size()) {
    model(x_star, 0.0, residual);
  }

  void operator()(const State& z, double u, State& dz) const {
    work = x_star + z;
    model(work, u, dz);
    dz -= residual;
  }
};

}  // namespace detail

/// Dominant eigenfunction at x: the limit of w1'(phi(t, x, 0) - x*) e^{-lambda1 t}.
/// The horizon grows in steps of ln 2 / |lambda1| until two successive
/// estimates agree. w1'(x - x*) e^{-lambda1 t} is invariant under the
/// linearized flow, so what remains is the nonlinear part, which halves per step.
inline EigenfunctionValue s1(const ModelSpec& model, const Spectrum& spec, const State& x,
                             const EigenfunctionConfig& cfg = {}) {
  require(x.size() == model.dimension(), ErrorKind::InvalidArgument, "s1: state has the wrong dimension");
  require(x.allFinite(), ErrorKind::NonFinite, "s1: state is not finite");
  const double lambda1 = spec.lambda1();
  const double rate = -lambda1;
  require(rate > 0.0, ErrorKind::NotStable, "s1: lambda1 must be negative");

  const State z0 = x - spec.x_star;
  if (z0.lpNorm<Eigen::Infinity>() == 0.0) return {0.0, 0.0, true};

  const double t_first = cfg.initial_horizon > 0.0 ? cfg.initial_horizon : 1.0 / rate;
  const double t_max = cfg.max_horizon > 0.0 ? cfg.max_horizon : 400.0 / rate;
  const double dt = std::log(2.0) / rate;

  auto escape_sign = [&](const State& z) { return spec.w1.dot(z) < 0.0 ? -1.0 : 1.0; };
  auto near_other = [&](const State& z) -> const State* {
    if (to_cone_coords(model, z).lpNorm<Eigen::Infinity>() <= cfg.escape_radius) return nullptr;
    for (const auto& e : cfg.other_equilibria) {
      const State d = spec.x_star + z - e;
      if (d.lpNorm<Eigen::Infinity>() < cfg.escape_radius) return &e;
    }
    return nullptr;
  };

  detail::ShiftedField field(model, spec.x_star);
  Dopri5<detail::ShiftedField> stepper(field, z0, 0.0, cfg.integrator);
  stepper.set_input(0.0);
  const double abs_floor = cfg.abs_tol * spec.w1.lpNorm<1>() * z0.lpNorm<Eigen::Infinity>();
  // Evaluating the field at x* + z rounds z to the spacing of x*; rescaled by
  // e^{-lambda1 t} that rounding bounds how well any estimate can settle.
  const double rounding = 4.0 * std::numeric_limits<double>::epsilon() * spec.w1.lpNorm<1>() *
                          std::max(1.0, spec.x_star.lpNorm<Eigen::Infinity>());
  double previous = std::numeric_limits<double>::quiet_NaN();
  for (double t = t_first;; t += dt) {
    try {
      stepper.advance_to(t);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Divergence) throw;
      return {escape_sign(stepper.state()) * std::numeric_limits<double>::infinity(), stepper.time(),
              false};
    }
    const State& z = stepper.state();
    if (const State* other = near_other(z))
      return {escape_sign(*other - spec.x_star) * std::numeric_limits<double>::infinity(), t, false};
    const double estimate = spec.w1.dot(z) * std::exp(-lambda1 * t);
    if (std::isfinite(previous) &&
        std::abs(estimate - previous) <=
            cfg.rel_tol * std::abs(estimate) + abs_floor + rounding * std::exp(-lambda1 * t))
      return {estimate, t, true};
    previous = estimate;
    if (t > t_max)
      fail(ErrorKind::HorizonExceeded,
           "s1: estimate did not settle by t=" + std::to_string(t_max));
  }
}

inline EigenfunctionValue s1(const Target& target, const State& x) {
  return s1(target.model, target.spectrum, x, target.cfg);
}

/// Time for the isostable |s1| = alpha1 to reach alpha2 under free motion.
inline double isostable_time(double alpha1, double alpha2, double lambda1) {
  require(alpha2 > 0.0, ErrorKind::InvalidArgument, "isostable_time: alpha2 must be positive");
  require(alpha1 >= alpha2, ErrorKind::BadOrder, "isostable_time: alpha2 exceeds alpha1");
  require(lambda1 < 0.0, ErrorKind::NonNegativeLambda, "isostable_time: lambda1 must be negative");
  return std::log(alpha1 / alpha2) / std::abs(lambda1);
}

/// Locates x* from `guess`, computes its spectrum, and registers the other
/// equilibria for basin-escape detection.
inline Target make_target(const ModelSpec& model, const State& guess,
                          const std::vector<State>& other_guesses = {},
                          const EigenfunctionConfig& cfg = {}) {
  Target t{model, spectrum(model, find_equilibrium(model, guess)), cfg};
  for (const auto& g : other_guesses) t.cfg.other_equilibria.push_back(find_equilibrium(model, g));
  return t;
}

}  // namespace pulsekoop
