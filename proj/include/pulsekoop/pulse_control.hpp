#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pulsekoop/errors.hpp"
#include "pulsekoop/koopman.hpp"
#include "pulsekoop/models.hpp"
#include "pulsekoop/ode.hpp"
#include "pulsekoop/parallel.hpp"

namespace pulsekoop {

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// r(x, mu, tau) on a (mu, tau) lattice for one base state. Escaped cells hold
/// +-inf, cells whose evaluation failed hold NaN.
struct RGrid {
  State x;
  std::vector<double> mu_axis;
  std::vector<double> tau_axis;
  Eigen::MatrixXd values;  // [mu][tau]

  double operator()(std::size_t i, std::size_t j) const {
    return values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
};

struct LevelPoint {
  double mu = 0.0;
  double tau = 0.0;
  double width = 0.0;  // final bisection bracket in tau
  double r = 0.0;      // r at the returned tau
};

/// Smallest-tau solutions of r(x, mu, tau) = alpha, ascending in mu. The
/// returned tau is the bracket end on the same side of alpha as the bracket
/// start, so for alpha < 0 every point satisfies r <= alpha.
struct LevelSet {
  double alpha = 0.0;
  std::vector<LevelPoint> points;
};

struct OptimizeResult {
  double mu_star = 0.0;
  double tau_star = 0.0;
  double r_star = kNaN;
  double gamma_star = kInf;
  double T_conv = kInf;
  bool isostable_active = false;
  bool energy_active = false;
  bool feasible = false;
};

/// (1/|lambda1|) ln(|r| / eps) + tau: free-motion time from the pulse end to
/// the eps-isostable, plus the pulse.
inline double convergence_time(double r, double tau, double epsilon, double lambda1) {
  return std::log(std::abs(r) / epsilon) / std::abs(lambda1) + tau;
}

namespace detail {

inline void require_axis(const std::vector<double>& axis, const char* name, bool allow_empty = false) {
  require(allow_empty || !axis.empty(), ErrorKind::InvalidArgument, std::string(name) + " is empty");
  for (std::size_t i = 0; i < axis.size(); ++i) {
    require(std::isfinite(axis[i]) && axis[i] >= 0.0, ErrorKind::InvalidArgument,
            std::string(name) + " entries must be finite and >= 0");
    if (i > 0)
      require(axis[i] > axis[i - 1], ErrorKind::InvalidArgument,
              std::string(name) + " must be strictly increasing");
  }
}

// r at each tau of an ascending list, sharing one pulse integration.
inline std::vector<double> r_row(const ModelSpec& model, const Spectrum& spec, const State& x, double mu,
                                 const std::vector<double>& taus, const EigenfunctionConfig& cfg) {
  std::vector<double> out(taus.size(), kNaN);
  ShiftedField field(model, spec.x_star);
  std::optional<Dopri5<ShiftedField>> stepper;
  try {
    stepper.emplace(field, x - spec.x_star, 0.0, cfg.integrator);
    stepper->set_input(mu);
  } catch (const Error&) {
    return out;
  }
  for (std::size_t j = 0; j < taus.size(); ++j) {
    try {
      stepper->advance_to(taus[j]);
    } catch (const Error& e) {
      const double fill = e.kind() == ErrorKind::Divergence
                              ? (spec.w1.dot(stepper->state()) < 0.0 ? -kInf : kInf)
                              : kNaN;
      std::fill(out.begin() + static_cast<std::ptrdiff_t>(j), out.end(), fill);
      return out;
    }
    try {
      out[j] = s1(model, spec, spec.x_star + stepper->state(), cfg).value;
    } catch (const Error&) {
      out[j] = kNaN;
    }
  }
  return out;
}

inline std::vector<double> linspace(double lo, double hi, int n) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = n == 1 ? lo : lo + (hi - lo) * i / (n - 1);
  return v;
}

inline int side(double g) { return g > 0.0 ? 1 : (g < 0.0 ? -1 : 0); }

}  // namespace detail

/// r(x, mu, tau) = s1(phi(tau, x, mu h(., tau))). Escape reports +-inf.
inline EigenfunctionValue r(const ModelSpec& model, const Spectrum& spec, const State& x, double mu,
                            double tau, const EigenfunctionConfig& cfg = {}) {
  Pulse{mu, tau}.validate();
  require(x.size() == model.dimension(), ErrorKind::InvalidArgument, "r: state has the wrong dimension");
  if (tau == 0.0) return s1(model, spec, x, cfg);
  detail::ShiftedField field(model, spec.x_star);
  Dopri5<detail::ShiftedField> stepper(field, x - spec.x_star, 0.0, cfg.integrator);
  stepper.set_input(mu);
  try {
    stepper.advance_to(tau);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Divergence) throw;
    return {spec.w1.dot(stepper.state()) < 0.0 ? -kInf : kInf, stepper.time(), false};
  }
  return s1(model, spec, spec.x_star + stepper.state(), cfg);
}

inline EigenfunctionValue r(const Target& target, const State& x, double mu, double tau) {
  return r(target.model, target.spectrum, x, mu, tau, target.cfg);
}

namespace detail {

// r for each magnitude at one duration; failures become NaN.
inline std::vector<double> r_row_over_mu(const Target& target, const State& x, const std::vector<double>& mus,
                                         double tau) {
  std::vector<double> out(mus.size(), kNaN);
  for (std::size_t i = 0; i < mus.size(); ++i) {
    try {
      out[i] = r(target, x, mus[i], tau).value;
    } catch (const Error&) {
    }
  }
  return out;
}

}  // namespace detail

/// Elementwise r over the lattice. Rows run concurrently; cell failures are
/// stored as NaN rather than thrown.
inline RGrid r_grid(const ModelSpec& model, const Spectrum& spec, const State& x, std::vector<double> mu_axis,
                    std::vector<double> tau_axis, const EigenfunctionConfig& cfg = {}, int threads = 0) {
  detail::require_axis(mu_axis, "mu_axis");
  detail::require_axis(tau_axis, "tau_axis");
  RGrid grid{x, std::move(mu_axis), std::move(tau_axis), {}};
  grid.values.resize(static_cast<Eigen::Index>(grid.mu_axis.size()),
                     static_cast<Eigen::Index>(grid.tau_axis.size()));
  parallel_for(
      grid.mu_axis.size(),
      [&](std::size_t i) {
        const auto row = detail::r_row(model, spec, x, grid.mu_axis[i], grid.tau_axis, cfg);
        for (std::size_t j = 0; j < row.size(); ++j)
          grid.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
      },
      threads);
  return grid;
}

struct RootOptions {
  double tol_tau = 1e-8;
  int scan_points = 41;
};

namespace detail {

// Smallest tau in [lo, hi] where r(mu, .) - alpha changes sign. Returns the
// bracket end on the starting side.
inline std::optional<LevelPoint> smallest_root(const ModelSpec& model, const Spectrum& spec, const State& x,
                                               double mu, double alpha, double lo, double hi,
                                               const EigenfunctionConfig& cfg, const RootOptions& opt) {
  const auto taus = linspace(lo, hi, std::max(opt.scan_points, 2));
  const auto vals = r_row(model, spec, x, mu, taus, cfg);
  if (std::isnan(vals[0])) return std::nullopt;
  const int s0 = side(vals[0] - alpha);
  if (s0 == 0) return LevelPoint{mu, lo, 0.0, vals[0]};
  for (std::size_t j = 1; j < taus.size(); ++j) {
    if (std::isnan(vals[j])) return std::nullopt;
    if (side(vals[j] - alpha) == s0) continue;
    double a = taus[j - 1], b = taus[j], ra = vals[j - 1];
    while (b - a > opt.tol_tau) {
      const double m = 0.5 * (a + b);
      double rm = kNaN;
      try {
        rm = r(model, spec, x, mu, m, cfg).value;
      } catch (const Error& e) {
        // The midpoint sits on the basin boundary to working precision; the
        // bracket is as tight as it will get.
        if (e.kind() == ErrorKind::HorizonExceeded) break;
        throw;
      }
      if (std::isnan(rm)) return std::nullopt;
      if (side(rm - alpha) == s0) {
        a = m;
        ra = rm;
      } else {
        b = m;
      }
    }
    return LevelPoint{mu, a, b - a, ra};
  }
  return std::nullopt;
}

}  // namespace detail

/// For each mu, the smallest tau in tau_bracket with r(x, mu, tau) = alpha.
/// Values of mu without a sign change are omitted.
inline LevelSet level_set(const ModelSpec& model, const Spectrum& spec, const State& x, double alpha,
                          const std::vector<double>& mu_axis, std::pair<double, double> tau_bracket,
                          double tol_tau = 1e-6, const EigenfunctionConfig& cfg = {}, int scan_points = 41,
                          int threads = 0) {
  detail::require_axis(mu_axis, "mu_axis");
  require(tau_bracket.first >= 0.0 && tau_bracket.second > tau_bracket.first, ErrorKind::InvalidArgument,
          "level_set: tau bracket must satisfy 0 <= lo < hi");
  require(tol_tau > 0.0, ErrorKind::InvalidArgument, "level_set: tol_tau must be > 0");
  if (alpha <= 0.0) {
    const double base = s1(model, spec, x, cfg).value;
    require(base < alpha, ErrorKind::PreconditionViolated,
            "level_set: a non-positive level needs s1(x) < alpha");
  }
  std::vector<std::optional<LevelPoint>> found(mu_axis.size());
  const RootOptions opt{tol_tau, scan_points};
  parallel_for(
      mu_axis.size(),
      [&](std::size_t i) {
        found[i] = detail::smallest_root(model, spec, x, mu_axis[i], alpha, tau_bracket.first,
                                         tau_bracket.second, cfg, opt);
      },
      threads);
  LevelSet out{alpha, {}};
  for (const auto& p : found)
    if (p) out.points.push_back(*p);
  if (out.points.empty()) fail(ErrorKind::NoBracket, "level_set: level is not reached inside the bracket");
  return out;
}

/// Shortest pulse of magnitude mu that brings s1 up to beta; 0 when s1(x) >= beta
/// already holds.
inline double min_time_to_isostable(const ModelSpec& model, const Spectrum& spec, const State& x, double mu,
                                    double beta, std::pair<double, double> tau_bracket,
                                    const EigenfunctionConfig& cfg = {}, const RootOptions& opt = {}) {
  require(tau_bracket.first >= 0.0 && tau_bracket.second > tau_bracket.first, ErrorKind::InvalidArgument,
          "min_time_to_isostable: tau bracket must satisfy 0 <= lo < hi");
  const double base = s1(model, spec, x, cfg).value;
  if (base >= beta) return 0.0;
  const auto p = detail::smallest_root(model, spec, x, mu, beta, tau_bracket.first, tau_bracket.second, cfg, opt);
  if (!p) fail(ErrorKind::Unreachable, "min_time_to_isostable: level not reached inside the bracket");
  return p->tau + p->width;
}

struct OptimizeOptions {
  double tau_min = 0.0;
  double tau_max = 50.0;
  double tol_tau = 1e-6;
  int scan_points = 41;
  int mu_refine_steps = 40;
  int threads = 0;
};

namespace detail {

inline void consider(OptimizeResult& best, double mu, double tau, double rv, double epsilon, double rate,
                     bool iso, bool energy) {
  if (!std::isfinite(rv) || rv > -epsilon || rv == 0.0) return;
  const double gamma = std::log(std::abs(rv)) / rate + tau;
  const bool better = !best.feasible || gamma < best.gamma_star - 1e-12 ||
                      (std::abs(gamma - best.gamma_star) <= 1e-12 &&
                       (mu < best.mu_star || (mu == best.mu_star && tau < best.tau_star)));
  if (!better) return;
  best.mu_star = mu;
  best.tau_star = tau;
  best.r_star = rv;
  best.gamma_star = gamma;
  best.T_conv = gamma - std::log(epsilon) / rate;
  best.isostable_active = iso;
  best.energy_active = energy;
  best.feasible = true;
}

}  // namespace detail

/// Minimizes (1/|lambda1|) ln|r| + tau subject to r <= -eps and mu tau <= E_max
/// by searching the two constraint curves and refining where they cross.
inline OptimizeResult optimize(const ModelSpec& model, const Spectrum& spec, const State& x, double epsilon,
                               double E_max, const std::vector<double>& mu_axis,
                               const EigenfunctionConfig& cfg = {}, const OptimizeOptions& opt = {}) {
  require(epsilon > 0.0, ErrorKind::InvalidArgument, "optimize: epsilon must be > 0");
  require(E_max > 0.0, ErrorKind::InvalidArgument, "optimize: E_max must be > 0");
  detail::require_axis(mu_axis, "mu_axis");
  require(opt.tau_max > opt.tau_min && opt.tau_min >= 0.0, ErrorKind::InvalidArgument,
          "optimize: tau range must satisfy 0 <= tau_min < tau_max");
  const double base = s1(model, spec, x, cfg).value;
  require(base <= -epsilon, ErrorKind::PreconditionViolated, "optimize: needs s1(x) <= -epsilon");
  const double rate = spec.rate();
  const double alpha = -epsilon;
  const RootOptions ropt{opt.tol_tau, opt.scan_points};
  OptimizeResult best;

  // (a) isostable curve r = -eps.
  std::vector<std::optional<LevelPoint>> curve(mu_axis.size());
  parallel_for(
      mu_axis.size(),
      [&](std::size_t i) {
        curve[i] = detail::smallest_root(model, spec, x, mu_axis[i], alpha, opt.tau_min, opt.tau_max, cfg, ropt);
      },
      opt.threads);
  for (const auto& p : curve)
    if (p && p->mu * p->tau <= E_max) detail::consider(best, p->mu, p->tau, p->r, epsilon, rate, true, false);

  // (b) energy curve tau = E_max / mu.
  std::vector<double> energy_r(mu_axis.size(), kNaN);
  parallel_for(
      mu_axis.size(),
      [&](std::size_t i) {
        const double mu = mu_axis[i];
        if (mu <= 0.0) return;
        const double tau = E_max / mu;
        if (tau < opt.tau_min || tau > opt.tau_max) return;
        try {
          energy_r[i] = r(model, spec, x, mu, tau, cfg).value;
        } catch (const Error&) {
        }
      },
      opt.threads);
  for (std::size_t i = 0; i < mu_axis.size(); ++i)
    if (mu_axis[i] > 0.0) detail::consider(best, mu_axis[i], E_max / mu_axis[i], energy_r[i], epsilon, rate, false, true);

  // Crossing of the two curves between neighbouring mu values.
  for (std::size_t i = 0; i + 1 < mu_axis.size(); ++i) {
    if (!curve[i] || !curve[i + 1]) continue;
    const bool in_a = curve[i]->mu * curve[i]->tau <= E_max;
    const bool in_b = curve[i + 1]->mu * curve[i + 1]->tau <= E_max;
    if (in_a == in_b) continue;
    double feasible_mu = in_a ? mu_axis[i] : mu_axis[i + 1];
    double other_mu = in_a ? mu_axis[i + 1] : mu_axis[i];
    LevelPoint feasible_pt = in_a ? *curve[i] : *curve[i + 1];
    for (int k = 0; k < opt.mu_refine_steps; ++k) {
      const double mid = 0.5 * (feasible_mu + other_mu);
      const auto p = detail::smallest_root(model, spec, x, mid, alpha, opt.tau_min, opt.tau_max, cfg, ropt);
      if (!p) break;
      if (p->mu * p->tau <= E_max) {
        feasible_mu = mid;
        feasible_pt = *p;
      } else {
        other_mu = mid;
      }
      if (std::abs(other_mu - feasible_mu) <= 1e-10 * std::max(1.0, feasible_mu)) break;
    }
    detail::consider(best, feasible_pt.mu, feasible_pt.tau, feasible_pt.r, epsilon, rate, true, true);
  }

  if (best.feasible) {
    if (std::abs(best.mu_star * best.tau_star - E_max) <= 1e-6 * E_max) best.energy_active = true;
  }
  return best;
}

/// Exhaustive minimization over a precomputed lattice (same admissibility
/// filter as optimize).
inline OptimizeResult optimize_on_grid(const RGrid& grid, double epsilon, double E_max, double lambda1) {
  OptimizeResult best;
  const double rate = std::abs(lambda1);
  for (std::size_t i = 0; i < grid.mu_axis.size(); ++i)
    for (std::size_t j = 0; j < grid.tau_axis.size(); ++j) {
      const double mu = grid.mu_axis[i], tau = grid.tau_axis[j];
      if (mu * tau > E_max) continue;
      detail::consider(best, mu, tau, grid(i, j), epsilon, rate, false, false);
    }
  return best;
}

inline OptimizeResult optimize_grid(const ModelSpec& model, const Spectrum& spec, const State& x, double epsilon,
                                    double E_max, const std::vector<double>& mu_axis,
                                    const std::vector<double>& tau_axis, const EigenfunctionConfig& cfg = {},
                                    int threads = 0) {
  return optimize_on_grid(r_grid(model, spec, x, mu_axis, tau_axis, cfg, threads), epsilon, E_max,
                          spec.lambda1());
}

/// Fixed duration, mu line search: the feasible mu (r < 0, mu tau <= E_max)
/// with the shortest convergence time. Ties go to the smaller mu.
inline OptimizeResult optimize_tau_fixed(const ModelSpec& model, const Spectrum& spec, const State& x,
                                         double epsilon, double E_max, double tau,
                                         const std::vector<double>& mu_axis, const EigenfunctionConfig& cfg = {},
                                         int threads = 0) {
  require(epsilon > 0.0 && E_max > 0.0, ErrorKind::InvalidArgument, "optimize_tau_fixed: bad epsilon or E_max");
  const RGrid grid = r_grid(model, spec, x, mu_axis, {tau}, cfg, threads);
  const double rate = spec.rate();
  OptimizeResult best;
  for (std::size_t i = 0; i < grid.mu_axis.size(); ++i) {
    const double mu = grid.mu_axis[i], rv = grid(i, 0);
    if (mu * tau > E_max || !std::isfinite(rv) || rv >= 0.0) continue;
    const double gamma = std::log(std::abs(rv)) / rate + tau;
    if (best.feasible && gamma >= best.gamma_star - 1e-12) continue;
    best = {mu, tau, rv, gamma, gamma - std::log(epsilon) / rate, rv >= -epsilon, mu * tau >= E_max, true};
  }
  return best;
}

/// Lattice approximation of the r = alpha curve: for each mu row, the first
/// tau interval where r - alpha changes sign, interpolated linearly.
inline LevelSet level_curve_from_grid(const RGrid& grid, double alpha) {
  LevelSet out{alpha, {}};
  for (std::size_t i = 0; i < grid.mu_axis.size(); ++i) {
    const double g0 = grid(i, 0) - alpha;
    if (std::isnan(g0)) continue;
    for (std::size_t j = 1; j < grid.tau_axis.size(); ++j) {
      const double g1 = grid(i, j) - alpha;
      if (std::isnan(g1)) break;
      if (detail::side(g1) == detail::side(g0)) continue;
      const double ga = grid(i, j - 1) - alpha;
      const double ta = grid.tau_axis[j - 1], tb = grid.tau_axis[j];
      double tau = tb;
      if (std::isfinite(ga) && std::isfinite(g1) && g1 != ga) tau = ta + (tb - ta) * (-ga) / (g1 - ga);
      out.points.push_back({grid.mu_axis[i], tau, tb - ta, alpha});
      break;
    }
  }
  return out;
}

}  // namespace pulsekoop
