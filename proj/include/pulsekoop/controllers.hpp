#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "pulsekoop/errors.hpp"
#include "pulsekoop/io.hpp"
#include "pulsekoop/koopman.hpp"
#include "pulsekoop/models.hpp"
#include "pulsekoop/ode.hpp"
#include "pulsekoop/parallel.hpp"
#include "pulsekoop/pulse_control.hpp"

namespace pulsekoop {

/// One constant-input interval [start, end) of an applied schedule.
struct AppliedSegment {
  double start = 0.0;
  double end = 0.0;
  double mu = 0.0;
};

/// Controller state at one replanning instant.
struct Epoch {
  double time = 0.0;
  double mu = 0.0;
  double tau_remaining = 0.0;
  double budget_remaining = 0.0;
  double r_planned = kNaN;  // nominal-model r of the chosen (mu, tau_remaining)
  double s1_true = kNaN;
  bool budget_exhausted = false;
};

struct SwitchOutcome {
  bool success = false;
  Trajectory trajectory;
  double energy_spent = 0.0;
  std::vector<AppliedSegment> applied_schedule;
  std::vector<Epoch> epochs;
  double final_s1 = kNaN;
  double peak_x1 = -kInf;
};

namespace detail {

// Integrates `model` through the segments and then freely to `horizon`,
// appending the mesh to `out` (which may already hold earlier samples).
inline State run_segments(const ModelSpec& model, const State& x0, double t0,
                          const std::vector<AppliedSegment>& segments, double horizon,
                          const IntegratorConfig& cfg, SwitchOutcome& out) {
  Dopri5<ModelSpec> stepper(model, x0, t0, cfg);
  auto record = [&](double t, const State& x) {
    out.trajectory.times.push_back(t);
    out.trajectory.states.push_back(x);
    out.peak_x1 = std::max(out.peak_x1, x[0]);
  };
  if (out.trajectory.times.empty()) record(t0, x0);
  for (const auto& seg : segments) {
    stepper.set_input(seg.mu);
    stepper.advance_to(seg.end, record);
  }
  stepper.set_input(0.0);
  stepper.advance_to(horizon, record);
  return stepper.state();
}

inline void judge(const Target& truth, double epsilon, SwitchOutcome& out) {
  try {
    out.final_s1 = s1(truth, out.trajectory.final_state()).value;
  } catch (const Error&) {
    out.final_s1 = kNaN;
  }
  out.success = std::isfinite(out.final_s1) && std::abs(out.final_s1) <= epsilon;
}

}  // namespace detail

/// Applies a fixed pulse to the true model and judges the result with the true
/// model's eigenfunction at `horizon`.
inline SwitchOutcome open_loop_switch(const Target& truth, const Pulse& pulse, const State& x0, double epsilon,
                                      double horizon, const IntegratorConfig& cfg = {}) {
  pulse.validate();
  require(epsilon > 0.0, ErrorKind::InvalidArgument, "open_loop_switch: epsilon must be > 0");
  require(horizon >= pulse.tau, ErrorKind::InvalidArgument, "open_loop_switch: horizon shorter than the pulse");
  SwitchOutcome out;
  out.trajectory.input_used = pulse;
  if (pulse.tau > 0.0) out.applied_schedule.push_back({0.0, pulse.tau, pulse.mu});
  detail::run_segments(truth.model, x0, 0.0, out.applied_schedule, horizon, cfg, out);
  out.energy_spent = pulse.energy();
  detail::judge(truth, epsilon, out);
  return out;
}

struct ClosedLoopConfig {
  double t_samp = 2.0;
  double E_max = 100.0;
  double epsilon = 1e-2;
  std::vector<double> mu_grid;
  double tau0 = 20.0;
  double mu0 = 0.0;
  double horizon = 60.0;
  IntegratorConfig integrator{};

  void validate() const {
    require(t_samp > 0.0 && std::isfinite(t_samp), ErrorKind::InvalidArgument, "t_samp must be > 0");
    require(E_max > 0.0, ErrorKind::InvalidArgument, "E_max must be > 0");
    require(epsilon > 0.0, ErrorKind::InvalidArgument, "epsilon must be > 0");
    require(tau0 > 0.0, ErrorKind::InvalidArgument, "tau0 must be > 0");
    const double k = tau0 / t_samp;
    require(std::abs(k - std::round(k)) <= 1e-9 * std::max(1.0, k), ErrorKind::InvalidArgument,
            "tau0 must be an integer multiple of t_samp");
    require(mu0 >= 0.0 && mu0 * tau0 <= E_max * (1.0 + 1e-12), ErrorKind::InvalidArgument,
            "mu0 must be >= 0 and mu0 * tau0 within E_max");
    require(horizon >= tau0, ErrorKind::InvalidArgument, "horizon must be >= tau0");
    detail::require_axis(mu_grid, "mu_grid");
  }
};

/// Chooses the magnitude for the remaining duration tau from state x using
/// nominal-model quantities only. Candidates are 0 and the affordable grid
/// values. Among those with a finite negative r the shortest convergence time
/// wins. Otherwise the state is ahead of plan (finite r >= 0, take the smallest
/// such mu) or behind it (every r = -inf, take the largest affordable mu).
inline std::pair<double, double> replan_magnitude(const Target& nominal, const State& x, double tau,
                                                  double budget, double epsilon,
                                                  const std::vector<double>& mu_grid) {
  std::vector<double> candidates{0.0};
  for (double mu : mu_grid)
    if (mu > 0.0 && mu * tau <= budget * (1.0 + 1e-12)) candidates.push_back(mu);
  const auto values = detail::r_row_over_mu(nominal, x, candidates, tau);
  const double rate = nominal.spectrum.rate();
  std::optional<std::size_t> best, ahead;
  double best_t = kInf;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double rv = values[i];
    if (!std::isfinite(rv)) continue;
    if (rv < 0.0) {
      const double t = convergence_time(rv, tau, epsilon, -rate);
      if (t < best_t - 1e-12) {
        best_t = t;
        best = i;
      }
    } else if (!ahead) {
      ahead = i;
    }
  }
  if (best) return {candidates[*best], values[*best]};
  if (ahead) return {candidates[*ahead], values[*ahead]};
  return {candidates.back(), values.back()};
}

/// Event-based replanning every t_samp: the pulse duration shrinks by t_samp
/// per update and the remaining energy budget by what was spent. Planning uses
/// the nominal target only; success is judged with the true one.
inline SwitchOutcome closed_loop_switch(const Target& truth, const Target& nominal, const State& x0,
                                        const ClosedLoopConfig& cfg) {
  cfg.validate();
  SwitchOutcome out;
  const int updates = static_cast<int>(std::lround(cfg.tau0 / cfg.t_samp));
  Dopri5<ModelSpec> stepper(truth.model, x0, 0.0, cfg.integrator);
  auto record = [&](double t, const State& x) {
    out.trajectory.times.push_back(t);
    out.trajectory.states.push_back(x);
    out.peak_x1 = std::max(out.peak_x1, x[0]);
  };
  record(0.0, x0);
  for (int k = 0; k < updates; ++k) {
    const double t = k * cfg.t_samp;
    const double tau_k = cfg.tau0 - t;
    const double budget = cfg.E_max - out.energy_spent;
    Epoch e;
    e.time = t;
    e.tau_remaining = tau_k;
    e.budget_remaining = budget;
    if (k == 0) {
      e.mu = cfg.mu0;
      e.r_planned = r(nominal, stepper.state(), cfg.mu0, tau_k).value;
    } else if (budget <= 0.0) {
      e.budget_exhausted = true;
    } else {
      std::tie(e.mu, e.r_planned) =
          replan_magnitude(nominal, stepper.state(), tau_k, budget, cfg.epsilon, cfg.mu_grid);
    }
    e.mu = std::min(e.mu, std::max(0.0, budget) / cfg.t_samp);
    try {
      e.s1_true = s1(truth, stepper.state()).value;
    } catch (const Error&) {
    }
    out.epochs.push_back(e);
    stepper.set_input(e.mu);
    stepper.advance_to(t + cfg.t_samp, record);
    out.energy_spent += e.mu * cfg.t_samp;
    if (!out.applied_schedule.empty() && out.applied_schedule.back().mu == e.mu)
      out.applied_schedule.back().end = t + cfg.t_samp;
    else
      out.applied_schedule.push_back({t, t + cfg.t_samp, e.mu});
  }
  stepper.set_input(0.0);
  stepper.advance_to(cfg.horizon, record);
  detail::judge(truth, cfg.epsilon, out);
  return out;
}

// ---------------------------------------------------------------------------
// Ensemble synchronization

/// Per-state tables of r over a (mu, tau) lattice, for states on a
/// rectangular grid in two chosen coordinates. Off-grid states are clamped
/// into the grid and interpolated bilinearly.
struct RTable {
  std::vector<double> x_axis;
  std::vector<double> y_axis;
  std::vector<double> mu_axis;
  std::vector<double> tau_axis;
  std::vector<Eigen::MatrixXd> values;  // index ix * |y_axis| + iy, each [mu][tau]

  const Eigen::MatrixXd& at(std::size_t ix, std::size_t iy) const { return values[ix * y_axis.size() + iy]; }

  /// Bilinear interpolation of every (mu, tau) cell at state (x, y). A cell is
  /// NaN when any of its four corner values is not finite.
  Eigen::MatrixXd interpolate(double x, double y) const {
    auto locate = [](const std::vector<double>& axis, double v, std::size_t& i, double& w) {
      v = std::clamp(v, axis.front(), axis.back());
      auto it = std::upper_bound(axis.begin(), axis.end(), v);
      i = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, (it - axis.begin()) - 1));
      if (i + 1 >= axis.size()) i = axis.size() - 2;
      w = (v - axis[i]) / (axis[i + 1] - axis[i]);
    };
    std::size_t ix, iy;
    double wx, wy;
    locate(x_axis, x, ix, wx);
    locate(y_axis, y, iy, wy);
    const auto& a = at(ix, iy);
    const auto& b = at(ix + 1, iy);
    const auto& c = at(ix, iy + 1);
    const auto& d = at(ix + 1, iy + 1);
    Eigen::MatrixXd out = (1 - wx) * (1 - wy) * a + wx * (1 - wy) * b + (1 - wx) * wy * c + wx * wy * d;
    for (Eigen::Index i = 0; i < out.rows(); ++i)
      for (Eigen::Index j = 0; j < out.cols(); ++j)
        if (!std::isfinite(a(i, j)) || !std::isfinite(b(i, j)) || !std::isfinite(c(i, j)) ||
            !std::isfinite(d(i, j)))
          out(i, j) = kNaN;
    return out;
  }

  void validate() const {
    require(x_axis.size() >= 2 && y_axis.size() >= 2, ErrorKind::InvalidArgument,
            "RTable: state axes need at least two points");
    detail::require_axis(mu_axis, "mu_axis");
    detail::require_axis(tau_axis, "tau_axis");
    require(values.size() == x_axis.size() * y_axis.size(), ErrorKind::InvalidArgument,
            "RTable: wrong number of state tables");
    for (const auto& v : values)
      require(v.rows() == static_cast<Eigen::Index>(mu_axis.size()) &&
                  v.cols() == static_cast<Eigen::Index>(tau_axis.size()),
              ErrorKind::InvalidArgument, "RTable: table has the wrong shape");
  }
};

/// Two-dimensional models only: the state grid spans both coordinates.
inline RTable build_rtable(const Target& target, std::vector<double> x_axis, std::vector<double> y_axis,
                           std::vector<double> mu_axis, std::vector<double> tau_axis, int threads = 0) {
  require(target.model.dimension() == 2, ErrorKind::InvalidArgument, "build_rtable needs a planar model");
  RTable t{std::move(x_axis), std::move(y_axis), std::move(mu_axis), std::move(tau_axis), {}};
  require(t.x_axis.size() >= 2 && t.y_axis.size() >= 2, ErrorKind::InvalidArgument,
          "build_rtable: state axes need at least two points");
  detail::require_axis(t.mu_axis, "mu_axis");
  detail::require_axis(t.tau_axis, "tau_axis");
  t.values.resize(t.x_axis.size() * t.y_axis.size());
  parallel_for(
      t.values.size(),
      [&](std::size_t k) {
        State x(2);
        x << t.x_axis[k / t.y_axis.size()], t.y_axis[k % t.y_axis.size()];
        t.values[k] = r_grid(target.model, target.spectrum, x, t.mu_axis, t.tau_axis, target.cfg, 1).values;
      },
      threads);
  return t;
}

/// Long-format CSV: one row per (state, mu) with columns x, y, mu followed by
/// one column per tau whose header is the tau value.
inline io::Table rtable_to_table(const RTable& t) {
  io::Table out;
  out.comments.push_back(" rtable");
  out.columns = {"x", "y", "mu"};
  for (double tau : t.tau_axis) out.columns.push_back(io::format_double(tau));
  for (std::size_t ix = 0; ix < t.x_axis.size(); ++ix)
    for (std::size_t iy = 0; iy < t.y_axis.size(); ++iy)
      for (std::size_t i = 0; i < t.mu_axis.size(); ++i) {
        std::vector<double> row{t.x_axis[ix], t.y_axis[iy], t.mu_axis[i]};
        for (std::size_t j = 0; j < t.tau_axis.size(); ++j) row.push_back(t.at(ix, iy)(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
        out.rows.push_back(std::move(row));
      }
  return out;
}

inline RTable rtable_from_table(const io::Table& table) {
  require(table.columns.size() > 3 && table.columns[0] == "x" && table.columns[1] == "y" &&
              table.columns[2] == "mu",
          ErrorKind::InvalidArgument, "not an r table: expected columns x,y,mu,<tau...>");
  RTable t;
  for (std::size_t c = 3; c < table.columns.size(); ++c) t.tau_axis.push_back(io::parse_double(table.columns[c]));
  auto add_unique = [](std::vector<double>& axis, double v) {
    if (std::find(axis.begin(), axis.end(), v) == axis.end()) axis.push_back(v);
  };
  for (const auto& row : table.rows) {
    add_unique(t.x_axis, row[0]);
    add_unique(t.y_axis, row[1]);
    add_unique(t.mu_axis, row[2]);
  }
  for (auto* axis : {&t.x_axis, &t.y_axis, &t.mu_axis}) std::sort(axis->begin(), axis->end());
  const auto nmu = static_cast<Eigen::Index>(t.mu_axis.size());
  const auto ntau = static_cast<Eigen::Index>(t.tau_axis.size());
  require(table.rows.size() == t.x_axis.size() * t.y_axis.size() * t.mu_axis.size(), ErrorKind::InvalidArgument,
          "r table is not a full lattice");
  t.values.assign(t.x_axis.size() * t.y_axis.size(), Eigen::MatrixXd::Constant(nmu, ntau, kNaN));
  auto index = [](const std::vector<double>& axis, double v) {
    return static_cast<std::size_t>(std::lower_bound(axis.begin(), axis.end(), v) - axis.begin());
  };
  for (const auto& row : table.rows) {
    auto& m = t.values[index(t.x_axis, row[0]) * t.y_axis.size() + index(t.y_axis, row[1])];
    const auto i = static_cast<Eigen::Index>(index(t.mu_axis, row[2]));
    for (Eigen::Index j = 0; j < ntau; ++j) m(i, j) = row[static_cast<std::size_t>(3 + j)];
  }
  t.validate();
  return t;
}

/// Loads `cache` when it exists, else builds the table and writes it there.
inline RTable load_or_build_rtable(const std::filesystem::path& cache, const Target& target,
                                   std::vector<double> x_axis, std::vector<double> y_axis,
                                   std::vector<double> mu_axis, std::vector<double> tau_axis, int threads = 0) {
  if (!cache.empty() && std::filesystem::exists(cache)) {
    RTable t = rtable_from_table(io::read_csv(cache));
    if (t.x_axis == x_axis && t.y_axis == y_axis && t.mu_axis == mu_axis && t.tau_axis == tau_axis) return t;
  }
  RTable t = build_rtable(target, std::move(x_axis), std::move(y_axis), std::move(mu_axis), std::move(tau_axis),
                          threads);
  if (!cache.empty()) io::write_csv(cache, rtable_to_table(t));
  return t;
}

using EnsembleState = std::vector<State>;

/// Uniform random states on the box [lo, hi] in every coordinate.
inline EnsembleState random_ensemble(std::size_t count, int dimension, double lo, double hi, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  EnsembleState out(count, State(dimension));
  for (auto& x : out)
    for (int i = 0; i < dimension; ++i) x[i] = dist(gen);
  return out;
}

/// Tabulated pulses ordered by ln(max_j r_j / min_j r_j) over the ensemble,
/// best first. Candidates where the r_j are not all finite and of one sign are
/// left out. Ties go to the smaller mu, then the smaller tau.
inline std::vector<Pulse> sync_ranking(const EnsembleState& ensemble, const RTable& table) {
  require(!ensemble.empty(), ErrorKind::InvalidArgument, "sync_select: empty ensemble");
  std::vector<Eigen::MatrixXd> per_cell;
  per_cell.reserve(ensemble.size());
  for (const auto& x : ensemble) per_cell.push_back(table.interpolate(x[0], x[1]));
  const auto nmu = static_cast<Eigen::Index>(table.mu_axis.size());
  const auto ntau = static_cast<Eigen::Index>(table.tau_axis.size());
  std::vector<std::pair<double, Pulse>> scored;
  for (Eigen::Index i = 0; i < nmu; ++i)
    for (Eigen::Index j = 0; j < ntau; ++j) {
      double lo = kInf, hi = 0.0;
      int sign = 0;
      bool valid = true;
      for (const auto& m : per_cell) {
        const double v = m(i, j);
        const int s = v > 0.0 ? 1 : (v < 0.0 ? -1 : 0);
        if (!std::isfinite(v) || s == 0 || (sign != 0 && s != sign)) {
          valid = false;
          break;
        }
        sign = s;
        lo = std::min(lo, std::abs(v));
        hi = std::max(hi, std::abs(v));
      }
      if (!valid) continue;
      scored.push_back({std::log(hi / lo),
                        Pulse{table.mu_axis[static_cast<std::size_t>(i)], table.tau_axis[static_cast<std::size_t>(j)]}});
    }
  // Lattice order is already (mu, tau) ascending, so a stable sort keeps the tie rule.
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first < b.first - 1e-12; });
  std::vector<Pulse> out;
  out.reserve(scored.size());
  for (const auto& [score, pulse] : scored) out.push_back(pulse);
  return out;
}

inline Pulse sync_select(const EnsembleState& ensemble, const RTable& table) {
  const auto ranked = sync_ranking(ensemble, table);
  if (ranked.empty()) fail(ErrorKind::NoValidCandidate, "sync_select: no tabulated pulse keeps r of one sign");
  return ranked.front();
}

/// (1/|lambda1|) ln(max_j |s_j| / min_j |s_j|).
inline double max_delay(const std::vector<double>& s1_values, double lambda1) {
  require(!s1_values.empty(), ErrorKind::InvalidArgument, "max_delay: no values");
  double lo = kInf, hi = 0.0;
  for (double v : s1_values) {
    if (!std::isfinite(v)) return kInf;
    lo = std::min(lo, std::abs(v));
    hi = std::max(hi, std::abs(v));
  }
  if (hi == 0.0) return 0.0;
  return std::log(hi / lo) / std::abs(lambda1);
}

struct SyncResult {
  std::vector<double> delays;
  std::vector<Pulse> pulses;
  std::vector<bool> skipped;
  std::vector<std::vector<double>> s1_values;  // per period, per cell
  EnsembleState final_states;
};

namespace detail {

// Applies the common pulse to every cell for one period and reports the
// delay at the end of it.
inline void sync_period(const Target& target, EnsembleState& states, const Pulse& pulse, double T_p,
                        const IntegratorConfig& cfg, SyncResult& out, int threads) {
  std::vector<double> s(states.size(), kNaN);
  parallel_for(
      states.size(),
      [&](std::size_t c) {
        states[c] = flow_at(target.model, states[c], pulse, T_p, cfg);
        s[c] = s1(target, states[c]).value;
      },
      threads);
  out.pulses.push_back(pulse);
  out.delays.push_back(max_delay(s, target.spectrum.lambda1()));
  out.s1_values.push_back(std::move(s));
}

}  // namespace detail

/// Delay predicted for the ensemble after `pulse`, from r evaluated at the
/// cells themselves. Mixed signs or escapes give +inf.
inline double predicted_delay(const Target& target, const EnsembleState& states, const Pulse& pulse,
                              int threads = 0) {
  std::vector<double> rv(states.size(), kNaN);
  parallel_for(
      states.size(), [&](std::size_t c) { rv[c] = r(target, states[c], pulse.mu, pulse.tau).value; }, threads);
  int sign = 0;
  for (double v : rv) {
    const int s = v > 0.0 ? 1 : (v < 0.0 ? -1 : 0);
    if (!std::isfinite(v) || s == 0 || (sign != 0 && s != sign)) return kInf;
    sign = s;
  }
  return max_delay(rv, target.spectrum.lambda1());
}

/// Closed-loop synchronization: each period observes all cells, picks the
/// common pulse from the table, applies it and free-runs to the period end.
/// With verify_candidates > 0, the best-ranked table choices are re-evaluated
/// at the observed cells and the first that shrinks the delay is applied; if
/// none does, no pulse is given, since free motion leaves the delay unchanged.
inline SyncResult synchronize(const Target& target, EnsembleState ensemble, double T_p, int N_p,
                              const RTable& table, const IntegratorConfig& cfg = {}, int threads = 0,
                              int verify_candidates = 200) {
  table.validate();
  require(N_p >= 1, ErrorKind::InvalidArgument, "synchronize: N_p must be >= 1");
  require(T_p >= table.tau_axis.back(), ErrorKind::InvalidArgument,
          "synchronize: T_p must be at least the largest tabulated tau");
  require(verify_candidates >= 0, ErrorKind::InvalidArgument, "synchronize: verify_candidates must be >= 0");
  SyncResult out;
  for (int p = 0; p < N_p; ++p) {
    const auto ranked = sync_ranking(ensemble, table);
    Pulse pulse;
    bool skipped = ranked.empty();
    if (!skipped && verify_candidates == 0) pulse = ranked.front();
    if (!skipped && verify_candidates > 0) {
      double current = kInf;
      if (!out.s1_values.empty()) {
        current = max_delay(out.s1_values.back(), target.spectrum.lambda1());
      } else {
        std::vector<double> s(ensemble.size(), kNaN);
        parallel_for(
            ensemble.size(), [&](std::size_t c) { s[c] = s1(target, ensemble[c]).value; }, threads);
        current = max_delay(s, target.spectrum.lambda1());
      }
      skipped = true;
      const auto n = std::min(ranked.size(), static_cast<std::size_t>(verify_candidates));
      for (std::size_t k = 0; k < n && skipped; ++k) {
        if (predicted_delay(target, ensemble, ranked[k], threads) < current) {
          pulse = ranked[k];
          skipped = false;
        }
      }
    }
    out.skipped.push_back(skipped);
    detail::sync_period(target, ensemble, pulse, T_p, cfg, out, threads);
  }
  out.final_states = std::move(ensemble);
  return out;
}

/// Open-loop baseline: the same pulse every period.
inline SyncResult periodic_baseline(const Target& target, EnsembleState ensemble, const Pulse& pulse, double T_p,
                                    int N_p, const IntegratorConfig& cfg = {}, int threads = 0) {
  pulse.validate();
  require(N_p >= 1, ErrorKind::InvalidArgument, "periodic_baseline: N_p must be >= 1");
  require(T_p >= pulse.tau, ErrorKind::InvalidArgument, "periodic_baseline: T_p shorter than the pulse");
  SyncResult out;
  for (int p = 0; p < N_p; ++p) {
    out.skipped.push_back(false);
    detail::sync_period(target, ensemble, pulse, T_p, cfg, out, threads);
  }
  out.final_states = std::move(ensemble);
  return out;
}

}  // namespace pulsekoop
