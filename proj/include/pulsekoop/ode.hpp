#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "pulsekoop/errors.hpp"

namespace pulsekoop {

using State = Eigen::VectorXd;

/// u(t) = mu for 0 <= t <= tau, zero afterwards.
struct Pulse {
  double mu = 0.0;
  double tau = 0.0;

  static constexpr Pulse zero() { return {}; }

  double energy() const { return mu * tau; }
  double input_at(double t) const { return (t >= 0.0 && t <= tau) ? mu : 0.0; }

  void validate() const {
    require(std::isfinite(mu) && std::isfinite(tau), ErrorKind::NonFinite, "pulse is not finite");
    require(mu >= 0.0, ErrorKind::InvalidArgument, "pulse magnitude must be >= 0");
    require(tau >= 0.0, ErrorKind::InvalidArgument, "pulse duration must be >= 0");
  }

  friend bool operator==(const Pulse&, const Pulse&) = default;
};

/// A piece of a piecewise-constant input: `value` holds from `start` until the
/// next segment begins.
struct InputSegment {
  double start = 0.0;
  double value = 0.0;
};

struct IntegratorConfig {
  double rel_tol = 1e-10;
  double abs_tol = 1e-12;
  double max_step = std::numeric_limits<double>::infinity();
  double divergence_norm_bound = 1e6;
  long max_steps = 5'000'000;
  /// Multiply abs_tol by the current max norm of the state. Useful when the
  /// state is a deviation that decays over many orders of magnitude.
  bool abs_tol_scales_with_state = false;

  void validate() const {
    require(rel_tol >= 1e-14 && rel_tol <= 1e-6, ErrorKind::InvalidArgument,
            "rel_tol must lie in [1e-14, 1e-6]");
    require(abs_tol > 0.0, ErrorKind::InvalidArgument, "abs_tol must be > 0");
    require(max_step > 0.0, ErrorKind::InvalidArgument, "max_step must be > 0");
    require(divergence_norm_bound > 0.0, ErrorKind::InvalidArgument,
            "divergence_norm_bound must be > 0");
  }
};

struct Trajectory {
  std::vector<double> times;
  std::vector<State> states;
  std::optional<Pulse> input_used;  // empty for inputs that are not a single pulse

  std::size_t size() const { return times.size(); }
  const State& final_state() const { return states.back(); }
};

/// Dormand-Prince 5(4) with FSAL and PI step control. The field is any callable
/// `void(const State& x, double u, State& dxdt)`. Input changes go through
/// set_input(), which drops the cached derivative so the step mesh restarts at
/// the discontinuity.
template <class Field>
class Dopri5 {
 public:
  Dopri5(const Field& field, const State& x0, double t0, const IntegratorConfig& cfg)
      : field_(field), cfg_(cfg), t_(t0), x_(x0) {
    const auto n = x0.size();
    for (auto* v : {&k1_, &k2_, &k3_, &k4_, &k5_, &k6_, &k7_, &stage_, &x_new_}) v->resize(n);
    require(x0.allFinite(), ErrorKind::NonFinite, "initial state is not finite");
    check_bounds(x_);
  }

  double time() const { return t_; }
  const State& state() const { return x_; }
  long steps_taken() const { return steps_; }

  void set_input(double u) {
    require(std::isfinite(u), ErrorKind::NonFinite, "input is not finite");
    if (u != u_ || !have_k1_) {
      u_ = u;
      have_k1_ = false;
    }
  }

  void advance_to(double t_end) {
    advance_to(t_end, [](double, const State&) {});
  }

  /// Steps until exactly t_end. `observer(t, x)` sees every accepted step.
  template <class Observer>
  void advance_to(double t_end, Observer&& observer) {
    if (t_end <= t_) return;
    if (!have_k1_) {
      field_(x_, u_, k1_);
      ++evals_;
      have_k1_ = true;
      if (h_ <= 0.0) h_ = initial_step(t_end - t_);
    }
    double facold = 1e-4;
    bool last_rejected = false;
    while (t_ < t_end) {
      if (++steps_ > cfg_.max_steps)
        fail(ErrorKind::StepUnderflow, "step budget exhausted at t=" + std::to_string(t_));
      double h = std::min(h_, cfg_.max_step);
      bool clipped = false;
      if (t_ + h >= t_end || t_ + 1.01 * h >= t_end) {
        h = t_end - t_;
        clipped = true;
      }
      if (h < 10.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(t_)))
        fail(ErrorKind::StepUnderflow, "step size underflow at t=" + std::to_string(t_));

      const double err = attempt(h);
      if (!std::isfinite(err)) {
        h_ = 0.1 * h;
        last_rejected = true;
        if (h_ < 1e-12 * std::max(1.0, std::abs(t_)))
          fail(ErrorKind::NonFinite, "vector field produced non-finite values at t=" +
                                         std::to_string(t_));
        continue;
      }
      const double fac11 = std::pow(err, kExpo1);
      if (err <= 1.0) {
        double fac = fac11 / std::pow(facold, kBeta);
        fac = std::clamp(fac / kSafe, 1.0 / kFacMax, 1.0 / kFacMin);
        double h_next = h / fac;
        if (last_rejected) h_next = std::min(h_next, h);
        facold = std::max(err, 1e-4);
        t_ = clipped ? t_end : t_ + h;
        x_.swap(x_new_);
        k1_.swap(k7_);
        check_bounds(x_);
        observer(t_, x_);
        // A clipped final step says nothing about the natural step size.
        if (!clipped) h_ = h_next;
        last_rejected = false;
      } else {
        h_ = h / std::min(1.0 / kFacMin, fac11 / kSafe);
        last_rejected = true;
      }
    }
  }

 private:
  static constexpr double kSafe = 0.9;
  static constexpr double kFacMin = 0.2;  // step may grow by at most 5x
  static constexpr double kFacMax = 10.0; // and shrink by at most 10x
  static constexpr double kBeta = 0.04;
  static constexpr double kExpo1 = 0.2 - kBeta * 0.75;

  double error_scale(double a, double b) const {
    return abs_floor_ + cfg_.rel_tol * std::max(std::abs(a), std::abs(b));
  }

  void update_floor() {
    abs_floor_ = cfg_.abs_tol;
    if (cfg_.abs_tol_scales_with_state)
      abs_floor_ *= std::max(x_.lpNorm<Eigen::Infinity>(), std::numeric_limits<double>::min());
  }

  double rms_scaled(const State& v, const State& ref) const {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double s = v[i] / error_scale(ref[i], ref[i]);
      acc += s * s;
    }
    return std::sqrt(acc / static_cast<double>(v.size()));
  }

  double initial_step(double span) {
    update_floor();
    const double d0 = rms_scaled(x_, x_);
    const double d1 = rms_scaled(k1_, x_);
    double h0 = (d0 < 1e-10 || d1 < 1e-10) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min({h0, span, cfg_.max_step});
    for (Eigen::Index i = 0; i < x_.size(); ++i) stage_[i] = x_[i] + h0 * k1_[i];
    field_(stage_, u_, k2_);
    ++evals_;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < x_.size(); ++i) {
      const double s = (k2_[i] - k1_[i]) / error_scale(x_[i], x_[i]);
      acc += s * s;
    }
    const double d2 = std::sqrt(acc / static_cast<double>(x_.size())) / h0;
    const double dm = std::max(d1, d2);
    const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
    return std::min({100.0 * h0, h1, span, cfg_.max_step});
  }

  // One trial step of size h from (t_, x_); fills x_new_ and k7_ and returns the
  // scaled error norm.
  double attempt(double h) {
    const Eigen::Index n = x_.size();
    update_floor();
    auto combine = [&](std::initializer_list<std::pair<double, const State*>> terms) {
      for (Eigen::Index i = 0; i < n; ++i) {
        double acc = 0.0;
        for (const auto& [c, k] : terms) acc += c * (*k)[i];
        stage_[i] = x_[i] + h * acc;
      }
    };
    combine({{1.0 / 5.0, &k1_}});
    field_(stage_, u_, k2_);
    combine({{3.0 / 40.0, &k1_}, {9.0 / 40.0, &k2_}});
    field_(stage_, u_, k3_);
    combine({{44.0 / 45.0, &k1_}, {-56.0 / 15.0, &k2_}, {32.0 / 9.0, &k3_}});
    field_(stage_, u_, k4_);
    combine({{19372.0 / 6561.0, &k1_},
             {-25360.0 / 2187.0, &k2_},
             {64448.0 / 6561.0, &k3_},
             {-212.0 / 729.0, &k4_}});
    field_(stage_, u_, k5_);
    combine({{9017.0 / 3168.0, &k1_},
             {-355.0 / 33.0, &k2_},
             {46732.0 / 5247.0, &k3_},
             {49.0 / 176.0, &k4_},
             {-5103.0 / 18656.0, &k5_}});
    field_(stage_, u_, k6_);
    for (Eigen::Index i = 0; i < n; ++i) {
      x_new_[i] = x_[i] + h * (35.0 / 384.0 * k1_[i] + 500.0 / 1113.0 * k3_[i] +
                               125.0 / 192.0 * k4_[i] - 2187.0 / 6784.0 * k5_[i] +
                               11.0 / 84.0 * k6_[i]);
    }
    field_(x_new_, u_, k7_);
    evals_ += 6;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double e = h * (71.0 / 57600.0 * k1_[i] - 71.0 / 16695.0 * k3_[i] +
                            71.0 / 1920.0 * k4_[i] - 17253.0 / 339200.0 * k5_[i] +
                            22.0 / 525.0 * k6_[i] - 1.0 / 40.0 * k7_[i]);
      const double s = e / error_scale(x_[i], x_new_[i]);
      acc += s * s;
    }
    if (!x_new_.allFinite()) return std::numeric_limits<double>::quiet_NaN();
    return std::sqrt(acc / static_cast<double>(n));
  }

  void check_bounds(const State& x) const {
    if (!x.allFinite()) fail(ErrorKind::NonFinite, "state became non-finite");
    if (x.cwiseAbs().maxCoeff() > cfg_.divergence_norm_bound)
      fail(ErrorKind::Divergence, "state left the modeled region at t=" + std::to_string(t_));
  }

  const Field& field_;
  IntegratorConfig cfg_;
  double t_ = 0.0;
  double u_ = 0.0;
  double h_ = 0.0;
  double abs_floor_ = 0.0;
  bool have_k1_ = false;
  long steps_ = 0;
  long evals_ = 0;
  State x_, k1_, k2_, k3_, k4_, k5_, k6_, k7_, stage_, x_new_;
};

namespace detail {

inline std::vector<InputSegment> pulse_segments(const Pulse& pulse) {
  if (pulse.tau > 0.0 && pulse.mu != 0.0) return {{0.0, pulse.mu}, {pulse.tau, 0.0}};
  return {{0.0, 0.0}};
}

inline void validate_segments(std::span<const InputSegment> segments) {
  require(!segments.empty() && segments.front().start == 0.0, ErrorKind::InvalidArgument,
          "input schedule must start at t = 0");
  for (std::size_t i = 0; i < segments.size(); ++i) {
    require(std::isfinite(segments[i].value), ErrorKind::NonFinite, "input value is not finite");
    if (i > 0)
      require(segments[i].start > segments[i - 1].start, ErrorKind::InvalidArgument,
              "input segments must have increasing start times");
  }
}

}  // namespace detail

/// Integrates under a piecewise-constant input; the mesh restarts at every
/// segment boundary.
template <class Field, class Observer>
State integrate_schedule(const Field& field, const State& x0, std::span<const InputSegment> segments,
                         double t_end, const IntegratorConfig& cfg, Observer&& observer) {
  cfg.validate();
  require(std::isfinite(t_end) && t_end >= 0.0, ErrorKind::InvalidArgument, "t_end must be >= 0");
  detail::validate_segments(segments);
  Dopri5<Field> stepper(field, x0, 0.0, cfg);
  observer(0.0, stepper.state());
  for (std::size_t i = 0; i < segments.size() && segments[i].start < t_end; ++i) {
    const double stop = (i + 1 < segments.size()) ? std::min(segments[i + 1].start, t_end) : t_end;
    stepper.set_input(segments[i].value);
    stepper.advance_to(stop, observer);
  }
  return stepper.state();
}

template <class Field>
State flow_schedule(const Field& field, const State& x0, std::span<const InputSegment> segments,
                    double t_end, const IntegratorConfig& cfg) {
  return integrate_schedule(field, x0, segments, t_end, cfg, [](double, const State&) {});
}

/// Numerical flow phi(t_end, x0, mu*h(., tau)) with every accepted step recorded.
template <class Field>
Trajectory integrate(const Field& field, const State& x0, const Pulse& pulse, double t_end,
                     const IntegratorConfig& cfg = {}) {
  pulse.validate();
  Trajectory traj;
  traj.input_used = pulse;
  const auto segments = detail::pulse_segments(pulse);
  integrate_schedule(field, x0, segments, t_end, cfg, [&](double t, const State& x) {
    traj.times.push_back(t);
    traj.states.push_back(x);
  });
  return traj;
}

/// Final state of integrate() without recording the mesh.
template <class Field>
State flow_at(const Field& field, const State& x0, const Pulse& pulse, double t,
              const IntegratorConfig& cfg = {}) {
  pulse.validate();
  const auto segments = detail::pulse_segments(pulse);
  return flow_schedule(field, x0, segments, t, cfg);
}

}  // namespace pulsekoop
