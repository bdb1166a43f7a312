// Batch experiment driver: `pulsekoop run config.json [--output DIR] [--threads N] [--seed S]`.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pulsekoop/pulsekoop.hpp"

namespace pk = pulsekoop;
namespace fs = std::filesystem;
using nlohmann::json;

#ifndef PULSEKOOP_VERSION
#define PULSEKOOP_VERSION "unknown"
#endif

namespace {

enum Exit { kOk = 0, kValidation = 2, kNumerical = 3, kInfeasible = 4 };

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

[[noreturn]] void bad(const std::string& path, const std::string& msg) { throw ConfigError(path + ": " + msg); }

// Typed accessors that name the offending field.
class Field {
 public:
  Field(const json& j, std::string path) : j_(j), path_(std::move(path)) {}

  bool has(const std::string& key) const { return j_.is_object() && j_.contains(key) && !j_[key].is_null(); }
  Field at(const std::string& key) const {
    if (!has(key)) bad(path_ + "." + key, "required field is missing");
    return {j_[key], path_ + "." + key};
  }
  const json& raw() const { return j_; }
  const std::string& path() const { return path_; }

  double number() const {
    if (!j_.is_number()) bad(path_, "expected a number");
    return j_.get<double>();
  }
  double number(const std::string& key, std::optional<double> fallback = std::nullopt) const {
    if (!has(key)) {
      if (fallback) return *fallback;
      bad(path_ + "." + key, "required field is missing");
    }
    return at(key).number();
  }
  double positive(const std::string& key, std::optional<double> fallback = std::nullopt) const {
    const double v = number(key, fallback);
    if (!(v > 0.0) || !std::isfinite(v)) bad(path_ + "." + key, "must be a finite number > 0");
    return v;
  }
  double nonneg(const std::string& key, std::optional<double> fallback = std::nullopt) const {
    const double v = number(key, fallback);
    if (!(v >= 0.0) || !std::isfinite(v)) bad(path_ + "." + key, "must be a finite number >= 0");
    return v;
  }
  int integer(const std::string& key, std::optional<int> fallback = std::nullopt) const {
    if (!has(key)) {
      if (fallback) return *fallback;
      bad(path_ + "." + key, "required field is missing");
    }
    const auto& v = j_[key];
    if (!v.is_number_integer()) bad(path_ + "." + key, "expected an integer");
    return v.get<int>();
  }
  std::string string(const std::string& key, std::optional<std::string> fallback = std::nullopt) const {
    if (!has(key)) {
      if (fallback) return *fallback;
      bad(path_ + "." + key, "required field is missing");
    }
    if (!j_[key].is_string()) bad(path_ + "." + key, "expected a string");
    return j_[key].get<std::string>();
  }
  std::vector<double> vector() const {
    if (!j_.is_array()) bad(path_, "expected an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < j_.size(); ++i) {
      if (!j_[i].is_number()) bad(path_ + "[" + std::to_string(i) + "]", "expected a number");
      out.push_back(j_[i].get<double>());
    }
    return out;
  }

  /// Either an explicit ascending array or {"lo", "hi", "n"}.
  std::vector<double> axis(const std::string& key) const {
    const Field f = at(key);
    std::vector<double> out;
    if (f.raw().is_array()) {
      out = f.vector();
    } else if (f.raw().is_object()) {
      const double lo = f.number("lo"), hi = f.number("hi");
      const int n = f.integer("n");
      if (n < 1) bad(f.path() + ".n", "must be >= 1");
      if (n > 1 && !(hi > lo)) bad(f.path(), "hi must exceed lo");
      out = pk::detail::linspace(lo, hi, n);
    } else {
      bad(f.path(), "expected an array or {lo, hi, n}");
    }
    if (out.empty()) bad(f.path(), "axis is empty");
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (!std::isfinite(out[i]) || out[i] < 0.0) bad(f.path(), "entries must be finite and >= 0");
      if (i > 0 && !(out[i] > out[i - 1])) bad(f.path(), "entries must be strictly increasing");
    }
    return out;
  }

 private:
  const json& j_;
  std::string path_;
};

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Model and target setup

struct ModelSetup {
  pk::ModelSpec model = pk::ModelSpec::linear_test();
  pk::State guess;
  std::vector<pk::State> other_guesses;
};

pk::State default_guess(const pk::ModelSpec& m, bool high) {
  pk::State g(m.dimension());
  switch (m.id()) {
    case pk::ModelId::Repressilator:
      for (int i = 0; i < m.dimension(); ++i) g[i] = ((i % 2 == 0) == high) ? 20.0 : 1.0;
      break;
    case pk::ModelId::FitzHughNagumo: g << 0.1, 0.1; break;
    case pk::ModelId::LinearTest: g << 3.0, -2.0; break;
  }
  return g;
}

pk::State parse_state(const Field& f, int n) {
  const auto v = f.vector();
  if (static_cast<int>(v.size()) != n)
    bad(f.path(), "expected " + std::to_string(n) + " entries, got " + std::to_string(v.size()));
  return Eigen::Map<const Eigen::VectorXd>(v.data(), n);
}

pk::ParamMap parse_overrides(const Field& f) {
  pk::ParamMap out;
  if (!f.raw().is_object()) bad(f.path(), "expected an object of parameter values");
  for (const auto& [k, v] : f.raw().items()) {
    if (!v.is_number()) bad(f.path() + "." + k, "expected a number");
    out[k] = v.get<double>();
  }
  return out;
}

ModelSetup parse_model(const Field& root, const std::string& key = "model") {
  const Field m = root.at(key);
  ModelSetup s;
  try {
    s.model = pk::ModelSpec::make(pk::parse_model_id(m.string("id")));
    if (m.has("overrides")) s.model = s.model.with_params(parse_overrides(m.at("overrides")));
  } catch (const pk::Error& e) {
    bad(m.path(), e.what());
  }
  const int n = s.model.dimension();
  s.guess = default_guess(s.model, true);
  if (s.model.id() == pk::ModelId::Repressilator) s.other_guesses.push_back(default_guess(s.model, false));
  if (root.has("target")) {
    const Field t = root.at("target");
    if (t.has("guess")) s.guess = parse_state(t.at("guess"), n);
    if (t.has("other_guesses")) {
      s.other_guesses.clear();
      const Field og = t.at("other_guesses");
      if (!og.raw().is_array()) bad(og.path(), "expected an array of states");
      for (std::size_t i = 0; i < og.raw().size(); ++i)
        s.other_guesses.push_back(parse_state(Field(og.raw()[i], og.path() + "[" + std::to_string(i) + "]"), n));
    }
  }
  return s;
}

pk::EigenfunctionConfig parse_tolerances(const Field& root) {
  pk::EigenfunctionConfig cfg;
  if (!root.has("tolerances")) return cfg;
  const Field t = root.at("tolerances");
  cfg.integrator.rel_tol = t.positive("integrator_rel_tol", cfg.integrator.rel_tol);
  cfg.integrator.abs_tol = t.positive("integrator_abs_tol", cfg.integrator.abs_tol);
  cfg.rel_tol = t.positive("s1_rel_tol", cfg.rel_tol);
  cfg.abs_tol = t.positive("s1_abs_tol", cfg.abs_tol);
  cfg.escape_radius = t.positive("escape_radius", cfg.escape_radius);
  try {
    cfg.integrator.validate();
  } catch (const pk::Error& e) {
    bad(t.path(), e.what());
  }
  return cfg;
}

pk::Target make_target(const ModelSetup& s, const pk::EigenfunctionConfig& cfg) {
  return pk::make_target(s.model, s.guess, s.other_guesses, cfg);
}

/// "x_star", "other" (first registered other equilibrium) or an explicit state.
struct StateRef {
  std::string kind = "explicit";
  pk::State explicit_state;
};

StateRef parse_state_ref(const Field& root, const std::string& key, int n, const std::string& fallback) {
  StateRef ref;
  if (!root.has(key)) {
    ref.kind = fallback;
    return ref;
  }
  const Field f = root.at(key);
  if (f.raw().is_string()) {
    ref.kind = f.raw().get<std::string>();
    if (ref.kind != "x_star" && ref.kind != "other") bad(f.path(), "expected \"x_star\", \"other\" or a state");
    return ref;
  }
  ref.explicit_state = parse_state(f, n);
  return ref;
}

pk::State resolve(const StateRef& ref, const pk::Target& t) {
  if (ref.kind == "x_star") return t.spectrum.x_star;
  if (ref.kind == "other") {
    pk::require(!t.cfg.other_equilibria.empty(), pk::ErrorKind::InvalidArgument,
                "no other equilibrium is registered for this model");
    return t.cfg.other_equilibria.front();
  }
  return ref.explicit_state;
}

// ---------------------------------------------------------------------------
// Output

struct Output {
  fs::path dir;
  json meta;
  std::vector<std::pair<fs::path, pk::io::Table>> tables;

  void add(const std::string& name, pk::io::Table t, const json& extra = json::object()) {
    json m = meta;
    for (const auto& [k, v] : extra.items()) m[k] = v;
    t.comments.insert(t.comments.begin(), " " + m.dump());
    tables.emplace_back(dir / name, std::move(t));
  }
  void flush() const {
    for (const auto& [path, t] : tables) pk::io::write_csv(path, t);
  }
};

std::string stem_of(const std::string& file) { return fs::path(file).stem().string(); }

pk::io::Table trajectory_table(const pk::Trajectory& traj, const std::vector<pk::AppliedSegment>& schedule) {
  pk::io::Table t;
  t.columns = {"t"};
  const auto n = traj.states.empty() ? 0 : traj.states.front().size();
  for (Eigen::Index i = 0; i < n; ++i) t.columns.push_back("x" + std::to_string(i + 1));
  t.columns.push_back("u");
  for (std::size_t k = 0; k < traj.times.size(); ++k) {
    std::vector<double> row{traj.times[k]};
    for (Eigen::Index i = 0; i < n; ++i) row.push_back(traj.states[k][i]);
    double u = 0.0;
    for (const auto& s : schedule)
      if (traj.times[k] >= s.start && traj.times[k] < s.end) u = s.mu;
    row.push_back(u);
    t.rows.push_back(std::move(row));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Commands. Each parses everything first and returns a runner, so that a bad
// config never reaches the numerics.

using Runner = std::function<int(Output&)>;

Runner cmd_simulate(const Field& c) {
  const ModelSetup s = parse_model(c);
  const pk::Pulse pulse{c.at("pulse").nonneg("mu"), c.at("pulse").nonneg("tau")};
  const double t_end = c.positive("t_end");
  if (t_end < pulse.tau) bad(c.path() + ".t_end", "must be >= pulse.tau");
  const auto cfg = parse_tolerances(c);
  const StateRef x0 = parse_state_ref(c, "x0", s.model.dimension(), "other");
  const std::string out = c.string("output", "simulate.csv");
  return [=](Output& o) {
    const auto target = make_target(s, cfg);
    const auto traj = pk::integrate(s.model, resolve(x0, target), pulse, t_end, cfg.integrator);
    std::vector<pk::AppliedSegment> sched;
    if (pulse.tau > 0) sched.push_back({0.0, pulse.tau, pulse.mu});
    o.add(out, trajectory_table(traj, sched));
    return kOk;
  };
}

Runner cmd_spectrum(const Field& c) {
  const ModelSetup s = parse_model(c);
  const auto cfg = parse_tolerances(c);
  const std::string out = c.string("output", "spectrum.csv");
  return [=](Output& o) {
    const auto t = make_target(s, cfg);
    pk::io::Table table;
    table.columns = {"index", "lambda_re", "lambda_im", "x_star", "v1", "w1"};
    for (std::size_t i = 0; i < t.spectrum.lambda.size(); ++i) {
      const auto k = static_cast<Eigen::Index>(i);
      table.rows.push_back({static_cast<double>(i + 1), t.spectrum.lambda[i].real(), t.spectrum.lambda[i].imag(),
                            t.spectrum.x_star[k], t.spectrum.v1[k], t.spectrum.w1[k]});
    }
    o.add(out, table, {{"warnings", t.spectrum.warnings}});
    return kOk;
  };
}

Runner cmd_rgrid(const Field& c) {
  const ModelSetup s = parse_model(c);
  const auto cfg = parse_tolerances(c);
  const auto mu = c.axis("mu_axis");
  const auto tau = c.axis("tau_axis");
  const double eps = c.positive("epsilon", 1e-2);
  const StateRef x = parse_state_ref(c, "x", s.model.dimension(), "other");
  const std::string out = c.string("output", "rgrid.csv");
  return [=](Output& o) {
    const auto t = make_target(s, cfg);
    const auto grid = pk::r_grid(s.model, t.spectrum, resolve(x, t), mu, tau, t.cfg);
    pk::io::Table table;
    table.columns = {"mu", "tau", "r", "T_conv", "energy"};
    for (std::size_t i = 0; i < mu.size(); ++i)
      for (std::size_t j = 0; j < tau.size(); ++j) {
        const double rv = grid(i, j);
        const double tc = std::isfinite(rv) && rv != 0.0 ? pk::convergence_time(rv, tau[j], eps, t.spectrum.lambda1())
                                                         : pk::kNaN;
        table.rows.push_back({mu[i], tau[j], rv, tc, mu[i] * tau[j]});
      }
    o.add(out, table, {{"epsilon", eps}, {"lambda1", t.spectrum.lambda1()}});
    return kOk;
  };
}

Runner cmd_levelset(const Field& c) {
  const ModelSetup s = parse_model(c);
  const auto cfg = parse_tolerances(c);
  const double alpha = c.number("alpha");
  const auto mu = c.axis("mu_axis");
  const Field br = c.at("tau_bracket");
  const auto bracket = br.vector();
  if (bracket.size() != 2 || !(bracket[0] >= 0.0) || !(bracket[1] > bracket[0]))
    bad(br.path(), "expected [lo, hi] with 0 <= lo < hi");
  const double tol = c.positive("tol_tau", 1e-6);
  const StateRef x = parse_state_ref(c, "x", s.model.dimension(), "other");
  const std::string out = c.string("output", "levelset.csv");
  return [=](Output& o) {
    const auto t = make_target(s, cfg);
    const auto ls = pk::level_set(s.model, t.spectrum, resolve(x, t), alpha, mu, {bracket[0], bracket[1]}, tol, t.cfg);
    pk::io::Table table;
    table.columns = {"mu", "tau", "bracket_width", "r"};
    for (const auto& p : ls.points) table.rows.push_back({p.mu, p.tau, p.width, p.r});
    o.add(out, table, {{"alpha", alpha}});
    return kOk;
  };
}

pk::io::Table optimize_table(const pk::OptimizeResult& r) {
  pk::io::Table t;
  t.columns = {"mu_star", "tau_star", "r_star", "gamma_star", "T_conv", "isostable_active", "energy_active",
               "feasible"};
  t.rows.push_back({r.mu_star, r.tau_star, r.r_star, r.gamma_star, r.T_conv, double(r.isostable_active),
                    double(r.energy_active), double(r.feasible)});
  return t;
}

Runner cmd_optimize(const Field& c) {
  const ModelSetup s = parse_model(c);
  const auto cfg = parse_tolerances(c);
  const double eps = c.positive("epsilon");
  const double emax = c.positive("E_max");
  const auto mu = c.axis("mu_axis");
  const std::string mode = c.string("mode", "boundary");
  if (mode != "boundary" && mode != "grid" && mode != "tau_fixed")
    bad(c.path() + ".mode", "expected boundary, grid or tau_fixed");
  pk::OptimizeOptions opt;
  std::vector<double> tau_axis;
  double tau_fixed = 0.0;
  if (mode == "boundary") {
    opt.tau_min = c.nonneg("tau_min", 0.0);
    opt.tau_max = c.positive("tau_max");
    if (!(opt.tau_max > opt.tau_min)) bad(c.path() + ".tau_max", "must exceed tau_min");
    opt.tol_tau = c.positive("tol_tau", opt.tol_tau);
  } else if (mode == "grid") {
    tau_axis = c.axis("tau_axis");
  } else {
    tau_fixed = c.positive("tau");
  }
  const StateRef x = parse_state_ref(c, "x", s.model.dimension(), "other");
  const std::string out = c.string("output", "optimize.csv");
  return [=](Output& o) {
    const auto t = make_target(s, cfg);
    const pk::State x0 = resolve(x, t);
    pk::OptimizeResult res;
    if (mode == "boundary")
      res = pk::optimize(s.model, t.spectrum, x0, eps, emax, mu, t.cfg, opt);
    else if (mode == "grid")
      res = pk::optimize_grid(s.model, t.spectrum, x0, eps, emax, mu, tau_axis, t.cfg);
    else
      res = pk::optimize_tau_fixed(s.model, t.spectrum, x0, eps, emax, tau_fixed, mu, t.cfg);
    o.add(out, optimize_table(res), {{"mode", mode}});
    return res.feasible ? kOk : kInfeasible;
  };
}

pk::io::Table epochs_table(const pk::SwitchOutcome& so) {
  pk::io::Table t;
  t.columns = {"time", "mu", "tau_remaining", "budget_remaining", "r_planned", "s1_true", "energy_spent", "success"};
  double spent = 0.0;
  for (std::size_t k = 0; k < so.epochs.size(); ++k) {
    const auto& e = so.epochs[k];
    t.rows.push_back({e.time, e.mu, e.tau_remaining, e.budget_remaining, e.r_planned, e.s1_true, spent, 0.0});
    const double next = k + 1 < so.epochs.size() ? so.epochs[k + 1].time : e.time + e.tau_remaining;
    spent += e.mu * (next - e.time);
  }
  t.rows.push_back({so.trajectory.times.back(), 0.0, 0.0, pk::kNaN, pk::kNaN, so.final_s1, so.energy_spent,
                    double(so.success)});
  return t;
}

// Nominal planning shared by both switching commands: an explicit pulse, or
// the fixed-duration line search on the nominal model.
struct Plan {
  std::optional<pk::Pulse> pulse;
  double tau = 20.0;
  std::vector<double> mu_axis;
};

Plan parse_plan(const Field& c, double E_max_default) {
  (void)E_max_default;
  Plan p;
  if (c.has("pulse")) {
    p.pulse = pk::Pulse{c.at("pulse").nonneg("mu"), c.at("pulse").positive("tau")};
    if (c.has("mu_grid")) p.mu_axis = c.axis("mu_grid");
    return p;
  }
  const Field pl = c.at("plan");
  p.tau = pl.positive("tau");
  p.mu_axis = pl.axis("mu_axis");
  return p;
}

pk::Pulse resolve_plan(const Plan& p, const pk::Target& nominal, const pk::State& x, double eps, double emax) {
  if (p.pulse) return *p.pulse;
  const auto res = pk::optimize_tau_fixed(nominal.model, nominal.spectrum, x, eps, emax, p.tau, p.mu_axis, nominal.cfg);
  pk::require(res.feasible, pk::ErrorKind::NoValidCandidate, "nominal planning found no mu with r < 0");
  return {res.mu_star, res.tau_star};
}

Runner cmd_switch(const Field& c, bool closed) {
  const ModelSetup nominal = parse_model(c);
  ModelSetup truth = nominal;
  if (c.has("true_overrides")) {
    try {
      truth.model = nominal.model.with_params(parse_overrides(c.at("true_overrides")));
    } catch (const pk::Error& e) {
      bad(c.path() + ".true_overrides", e.what());
    }
  }
  const auto cfg = parse_tolerances(c);
  const double eps = c.positive("epsilon", 1e-2);
  const double emax = c.positive("E_max", 100.0);
  const double horizon = c.positive("horizon", 60.0);
  const Plan plan = parse_plan(c, emax);
  double t_samp = 0.0;
  if (closed) {
    t_samp = c.positive("t_samp");
    if (plan.mu_axis.empty()) bad(c.path() + ".mu_grid", "closed loop needs a magnitude grid");
    const double tau0 = plan.pulse ? plan.pulse->tau : plan.tau;
    const double k = tau0 / t_samp;
    if (std::abs(k - std::round(k)) > 1e-9 * std::max(1.0, k))
      bad(c.path() + ".t_samp", "pulse duration must be an integer multiple of t_samp");
  }
  if (horizon < (plan.pulse ? plan.pulse->tau : plan.tau)) bad(c.path() + ".horizon", "shorter than the pulse");
  const std::string out = c.string("output", closed ? "switch_closed.csv" : "switch_open.csv");
  return [=](Output& o) {
    const auto nom = make_target(nominal, cfg);
    const auto tru = make_target(truth, cfg);
    pk::require(!tru.cfg.other_equilibria.empty(), pk::ErrorKind::InvalidArgument,
                "switching needs a second stable equilibrium to start from");
    const pk::State x0 = tru.cfg.other_equilibria.front();
    const pk::State x0_nominal = nom.cfg.other_equilibria.front();
    const pk::Pulse p0 = resolve_plan(plan, nom, x0_nominal, eps, emax);
    pk::SwitchOutcome so;
    if (closed) {
      pk::ClosedLoopConfig cl;
      cl.t_samp = t_samp;
      cl.E_max = emax;
      cl.epsilon = eps;
      cl.mu_grid = plan.mu_axis;
      cl.tau0 = p0.tau;
      cl.mu0 = p0.mu;
      cl.horizon = horizon;
      cl.integrator = cfg.integrator;
      cl.integrator.abs_tol_scales_with_state = false;
      so = pk::closed_loop_switch(tru, nom, x0, cl);
    } else {
      pk::IntegratorConfig ic = cfg.integrator;
      ic.abs_tol_scales_with_state = false;
      so = pk::open_loop_switch(tru, p0, x0, eps, horizon, ic);
      so.epochs.push_back({0.0, p0.mu, p0.tau, emax, pk::kNaN, pk::kNaN, false});
    }
    const json extra = {{"success", so.success}, {"energy_spent", so.energy_spent}, {"peak_x1", so.peak_x1},
                        {"mu0", p0.mu}, {"tau0", p0.tau}};
    o.add(out, epochs_table(so), extra);
    o.add(stem_of(out) + "_trajectory.csv", trajectory_table(so.trajectory, so.applied_schedule), extra);
    return kOk;
  };
}

Runner cmd_sync(const Field& c, std::optional<std::uint64_t> seed_override) {
  const ModelSetup s = parse_model(c);
  if (s.model.dimension() != 2) bad(c.path() + ".model", "sync needs a planar model");
  const auto cfg = parse_tolerances(c);
  const double T_p = c.positive("T_p");
  const int N_p = c.integer("N_p");
  if (N_p < 1) bad(c.path() + ".N_p", "must be >= 1");
  const Field ens = c.at("ensemble");
  const int count = ens.integer("count");
  if (count < 2) bad(ens.path() + ".count", "must be >= 2");
  const double lo = ens.number("lo"), hi = ens.number("hi");
  if (!(hi > lo)) bad(ens.path(), "hi must exceed lo");
  const std::uint64_t seed = seed_override ? *seed_override : static_cast<std::uint64_t>(c.integer("seed", 0));
  const Field tab = c.at("rtable");
  std::string rtable_input;
  std::vector<double> xa, ya, mu, tau;
  if (tab.has("input")) {
    rtable_input = tab.string("input");
  } else {
    xa = tab.axis("x_axis");
    ya = tab.axis("y_axis");
    mu = tab.axis("mu_axis");
    tau = tab.axis("tau_axis");
    if (T_p < tau.back()) bad(c.path() + ".T_p", "must be >= the largest tabulated tau");
  }
  const std::string cache = tab.string("cache", "");
  std::optional<pk::Pulse> baseline;
  if (c.has("baseline")) baseline = pk::Pulse{c.at("baseline").nonneg("mu"), c.at("baseline").nonneg("tau")};
  if (baseline && T_p < baseline->tau) bad(c.path() + ".baseline.tau", "exceeds T_p");
  const int verify = c.integer("verify_candidates", 200);
  if (verify < 0) bad(c.path() + ".verify_candidates", "must be >= 0");
  const std::string out = c.string("output", "sync.csv");
  return [=](Output& o) {
    const auto t = make_target(s, cfg);
    pk::RTable table = rtable_input.empty()
                           ? pk::load_or_build_rtable(cache, t, xa, ya, mu, tau)
                           : pk::rtable_from_table(pk::io::read_csv(rtable_input));
    pk::require(T_p >= table.tau_axis.back(), pk::ErrorKind::InvalidArgument, "T_p below the largest tabulated tau");
    const auto ensemble0 = pk::random_ensemble(static_cast<std::size_t>(count), 2, lo, hi, seed);
    const auto res = pk::synchronize(t, ensemble0, T_p, N_p, table, cfg.integrator, 0, verify);
    std::optional<pk::SyncResult> base;
    if (baseline) base = pk::periodic_baseline(t, ensemble0, *baseline, T_p, N_p, cfg.integrator);
    pk::io::Table csv;
    csv.columns = {"period", "time", "mu", "tau", "delay", "skipped", "baseline_delay"};
    for (int p = 0; p < N_p; ++p) {
      const auto k = static_cast<std::size_t>(p);
      csv.rows.push_back({double(p + 1), (p + 1) * T_p, res.pulses[k].mu, res.pulses[k].tau, res.delays[k],
                          double(res.skipped[k]), base ? base->delays[k] : pk::kNaN});
    }
    o.add(out, csv, {{"cells", count}});
    if (rtable_input.empty() && cache.empty()) o.add(stem_of(out) + "_rtable.csv", pk::rtable_to_table(table));
    return kOk;
  };
}

Runner cmd_dmd(const Field& c) {
  const double thr = c.positive("svd_threshold", 1e-10);
  if (!(thr < 1.0)) bad(c.path() + ".svd_threshold", "must lie in (0, 1)");
  const std::string out = c.string("output", "dmd.csv");
  if (c.has("snapshots_input")) {
    const std::string input = c.string("snapshots_input");
    std::optional<double> hint;
    if (c.has("lambda1")) hint = c.number("lambda1");
    return [=](Output& o) {
      const auto snap = pk::snapshots_from_table(pk::io::read_csv(input));
      const auto d = pk::r_from_snapshots(snap, hint, thr);
      pk::io::Table csv;
      csv.columns = {"mu", "tau", "r_data"};
      for (std::size_t j = 0; j < d.r.size(); ++j) csv.rows.push_back({d.tags[j].mu, d.tags[j].tau, d.r[j]});
      o.add(out, csv, {{"lambda", d.dmd.lambda(d.mode).real()}});
      return kOk;
    };
  }
  const ModelSetup s = parse_model(c);
  const auto cfg = parse_tolerances(c);
  const auto mu = c.axis("mu_axis");
  const auto tau = c.axis("tau_axis");
  const double T_s = c.positive("T_s");
  const Field kf = c.at("k_list");
  std::vector<int> ks;
  for (double v : kf.vector()) {
    if (v != std::floor(v) || v < 0) bad(kf.path(), "entries must be nonnegative integers");
    ks.push_back(static_cast<int>(v));
  }
  if (ks.size() < 2) bad(kf.path(), "need at least two samples");
  for (std::size_t i = 1; i < ks.size(); ++i)
    if (ks[i] != ks[i - 1] + 1) bad(kf.path(), "entries must be consecutive");
  const bool compare = c.has("compare") && c.raw()["compare"].is_boolean() && c.raw()["compare"].get<bool>();
  const StateRef x = parse_state_ref(c, "x", s.model.dimension(), "other");
  return [=](Output& o) {
    const auto t = make_target(s, cfg);
    const pk::State x0 = resolve(x, t);
    std::vector<pk::Pulse> tags;
    for (double m : mu)
      for (double ta : tau) tags.push_back({m, ta});
    const auto snap = pk::pulse_snapshots(t, x0, tags, T_s, ks);
    const auto d = pk::r_from_snapshots(snap, t.spectrum.lambda1(), thr);
    pk::io::Table csv;
    csv.columns = {"mu", "tau", "r_data", "r_laplace"};
    std::optional<pk::RGrid> grid;
    if (compare) grid = pk::r_grid(s.model, t.spectrum, x0, mu, tau, t.cfg);
    for (std::size_t j = 0; j < tags.size(); ++j)
      csv.rows.push_back({tags[j].mu, tags[j].tau, d.r[j], grid ? (*grid)(j / tau.size(), j % tau.size()) : pk::kNaN});
    o.add(out, csv, {{"lambda", d.dmd.lambda(d.mode).real()}, {"rank", d.dmd.rank_used}});
    o.add(stem_of(out) + "_snapshots.csv", pk::snapshots_to_table(snap));
    return kOk;
  };
}

int run(const fs::path& config_path, const fs::path& out_dir, std::optional<std::uint64_t> seed) {
  Runner runner;
  json meta;
  try {
    std::ifstream f(config_path);
    if (!f) bad(config_path.string(), "cannot open config file");
    json cfg;
    try {
      cfg = json::parse(f);
    } catch (const json::parse_error& e) {
      bad(config_path.string(), std::string("malformed JSON: ") + e.what());
    }
    if (!cfg.is_object()) bad("config", "top level must be an object");
    const Field root(cfg, "config");
    const std::string command = root.string("command");
    if (command == "simulate") runner = cmd_simulate(root);
    else if (command == "spectrum") runner = cmd_spectrum(root);
    else if (command == "rgrid") runner = cmd_rgrid(root);
    else if (command == "levelset") runner = cmd_levelset(root);
    else if (command == "optimize") runner = cmd_optimize(root);
    else if (command == "switch-open") runner = cmd_switch(root, false);
    else if (command == "switch-closed") runner = cmd_switch(root, true);
    else if (command == "sync") runner = cmd_sync(root, seed);
    else if (command == "dmd") runner = cmd_dmd(root);
    else bad("config.command", "unknown command '" + command + "'");
    if (seed) cfg["seed"] = *seed;
    meta = {{"tool", "pulsekoop"},
            {"version", PULSEKOOP_VERSION},
            {"command", command},
            {"config_hash", hex(fnv1a(cfg.dump()))},
            {"seed", cfg.value("seed", 0)}};
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kValidation;
  }

  Output out{out_dir, meta, {}};
  try {
    const int code = runner(out);
    out.flush();
    for (const auto& [path, t] : out.tables) std::cout << path.string() << '\n';
    return code;
  } catch (const pk::Error& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return kNumerical;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pulse control of bistable systems via Koopman eigenfunctions"};
  app.set_version_flag("--version", PULSEKOOP_VERSION);
  app.require_subcommand(1);
  auto* run_cmd = app.add_subcommand("run", "Run one experiment described by a JSON config");
  std::string config;
  std::string output = ".";
  int threads = 0;
  std::optional<std::uint64_t> seed;
  run_cmd->add_option("config", config, "Experiment config (JSON)")->required();
  run_cmd->add_option("--output", output, "Directory for result tables");
  run_cmd->add_option("--threads", threads, "Worker threads (overrides PULSEKOOP_THREADS)")->check(CLI::PositiveNumber);
  run_cmd->add_option("--seed", seed, "Seed for random ensembles (overrides the config)");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kValidation;
  }
  if (threads > 0) setenv("PULSEKOOP_THREADS", std::to_string(threads).c_str(), 1);
  return run(config, output, seed);
}
