#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "pulsekoop/errors.hpp"
#include "pulsekoop/ode.hpp"

namespace pulsekoop {

enum class ModelId { Repressilator, FitzHughNagumo, LinearTest };

inline std::string_view to_string(ModelId id) {
  switch (id) {
    case ModelId::Repressilator: return "repressilator8";
    case ModelId::FitzHughNagumo: return "fitzhugh_nagumo";
    case ModelId::LinearTest: return "linear_test";
  }
  return "unknown";
}

inline ModelId parse_model_id(std::string_view name) {
  if (name == "repressilator8" || name == "repressilator") return ModelId::Repressilator;
  if (name == "fitzhugh_nagumo" || name == "fhn") return ModelId::FitzHughNagumo;
  if (name == "linear_test") return ModelId::LinearTest;
  fail(ErrorKind::InvalidArgument, "unknown model id '" + std::string(name) + "'");
}

using ParamMap = std::map<std::string, double>;

/// A built-in controlled vector field f(x, u) with its named parameters and
/// the signed orthant it is monotone with respect to.
///
/// Parameter names:
///  - repressilator: `p<i>_<j>` for species i = 1..ring_length, j = 1..5
///    (production, threshold, Hill exponent, basal rate, degradation).
///  - fitzhugh_nagumo: `gain`, `threshold`, `coupling`, `recovery`.
///  - linear_test: `a1`, `a2` (diagonal of A), `b1`, `b2` (input vector).
///
/// Instances are immutable; evaluating them from several threads is fine.
class ModelSpec {
 public:
  static ModelSpec repressilator(int ring_length = 8) {
    require(ring_length >= 2 && ring_length % 2 == 0, ErrorKind::InvalidArgument,
            "repressilator ring length must be even and >= 2");
    ModelSpec m(ModelId::Repressilator, ring_length);
    for (int i = 1; i <= ring_length; ++i) {
      const std::string s = "p" + std::to_string(i) + "_";
      m.params_[s + "1"] = 40.0;
      m.params_[s + "2"] = 1.0;
      m.params_[s + "3"] = 2.0;
      m.params_[s + "4"] = 1.0;
      m.params_[s + "5"] = 1.0;
      m.cone_signature_[i - 1] = (i % 2 == 1) ? 1 : -1;
    }
    m.state_lower_bounds_.setZero();
    m.monotone_ = true;
    m.rebuild();
    return m;
  }

  static ModelSpec fitzhugh_nagumo() {
    ModelSpec m(ModelId::FitzHughNagumo, 2);
    m.params_ = {{"gain", 0.26}, {"threshold", 0.13}, {"coupling", 0.1}, {"recovery", 0.013}};
    m.rebuild();
    return m;
  }

  static ModelSpec linear_test() {
    ModelSpec m(ModelId::LinearTest, 2);
    m.params_ = {{"a1", -1.0}, {"a2", -2.0}, {"b1", 1.0}, {"b2", 1.0}};
    m.monotone_ = true;
    m.rebuild();
    return m;
  }

  static ModelSpec make(ModelId id) {
    switch (id) {
      case ModelId::Repressilator: return repressilator();
      case ModelId::FitzHughNagumo: return fitzhugh_nagumo();
      case ModelId::LinearTest: return linear_test();
    }
    fail(ErrorKind::InvalidArgument, "unknown model id");
  }

  ModelId id() const { return id_; }
  int dimension() const { return n_; }
  const ParamMap& params() const { return params_; }
  double param(const std::string& name) const {
    auto it = params_.find(name);
    require(it != params_.end(), ErrorKind::UnknownParameter, "no parameter '" + name + "'");
    return it->second;
  }
  const Eigen::VectorXi& cone_signature() const { return cone_signature_; }
  int control_index() const { return control_index_; }
  const Eigen::VectorXd& state_lower_bounds() const { return state_lower_bounds_; }
  /// True when the field is monotone with respect to the cone signature, so the
  /// dominant eigenvalue is expected to be real and simple.
  bool monotone() const { return monotone_; }

  /// Returns a copy with some parameters replaced; the receiver is untouched.
  ModelSpec with_params(const ParamMap& overrides) const {
    ModelSpec copy = *this;
    for (const auto& [name, value] : overrides) {
      auto it = copy.params_.find(name);
      require(it != copy.params_.end(), ErrorKind::UnknownParameter,
              "model " + std::string(to_string(id_)) + " has no parameter '" + name + "'");
      require(std::isfinite(value), ErrorKind::NonFinite, "parameter '" + name + "' is not finite");
      it->second = value;
    }
    copy.rebuild();
    return copy;
  }

  void operator()(const State& x, double u, State& dx) const {
    switch (id_) {
      case ModelId::Repressilator: {
        for (int i = 0; i < n_; ++i) {
          const double* p = &coeffs_[5 * i];
          const double prev = x[(i + n_ - 1) % n_];
          const double ratio = prev / p[1];
          const double hill = p[2] == 2.0 ? ratio * ratio : std::pow(ratio, p[2]);
          dx[i] = p[0] / (1.0 + hill) + p[3] - p[4] * x[i];
        }
        dx[control_index_] += u;
        break;
      }
      case ModelId::FitzHughNagumo: {
        const double v = x[0];
        const double w = x[1];
        dx[0] = coeffs_[0] * v * (v - coeffs_[1]) * (1.0 - v) - coeffs_[2] * v * w + u;
        dx[1] = coeffs_[3] * (v - w);
        break;
      }
      case ModelId::LinearTest: {
        dx[0] = coeffs_[0] * x[0] + coeffs_[2] * u;
        dx[1] = coeffs_[1] * x[1] + coeffs_[3] * u;
        break;
      }
    }
  }

  State eval(const State& x, double u) const {
    require(x.size() == n_, ErrorKind::InvalidArgument, "state has the wrong dimension");
    require(x.allFinite() && std::isfinite(u), ErrorKind::NonFinite, "field input is not finite");
    State dx(n_);
    (*this)(x, u, dx);
    return dx;
  }

 private:
  ModelSpec(ModelId id, int n)
      : id_(id),
        n_(n),
        cone_signature_(Eigen::VectorXi::Ones(n)),
        state_lower_bounds_(Eigen::VectorXd::Constant(n, -std::numeric_limits<double>::infinity())) {}

  void rebuild() {
    coeffs_.clear();
    switch (id_) {
      case ModelId::Repressilator:
        for (int i = 1; i <= n_; ++i)
          for (int j = 1; j <= 5; ++j)
            coeffs_.push_back(params_.at("p" + std::to_string(i) + "_" + std::to_string(j)));
        break;
      case ModelId::FitzHughNagumo:
        coeffs_ = {params_.at("gain"), params_.at("threshold"), params_.at("coupling"),
                   params_.at("recovery")};
        break;
      case ModelId::LinearTest:
        coeffs_ = {params_.at("a1"), params_.at("a2"), params_.at("b1"), params_.at("b2")};
        break;
    }
  }

  ModelId id_;
  int n_;
  ParamMap params_;
  Eigen::VectorXi cone_signature_;
  int control_index_ = 0;
  Eigen::VectorXd state_lower_bounds_;
  bool monotone_ = false;
  std::vector<double> coeffs_;
};

inline State eval_field(const ModelSpec& model, const State& x, double u) { return model.eval(x, u); }

inline ModelSpec override_params(const ModelSpec& model, const ParamMap& overrides) {
  return model.with_params(overrides);
}

/// y_i = sigma_i x_i. In these coordinates the model's order is the
/// nonnegative-orthant order.
inline State to_cone_coords(const ModelSpec& model, const State& x) {
  return x.cwiseProduct(model.cone_signature().cast<double>());
}

inline State from_cone_coords(const ModelSpec& model, const State& y) {
  return to_cone_coords(model, y);
}

/// x <= y in the model's cone order, allowing `slack` per coordinate.
inline bool cone_leq(const ModelSpec& model, const State& x, const State& y, double slack = 0.0) {
  const State d = to_cone_coords(model, y - x);
  return (d.array() >= -slack).all();
}

/// Overrides for the production rate of every odd-numbered repressilator
/// species (the perturbed settings of the switching experiments).
inline ParamMap odd_production_overrides(const ModelSpec& model, double value) {
  ParamMap out;
  for (int i = 1; i <= model.dimension(); i += 2) out["p" + std::to_string(i) + "_1"] = value;
  return out;
}

}  // namespace pulsekoop
