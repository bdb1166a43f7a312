#pragma once

#include <cmath>
#include <complex>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pulsekoop/errors.hpp"
#include "pulsekoop/io.hpp"
#include "pulsekoop/koopman.hpp"
#include "pulsekoop/ode.hpp"
#include "pulsekoop/parallel.hpp"
#include "pulsekoop/pulse_control.hpp"

namespace pulsekoop {

/// Row j is the time series of a scalar observable started from seed j,
/// sampled every T_s. Seeds are optional pulse tags (mu_j, tau_j).
struct SnapshotSet {
  Eigen::MatrixXd data;
  double T_s = 1.0;
  std::vector<Pulse> tags;

  void validate() const {
    require(data.rows() >= 1 && data.cols() >= 2, ErrorKind::InvalidArgument,
            "snapshots need at least one series and two samples");
    require(data.allFinite(), ErrorKind::NonFinite, "snapshots contain non-finite entries");
    require(T_s > 0.0 && std::isfinite(T_s), ErrorKind::InvalidArgument, "T_s must be > 0");
    require(tags.empty() || tags.size() == static_cast<std::size_t>(data.rows()), ErrorKind::InvalidArgument,
            "one tag per series expected");
  }
};

struct DMDResult {
  Eigen::MatrixXcd modes;  // column l is mode l; entry j samples eigenfunction l at seed j
  Eigen::VectorXcd nu;
  Eigen::VectorXcd lambda;  // principal ln(nu) / T_s
  int rank_used = 0;
};

/// Exact DMD on the shifted snapshot pair. Singular values below
/// svd_threshold * sigma_max are dropped.
inline DMDResult dmd(const SnapshotSet& snapshots, double svd_threshold = 1e-10) {
  snapshots.validate();
  require(svd_threshold > 0.0 && svd_threshold < 1.0, ErrorKind::InvalidArgument,
          "svd_threshold must lie in (0, 1)");
  const auto& d = snapshots.data;
  const Eigen::Index n = d.cols() - 1;
  const Eigen::MatrixXd X = d.leftCols(n);
  const Eigen::MatrixXd Y = d.rightCols(n);
  Eigen::BDCSVD<Eigen::MatrixXd> svd(X, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sigma = svd.singularValues();
  if (sigma.size() == 0 || !(sigma(0) > 0.0)) fail(ErrorKind::RankDeficient, "dmd: snapshot matrix is zero");
  Eigen::Index rank = 0;
  while (rank < sigma.size() && sigma(rank) > svd_threshold * sigma(0)) ++rank;
  if (rank == 0) fail(ErrorKind::RankDeficient, "dmd: no singular value above the threshold");

  const Eigen::MatrixXd U = svd.matrixU().leftCols(rank);
  const Eigen::MatrixXd V = svd.matrixV().leftCols(rank);
  const Eigen::VectorXd inv_sigma = sigma.head(rank).cwiseInverse();
  const Eigen::MatrixXd T = U.transpose() * Y * V * inv_sigma.asDiagonal();

  Eigen::EigenSolver<Eigen::MatrixXd> es(T, true);
  if (es.info() != Eigen::Success) fail(ErrorKind::DefectiveT, "dmd: eigendecomposition of T failed");
  const Eigen::MatrixXcd W = es.eigenvectors();
  Eigen::JacobiSVD<Eigen::MatrixXcd> wsvd(W);
  const auto& ws = wsvd.singularValues();
  if (!(ws(ws.size() - 1) > 1e-12 * ws(0))) fail(ErrorKind::DefectiveT, "dmd: T is not diagonalizable");

  DMDResult out;
  out.rank_used = static_cast<int>(rank);
  out.nu = es.eigenvalues();
  out.modes = U.cast<std::complex<double>>() * W;
  out.lambda.resize(rank);
  for (Eigen::Index l = 0; l < rank; ++l) out.lambda(l) = std::log(out.nu(l)) / snapshots.T_s;
  return out;
}

/// Index of the mode whose lambda is real and negative and closest to
/// `lambda1_hint`, or with the largest real part without a hint.
inline std::optional<Eigen::Index> dominant_real_mode(const DMDResult& res, std::optional<double> lambda1_hint,
                                                      double imag_tol = 1e-8) {
  std::optional<Eigen::Index> best;
  double best_score = kInf;
  for (Eigen::Index l = 0; l < res.lambda.size(); ++l) {
    const auto lam = res.lambda(l);
    if (!std::isfinite(lam.real()) || lam.real() >= 0.0) continue;
    if (std::abs(res.nu(l).imag()) > imag_tol * std::max(1.0, std::abs(res.nu(l)))) continue;
    const double score = lambda1_hint ? std::abs(lam.real() - *lambda1_hint) : -lam.real();
    if (score < best_score) {
      best_score = score;
      best = l;
    }
  }
  return best;
}

/// Series of g = w1'(x - x*) sampled at tau_j + k T_s for k in k_list, after a
/// pulse (mu_j, tau_j) from base_x.
inline SnapshotSet pulse_snapshots(const Target& target, const State& base_x, const std::vector<Pulse>& tags,
                                   double T_s, const std::vector<int>& k_list, int threads = 0) {
  require(!tags.empty(), ErrorKind::InvalidArgument, "pulse_snapshots: no tags");
  require(k_list.size() >= 2, ErrorKind::InvalidArgument, "pulse_snapshots: need at least two samples");
  for (std::size_t i = 1; i < k_list.size(); ++i)
    require(k_list[i] == k_list[i - 1] + 1, ErrorKind::InvalidArgument,
            "pulse_snapshots: k_list must be consecutive");
  require(k_list.front() >= 0, ErrorKind::InvalidArgument, "pulse_snapshots: k_list must be >= 0");
  require(T_s > 0.0, ErrorKind::InvalidArgument, "pulse_snapshots: T_s must be > 0");
  SnapshotSet snap;
  snap.T_s = T_s;
  snap.tags = tags;
  snap.data.resize(static_cast<Eigen::Index>(tags.size()), static_cast<Eigen::Index>(k_list.size()));
  const auto& spec = target.spectrum;
  parallel_for(
      tags.size(),
      [&](std::size_t j) {
        tags[j].validate();
        detail::ShiftedField field(target.model, spec.x_star);
        Dopri5<detail::ShiftedField> stepper(field, base_x - spec.x_star, 0.0, target.cfg.integrator);
        stepper.set_input(tags[j].mu);
        stepper.advance_to(tags[j].tau);
        stepper.set_input(0.0);
        for (std::size_t k = 0; k < k_list.size(); ++k) {
          stepper.advance_to(tags[j].tau + k_list[k] * T_s);
          snap.data(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) = spec.w1.dot(stepper.state());
        }
      },
      threads);
  return snap;
}

struct DataDrivenR {
  std::vector<Pulse> tags;
  std::vector<double> r;  // common positive scale, unknown
  DMDResult dmd;
  Eigen::Index mode = 0;
};

/// Components of the dominant DMD mode, one per tag, as samples of r up to a
/// common positive factor. The sign is fixed so that the series with the
/// largest final magnitude keeps the sign of its last sample.
inline DataDrivenR r_from_snapshots(const SnapshotSet& snap, std::optional<double> lambda1_hint,
                                    double svd_threshold = 1e-10) {
  DataDrivenR out;
  out.tags = snap.tags;
  out.dmd = dmd(snap, svd_threshold);
  const auto mode = dominant_real_mode(out.dmd, lambda1_hint);
  if (!mode) fail(ErrorKind::NoDominantRealMode, "r_from_data: no real negative DMD eigenvalue");
  out.mode = *mode;
  const Eigen::VectorXcd v = out.dmd.modes.col(*mode);
  // Rotate away the arbitrary complex phase the eigensolver may attach.
  Eigen::Index big = 0;
  v.cwiseAbs().maxCoeff(&big);
  const std::complex<double> phase = v(big) / std::abs(v(big));
  const Eigen::VectorXd comp = (v / phase).real();

  Eigen::Index last_big = 0;
  snap.data.col(snap.data.cols() - 1).cwiseAbs().maxCoeff(&last_big);
  const double want = snap.data(last_big, snap.data.cols() - 1) < 0.0 ? -1.0 : 1.0;
  const double flip = comp(last_big) * want < 0.0 ? -1.0 : 1.0;
  out.r.resize(static_cast<std::size_t>(comp.size()));
  for (Eigen::Index j = 0; j < comp.size(); ++j) out.r[static_cast<std::size_t>(j)] = flip * comp(j);
  return out;
}

inline DataDrivenR r_from_data(const Target& target, const State& base_x, const std::vector<Pulse>& tags,
                               double T_s, const std::vector<int>& k_list, double svd_threshold = 1e-10,
                               int threads = 0) {
  return r_from_snapshots(pulse_snapshots(target, base_x, tags, T_s, k_list, threads), target.spectrum.lambda1(),
                          svd_threshold);
}

/// CSV layout: a `# T_s=<value>` comment, then columns mu, tau, z0, z1, ...
inline io::Table snapshots_to_table(const SnapshotSet& snap) {
  io::Table t;
  t.comments.push_back(" T_s=" + io::format_double(snap.T_s));
  t.columns = {"mu", "tau"};
  for (Eigen::Index k = 0; k < snap.data.cols(); ++k) t.columns.push_back("z" + std::to_string(k));
  for (Eigen::Index j = 0; j < snap.data.rows(); ++j) {
    const Pulse tag = snap.tags.empty() ? Pulse{} : snap.tags[static_cast<std::size_t>(j)];
    std::vector<double> row{tag.mu, tag.tau};
    for (Eigen::Index k = 0; k < snap.data.cols(); ++k) row.push_back(snap.data(j, k));
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline SnapshotSet snapshots_from_table(const io::Table& t) {
  SnapshotSet snap;
  bool have_ts = false;
  for (const auto& c : t.comments) {
    const auto pos = c.find("T_s=");
    if (pos == std::string::npos) continue;
    snap.T_s = io::parse_double(c.substr(pos + 4));
    have_ts = true;
  }
  require(have_ts, ErrorKind::InvalidArgument, "snapshot table lacks a '# T_s=' line");
  require(t.columns.size() >= 4 && t.columns[0] == "mu" && t.columns[1] == "tau", ErrorKind::InvalidArgument,
          "snapshot table needs columns mu,tau,z0,z1,...");
  const auto m = static_cast<Eigen::Index>(t.rows.size());
  const auto n = static_cast<Eigen::Index>(t.columns.size() - 2);
  snap.data.resize(m, n);
  for (Eigen::Index j = 0; j < m; ++j) {
    const auto& row = t.rows[static_cast<std::size_t>(j)];
    snap.tags.push_back({row[0], row[1]});
    for (Eigen::Index k = 0; k < n; ++k) snap.data(j, k) = row[static_cast<std::size_t>(k + 2)];
  }
  snap.validate();
  return snap;
}

}  // namespace pulsekoop
