#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cemcol/geometry.hpp"
#include "cemcol/partition.hpp"
#include "cemcol/surrogate.hpp"

namespace cemcol {

struct RegularizerOptions {
  double kappa_sigma = 0.25;
  double kappa_gamma = 0.25;
  double kappa_e = 0.25;
  double kappa_z = 0.25;
  double beta = 4.0;  // correlation length, same units as the radii
  double epsilon = 1e-4;
};

/// R_sigma = L^{-1} for the Cholesky factor L of the pixel covariance
/// C_ij = kappa_sigma^2 exp(-|x_i - x_j|^2 / (2 beta^2)) + epsilon delta_ij,
/// so that |R_sigma y|^2 = y^T C^{-1} y.
inline Eigen::MatrixXd pixel_covariance(const ConductivityPartition& partition,
                                        const RegularizerOptions& opt) {
  const int n = partition.size();
  Eigen::MatrixXd c(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double d2 = (partition.pixel(i).centroid - partition.pixel(j).centroid).squaredNorm();
      c(i, j) = opt.kappa_sigma * opt.kappa_sigma * std::exp(-d2 / (2.0 * opt.beta * opt.beta)) +
                (i == j ? opt.epsilon : 0.0);
    }
  return c;
}

class Regularizer {
 public:
  Regularizer(const ParameterLayout& layout, const Eigen::MatrixXd& covariance,
              const RegularizerOptions& opt)
      : layout_(layout) {
    if (!(opt.kappa_sigma > 0.0 && opt.kappa_gamma > 0.0 && opt.kappa_e > 0.0 &&
          opt.kappa_z > 0.0 && opt.beta > 0.0 && opt.epsilon >= 0.0))
      throw ConfigError("regularizer parameters must be positive");
    if (covariance.rows() != layout.n_sigma || covariance.cols() != layout.n_sigma)
      throw DimensionMismatch("covariance does not match n_sigma");
    Eigen::LLT<Eigen::MatrixXd> llt(covariance);
    if (llt.info() != Eigen::Success)
      throw SolverBreakdown("Cholesky factorization of the pixel covariance failed");
    factor_ = llt.matrixL();
    const Eigen::VectorXd diag = factor_.diagonal();
    if (!(diag.minCoeff() > 1e-8 * diag.maxCoeff()))
      throw SolverBreakdown("pixel covariance is numerically singular");
    r_sigma_ = factor_.triangularView<Eigen::Lower>().solve(
        Eigen::MatrixXd::Identity(layout.n_sigma, layout.n_sigma));
    diag_ = Eigen::VectorXd(layout.size() - layout.n_sigma);
    diag_.segment(0, layout.n_gamma).setConstant(1.0 / opt.kappa_gamma);
    diag_.segment(layout.n_gamma, layout.num_electrodes).setConstant(1.0 / opt.kappa_e);
    diag_.segment(layout.n_gamma + layout.num_electrodes, layout.num_electrodes)
        .setConstant(1.0 / opt.kappa_z);
  }

  Regularizer(const SetupConfig& cfg, const ConductivityPartition& partition,
              const RegularizerOptions& opt = {})
      : Regularizer(cfg.layout(), pixel_covariance(partition, opt), opt) {}

  const ParameterLayout& layout() const { return layout_; }
  const Eigen::MatrixXd& sigma_block() const { return r_sigma_; }
  const Eigen::MatrixXd& covariance_factor() const { return factor_; }

  Eigen::MatrixXd matrix() const {
    const int n = layout_.size();
    Eigen::MatrixXd r = Eigen::MatrixXd::Zero(n, n);
    r.topLeftCorner(layout_.n_sigma, layout_.n_sigma) = r_sigma_;
    r.bottomRightCorner(n - layout_.n_sigma, n - layout_.n_sigma) = diag_.asDiagonal();
    return r;
  }

  Eigen::VectorXd apply(Eigen::Ref<const Eigen::VectorXd> y) const {
    if (y.size() != layout_.size()) throw DimensionMismatch("y does not match the regularizer");
    Eigen::VectorXd out(y.size());
    out.head(layout_.n_sigma) = r_sigma_.triangularView<Eigen::Lower>() * y.head(layout_.n_sigma);
    out.tail(diag_.size()) = diag_.cwiseProduct(y.tail(diag_.size()));
    return out;
  }

 private:
  ParameterLayout layout_;
  Eigen::MatrixXd factor_;
  Eigen::MatrixXd r_sigma_;
  Eigen::VectorXd diag_;
};

/// Stacked residual [U(y) - V; lambda R y] and its Jacobian.
class LeastSquaresProblem {
 public:
  LeastSquaresProblem(const Surrogate& surrogate, Eigen::VectorXd data,
                      const Regularizer& regularizer, double lambda)
      : surrogate_(surrogate), data_(std::move(data)), reg_(regularizer), lambda_(lambda) {
    if (data_.size() != surrogate.num_measurements())
      throw DimensionMismatch("data has " + std::to_string(data_.size()) +
                              " entries, surrogate predicts Q = " +
                              std::to_string(surrogate.num_measurements()));
    if (reg_.layout().size() != surrogate.dimension())
      throw DimensionMismatch("regularizer does not match the surrogate dimension");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  }

  int num_parameters() const { return surrogate_.dimension(); }
  double lambda() const { return lambda_; }
  const Eigen::VectorXd& data() const { return data_; }

  Eigen::VectorXd residual(Eigen::Ref<const Eigen::VectorXd> y) const {
    Eigen::VectorXd r(data_.size() + y.size());
    r.head(data_.size()) = surrogate_.eval(y) - data_;
    r.tail(y.size()) = lambda_ * reg_.apply(y);
    return r;
  }

  Eigen::MatrixXd jacobian(Eigen::Ref<const Eigen::VectorXd> y) const {
    Eigen::MatrixXd j(data_.size() + y.size(), y.size());
    j.topRows(data_.size()) = surrogate_.jacobian(y);
    j.bottomRows(y.size()) = lambda_ * reg_.matrix();
    return j;
  }

  double misfit(Eigen::Ref<const Eigen::VectorXd> y) const {
    return (surrogate_.eval(y) - data_).norm();
  }

 private:
  const Surrogate& surrogate_;
  Eigen::VectorXd data_;
  const Regularizer& reg_;
  double lambda_;
};

// ---------------------------------------------------------------------------

struct LmOptions {
  double tol_x = 1e-8;
  double tol_g = 1e-8;
  double tol_f = 1e-10;
  int max_evaluations = 400;
  double initial_damping = 1e-3;  // times trace(J^T J) / N
};

enum class LmStatus { kStepTolerance, kGradientTolerance, kObjectiveTolerance, kMaxEvaluations };

inline const char* to_string(LmStatus s) {
  switch (s) {
    case LmStatus::kStepTolerance: return "step_tolerance";
    case LmStatus::kGradientTolerance: return "gradient_tolerance";
    case LmStatus::kObjectiveTolerance: return "objective_tolerance";
    case LmStatus::kMaxEvaluations: return "max_evaluations";
  }
  return "unknown";
}

struct LmResult {
  Eigen::VectorXd y;
  double objective = 0.0;  // |r(y)|^2
  int evaluations = 0;     // residual evaluations
  int iterations = 0;      // accepted steps
  LmStatus status = LmStatus::kMaxEvaluations;
  std::vector<double> history;  // objective after each accepted step, first entry at y0
};

/// Levenberg-Marquardt on |r(y)|^2 with damping (J^T J + mu I).
inline LmResult levenberg_marquardt(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& residual,
    const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& jacobian, Eigen::VectorXd y0,
    const LmOptions& opt = {}) {
  LmResult res;
  res.y = std::move(y0);
  const auto n = res.y.size();
  Eigen::VectorXd r = residual(res.y);
  res.evaluations = 1;
  res.objective = r.squaredNorm();
  res.history.push_back(res.objective);
  Eigen::MatrixXd j = jacobian(res.y);
  Eigen::MatrixXd jtj = j.transpose() * j;
  Eigen::VectorXd g = j.transpose() * r;
  const double g0 = std::max(1.0, g.lpNorm<Eigen::Infinity>());
  double mu = opt.initial_damping * std::max(jtj.trace() / std::max<Eigen::Index>(n, 1), 1e-300);

  while (true) {
    if (g.lpNorm<Eigen::Infinity>() <= opt.tol_g * g0) {
      res.status = LmStatus::kGradientTolerance;
      return res;
    }
    if (res.evaluations >= opt.max_evaluations) {
      res.status = LmStatus::kMaxEvaluations;
      return res;
    }
    Eigen::MatrixXd a = jtj;
    a.diagonal().array() += mu;
    const Eigen::VectorXd step = a.ldlt().solve(-g);
    if (step.norm() <= opt.tol_x * (opt.tol_x + res.y.norm())) {
      res.status = LmStatus::kStepTolerance;
      return res;
    }
    const Eigen::VectorXd trial = res.y + step;
    const Eigen::VectorXd r_trial = residual(trial);
    ++res.evaluations;
    const double f_trial = r_trial.squaredNorm();
    if (std::isfinite(f_trial) && f_trial < res.objective) {
      const double decrease = (res.objective - f_trial) / std::max(res.objective, 1e-300);
      res.y = trial;
      r = r_trial;
      res.objective = f_trial;
      res.history.push_back(f_trial);
      ++res.iterations;
      mu = std::max(mu * 0.1, 1e-300);
      if (decrease < opt.tol_f) {
        res.status = LmStatus::kObjectiveTolerance;
        return res;
      }
      j = jacobian(res.y);
      jtj = j.transpose() * j;
      g = j.transpose() * r;
    } else {
      mu *= 10.0;
      if (!std::isfinite(mu)) {
        res.status = LmStatus::kStepTolerance;
        return res;
      }
    }
  }
}

// ---------------------------------------------------------------------------

struct ReconstructionResult {
  Eigen::VectorXd y_star;
  Eigen::VectorXd pixel_conductivity;
  std::vector<Eigen::Vector2d> boundary;  // closed polyline, first point not repeated
  std::vector<double> electrode_angles;
  Eigen::VectorXd contact_resistances;
  double circumference = 0.0;
  double misfit = 0.0;
  double objective = 0.0;
  double lambda = 0.0;
  int evaluations = 0;
  int iterations = 0;
  LmStatus status = LmStatus::kMaxEvaluations;
  bool outside_box = false;
};

/// Physical quantities encoded by y_star. Parameters outside [-1/2, 1/2]
/// are mapped by the same formulas and flagged.
inline ReconstructionResult extract_reconstruction(Eigen::Ref<const Eigen::VectorXd> y_star,
                                                   const SetupConfig& cfg,
                                                   int boundary_samples = 512) {
  const ParameterLayout layout = cfg.layout();
  if (y_star.size() != layout.size()) throw DimensionMismatch("y_star does not match the set-up");
  ReconstructionResult out;
  out.y_star = y_star;
  out.outside_box = y_star.size() > 0 && y_star.cwiseAbs().maxCoeff() > 0.5;
  out.pixel_conductivity = pixel_conductivities(y_star.segment(0, layout.n_sigma), cfg);
  const Eigen::VectorXd y_gamma = y_star.segment(layout.gamma_offset(), layout.n_gamma);
  const SplineBoundary b(cfg, y_gamma);
  const int samples = std::max(256, boundary_samples);
  for (int k = 0; k < samples; ++k) {
    const double phi = kTwoPi * k / samples;
    out.boundary.push_back(to_cartesian({b.radius(phi), phi}));
  }
  out.circumference = circumference(b);
  out.electrode_angles = electrode_angles(y_star.segment(layout.electrode_offset(), layout.num_electrodes), cfg);
  out.contact_resistances =
      contact_resistances(y_star.segment(layout.contact_offset(), layout.num_electrodes), cfg);
  return out;
}

struct InversionOptions {
  RegularizerOptions regularizer;
  LmOptions lm;
};

/// Minimizes |U(y) - V|^2 + lambda^2 |R y|^2 from y = 0.
inline ReconstructionResult reconstruct(const Surrogate& surrogate, const Eigen::VectorXd& data,
                                        double lambda, const InversionOptions& opt = {}) {
  const SetupConfig& cfg = surrogate.config();
  const ConductivityPartition partition(cfg.rho0(), surrogate.header().partition);
  if (partition.size() != cfg.n_sigma) throw FormatError("partition does not match n_sigma");
  const Regularizer reg(cfg, partition, opt.regularizer);
  const LeastSquaresProblem problem(surrogate, data, reg, lambda);
  const LmResult lm = levenberg_marquardt(
      [&](const Eigen::VectorXd& y) { return problem.residual(y); },
      [&](const Eigen::VectorXd& y) { return problem.jacobian(y); },
      Eigen::VectorXd::Zero(surrogate.dimension()), opt.lm);
  ReconstructionResult out = extract_reconstruction(lm.y, cfg);
  out.misfit = problem.misfit(lm.y);
  out.objective = lm.objective;
  out.lambda = lambda;
  out.evaluations = lm.evaluations;
  out.iterations = lm.iterations;
  out.status = lm.status;
  return out;
}

/// Area-weighted centroid, in the reconstructed domain, of the pixels whose
/// conductivity satisfies `select`. Empty if no pixel does.
template <class Select>
std::optional<Eigen::Vector2d> pixel_region_centroid(const ReconstructionResult& r,
                                                     const SetupConfig& cfg,
                                                     const ConductivityPartition& partition,
                                                     Select&& select) {
  if (r.pixel_conductivity.size() != partition.size())
    throw DimensionMismatch("reconstruction does not match the partition");
  const Eigen::VectorXd y_gamma = r.y_star.segment(cfg.layout().gamma_offset(), cfg.n_gamma);
  Eigen::Vector2d sum = Eigen::Vector2d::Zero();
  double weight = 0.0;
  for (int i = 0; i < partition.size(); ++i) {
    if (!select(r.pixel_conductivity[i])) continue;
    const auto& px = partition.pixel(i);
    const Eigen::Vector2d x = to_cartesian(map_from_reference(to_polar(px.centroid), y_gamma, cfg));
    sum += px.area() * x;
    weight += px.area();
  }
  if (weight == 0.0) return std::nullopt;
  return Eigen::Vector2d(sum / weight);
}

/// 2e-3 times the largest difference between two entries of V.
inline double auto_lambda(const Eigen::VectorXd& data) {
  if (data.size() == 0) throw DimensionMismatch("empty data vector");
  return 2e-3 * (data.maxCoeff() - data.minCoeff());
}

inline nlohmann::json to_json(const ReconstructionResult& r) {
  nlohmann::json j;
  j["y_star"] = std::vector<double>(r.y_star.data(), r.y_star.data() + r.y_star.size());
  j["pixel_conductivity"] = std::vector<double>(
      r.pixel_conductivity.data(), r.pixel_conductivity.data() + r.pixel_conductivity.size());
  auto& poly = j["boundary"] = nlohmann::json::array();
  for (const auto& p : r.boundary) poly.push_back({p.x(), p.y()});
  j["electrode_angles"] = r.electrode_angles;
  j["contact_resistances"] = std::vector<double>(
      r.contact_resistances.data(), r.contact_resistances.data() + r.contact_resistances.size());
  j["circumference"] = r.circumference;
  j["diagnostics"] = {{"misfit", r.misfit},
                      {"objective", r.objective},
                      {"lambda", r.lambda},
                      {"evaluations", r.evaluations},
                      {"iterations", r.iterations},
                      {"status", to_string(r.status)},
                      {"outside_box", r.outside_box}};
  return j;
}

}  // namespace cemcol
