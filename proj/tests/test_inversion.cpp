#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cemcol/inversion.hpp"

using namespace cemcol;

namespace {

SetupConfig small_config() {
  SetupConfig cfg;
  cfg.num_electrodes = 4;
  cfg.n_sigma = 4;
  cfg.n_gamma = 3;
  return cfg;
}

const Surrogate& small_surrogate() {
  static const Surrogate s = build_surrogate(ForwardModel(small_config()), 1);
  return s;
}

}  // namespace

TEST(Regularizer, SinglePixel) {
  SetupConfig cfg = small_config();
  cfg.n_sigma = 1;
  const ConductivityPartition partition(cfg.rho0(), {1});
  const Regularizer reg(cfg, partition);
  const RegularizerOptions opt;
  const double expected = 1.0 / std::sqrt(opt.kappa_sigma * opt.kappa_sigma + opt.epsilon);
  EXPECT_NEAR(reg.sigma_block()(0, 0), expected, 1e-12);
  EXPECT_NEAR(expected, 3.9969, 1e-4);
  const Eigen::MatrixXd r = reg.matrix();
  const int n = cfg.layout().size();
  EXPECT_EQ(r.rows(), n);
  for (int i = 1; i < n; ++i) EXPECT_DOUBLE_EQ(r(i, i), 4.0);
  EXPECT_EQ((r - Eigen::MatrixXd(r.diagonal().asDiagonal())).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Regularizer, WhitensCovariance) {
  const SetupConfig cfg = desk_config();
  const auto partition = build_partition(cfg);
  const RegularizerOptions opt;
  const Regularizer reg(cfg, partition, opt);
  const Eigen::MatrixXd c = pixel_covariance(partition, opt);
  // R C R^T = I, i.e. |R y|^2 = y^T C^{-1} y.
  const Eigen::MatrixXd rs = reg.sigma_block();
  EXPECT_LT((rs * c * rs.transpose() - Eigen::MatrixXd::Identity(cfg.n_sigma, cfg.n_sigma))
                .cwiseAbs()
                .maxCoeff(),
            1e-8);
  std::mt19937 g(2);
  std::normal_distribution<double> nd;
  Eigen::VectorXd y = Eigen::VectorXd::NullaryExpr(cfg.layout().size(), [&] { return nd(g); });
  const Eigen::VectorXd a = reg.apply(y), b = reg.matrix() * y;
  EXPECT_LT((a - b).norm(), 1e-10 * b.norm());
  EXPECT_NEAR(a.head(cfg.n_sigma).squaredNorm(),
              y.head(cfg.n_sigma).dot(c.llt().solve(y.head(cfg.n_sigma))), 1e-8 * a.squaredNorm());
}

TEST(Regularizer, CoincidentCentroidsNeedEpsilon) {
  SetupConfig cfg = small_config();
  cfg.n_sigma = 2;
  RegularizerOptions opt;
  opt.epsilon = 0.0;
  Eigen::MatrixXd c = Eigen::MatrixXd::Constant(2, 2, opt.kappa_sigma * opt.kappa_sigma);
  EXPECT_THROW(Regularizer(cfg.layout(), c, opt), SolverBreakdown);
  opt.epsilon = 1e-4;
  c.diagonal().array() += opt.epsilon;
  EXPECT_NO_THROW(Regularizer(cfg.layout(), c, opt));
  opt.beta = 0.0;
  EXPECT_THROW(Regularizer(cfg.layout(), c, opt), ConfigError);
}

TEST(LeastSquares, ResidualAndJacobian) {
  const Surrogate& s = small_surrogate();
  const SetupConfig cfg = s.config();
  const ConductivityPartition partition(cfg.rho0(), s.header().partition);
  const Regularizer reg(cfg, partition);
  const int n = s.dimension();
  const Eigen::VectorXd v0 = s.eval(Eigen::VectorXd::Zero(n));
  const LeastSquaresProblem prob(s, v0, reg, 0.01);
  EXPECT_EQ(prob.residual(Eigen::VectorXd::Zero(n)).norm(), 0.0);
  EXPECT_EQ(prob.misfit(Eigen::VectorXd::Zero(n)), 0.0);

  std::mt19937 g(4);
  std::uniform_real_distribution<double> u(-0.4, 0.4);
  const Eigen::VectorXd y = Eigen::VectorXd::NullaryExpr(n, [&] { return u(g); });
  const Eigen::MatrixXd jac = prob.jacobian(y);
  const double h = 1e-6;
  for (int j = 0; j < n; ++j) {
    Eigen::VectorXd yp = y, ym = y;
    yp[j] += h;
    ym[j] -= h;
    const Eigen::VectorXd fd = (prob.residual(yp) - prob.residual(ym)) / (2 * h);
    EXPECT_LT((jac.col(j) - fd).norm(), 1e-6 * std::max(1.0, fd.norm()));
  }
  EXPECT_THROW(LeastSquaresProblem(s, Eigen::VectorXd::Zero(11), reg, 0.01), DimensionMismatch);
  EXPECT_THROW(LeastSquaresProblem(s, v0, reg, -1.0), ConfigError);
}

TEST(LevenbergMarquardt, LinearProblemConverges) {
  const Eigen::VectorXd c = (Eigen::VectorXd(4) << 0.3, -0.2, 0.1, 0.45).finished();
  const auto res = levenberg_marquardt([&](const Eigen::VectorXd& y) { return Eigen::VectorXd(y - c); },
                                       [&](const Eigen::VectorXd&) { return Eigen::MatrixXd::Identity(4, 4); },
                                       Eigen::VectorXd::Zero(4));
  EXPECT_LE(res.iterations, 3);
  EXPECT_LT((res.y - c).norm(), 1e-8);
}

TEST(LevenbergMarquardt, RosenbrockHistoryMonotone) {
  auto r = [](const Eigen::VectorXd& y) { return Eigen::Vector2d(10.0 * (y[1] - y[0] * y[0]), 1.0 - y[0]).eval(); };
  auto j = [](const Eigen::VectorXd& y) {
    Eigen::Matrix2d m;
    m << -20.0 * y[0], 10.0, -1.0, 0.0;
    return Eigen::MatrixXd(m);
  };
  const auto res = levenberg_marquardt(
      [&](const Eigen::VectorXd& y) { return Eigen::VectorXd(r(y)); }, j, Eigen::Vector2d(-1.2, 1.0));
  EXPECT_LT((res.y - Eigen::Vector2d(1.0, 1.0)).norm(), 1e-6);
  for (std::size_t k = 1; k < res.history.size(); ++k) EXPECT_LT(res.history[k], res.history[k - 1]);
  EXPECT_NEAR(res.objective, r(res.y).squaredNorm(), 1e-12 * std::max(1.0, res.objective));
  EXPECT_NE(res.status, LmStatus::kMaxEvaluations);
}

TEST(LevenbergMarquardt, EvaluationBudget) {
  LmOptions opt;
  opt.max_evaluations = 3;
  auto r = [](const Eigen::VectorXd& y) { return Eigen::VectorXd(Eigen::Vector2d(10.0 * (y[1] - y[0] * y[0]), 1.0 - y[0])); };
  auto j = [](const Eigen::VectorXd& y) {
    Eigen::MatrixXd m(2, 2);
    m << -20.0 * y[0], 10.0, -1.0, 0.0;
    return m;
  };
  const auto res = levenberg_marquardt(r, j, Eigen::Vector2d(-1.2, 1.0), opt);
  EXPECT_EQ(res.status, LmStatus::kMaxEvaluations);
  EXPECT_EQ(res.evaluations, 3);
  EXPECT_STREQ(to_string(res.status), "max_evaluations");
}

TEST(Extract, CircumferenceAndMaps) {
  const SetupConfig cfg = desk_config();
  const int n = cfg.layout().size();
  const auto a = extract_reconstruction(Eigen::VectorXd::Zero(n), cfg);
  EXPECT_NEAR(a.circumference, kTwoPi * 17.5, 1e-6);
  EXPECT_NEAR(a.circumference, 109.96, 0.01);
  EXPECT_FALSE(a.outside_box);
  EXPECT_NEAR(a.pixel_conductivity[0], std::sqrt(0.1), 1e-12);
  EXPECT_EQ(a.electrode_angles.size(), 8u);
  EXPECT_NEAR(a.electrode_angles[2], kPi / 2, 1e-12);

  Eigen::VectorXd y = Eigen::VectorXd::Zero(n);
  y.segment(cfg.n_sigma, cfg.n_gamma).setConstant(0.5);
  const auto b = extract_reconstruction(y, cfg);
  EXPECT_NEAR(b.circumference, kTwoPi * 20.0, 1e-6);
  for (const auto& p : b.boundary) EXPECT_NEAR(p.norm(), 20.0, 1e-9);

  y[0] = 0.7;
  EXPECT_TRUE(extract_reconstruction(y, cfg).outside_box);
  EXPECT_THROW(extract_reconstruction(Eigen::VectorXd::Zero(n - 1), cfg), DimensionMismatch);
}

TEST(Reconstruct, NoiselessSelfConsistency) {
  const Surrogate& s = small_surrogate();
  const int n = s.dimension();
  std::mt19937 g(9);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  const Eigen::VectorXd y_true = Eigen::VectorXd::NullaryExpr(n, [&] { return u(g); });
  const Eigen::VectorXd v = s.eval(y_true);
  const auto res = reconstruct(s, v, 0.0);
  EXPECT_LT(res.misfit, 1e-6 * v.norm());
  const auto again = reconstruct(s, v, 0.0);
  EXPECT_EQ(again.y_star, res.y_star);
}

TEST(Reconstruct, LambdaAndJson) {
  const Surrogate& s = small_surrogate();
  const Eigen::VectorXd v = s.eval(Eigen::VectorXd::Zero(s.dimension()));
  EXPECT_NEAR(auto_lambda(v), 2e-3 * (v.maxCoeff() - v.minCoeff()), 0.0);
  const auto res = reconstruct(s, v, auto_lambda(v));
  EXPECT_LT(res.y_star.norm(), 1e-8);
  const auto j = to_json(res);
  EXPECT_EQ(j["y_star"].size(), static_cast<std::size_t>(s.dimension()));
  EXPECT_EQ(j["pixel_conductivity"].size(), 4u);
  EXPECT_TRUE(j["diagnostics"].contains("misfit"));
  EXPECT_TRUE(j["diagnostics"].contains("evaluations"));
  EXPECT_THROW(auto_lambda(Eigen::VectorXd()), DimensionMismatch);
}

TEST(Reconstruct, CentroidOfSelection) {
  const SetupConfig cfg = desk_config();
  const auto partition = build_partition(cfg);
  auto r = extract_reconstruction(Eigen::VectorXd::Zero(cfg.layout().size()), cfg);
  EXPECT_FALSE(pixel_region_centroid(r, cfg, partition, [](double s) { return s > 1.0; }).has_value());
  // Whole disk: centroid at the origin.
  const auto all = pixel_region_centroid(r, cfg, partition, [](double) { return true; });
  ASSERT_TRUE(all.has_value());
  EXPECT_LT(all->norm(), 1e-9);
  // A single pixel maps to its own centroid when the boundary is the reference circle.
  r.pixel_conductivity.setConstant(0.2);
  r.pixel_conductivity[7] = 0.9;
  const auto one = pixel_region_centroid(r, cfg, partition, [](double s) { return s > 0.5; });
  ASSERT_TRUE(one.has_value());
  EXPECT_LT((*one - partition.pixel(7).centroid).norm(), 1e-9);
}
