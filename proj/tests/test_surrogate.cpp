#include <cmath>
#include <random>
#include <sstream>

#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/special_functions/legendre.hpp>
#include <gtest/gtest.h>

#include "cemcol/surrogate.hpp"

using namespace cemcol;

namespace {

SetupConfig small_config() {
  SetupConfig cfg;
  cfg.num_electrodes = 4;
  cfg.n_sigma = 4;
  cfg.n_gamma = 3;
  return cfg;
}

Eigen::VectorXd random_box(std::mt19937& g, int n) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  Eigen::VectorXd y(n);
  for (auto& v : y) v = u(g);
  return y;
}

SurrogateHeader header_for(const SetupConfig& cfg) {
  SurrogateHeader h;
  h.config = cfg;
  h.partition = build_partition(cfg).sectors_per_ring();
  h.currents = default_currents(cfg.num_electrodes).matrix();
  h.order = 1;
  return h;
}

// Adjacent drive: column j is e_j - e_{j+1}.
CurrentMatrix adjacent_currents(int m) {
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(m, m - 1);
  for (int j = 0; j < m - 1; ++j) {
    c(j, j) = 1.0;
    c(j + 1, j) = -1.0;
  }
  return CurrentMatrix(c);
}

const Surrogate& small_surrogate() {
  static const Surrogate s = [] {
    const ForwardModel model(small_config());
    return build_surrogate(model, 1);
  }();
  return s;
}

}  // namespace

TEST(Legendre, MatchesBoost) {
  for (int k = 0; k <= 8; ++k)
    for (double t : {-0.5, -0.31, 0.0, 0.12, 0.4999, 0.5}) {
      const double ref = std::sqrt(2.0 * k + 1.0) * boost::math::legendre_p(k, 2.0 * t);
      EXPECT_NEAR(legendre_1d(k, t), ref, 1e-13);
      const double dref = 2.0 * std::sqrt(2.0 * k + 1.0) * boost::math::legendre_p_prime(k, 2.0 * t);
      EXPECT_NEAR(legendre_1d_derivative(k, t), dref, 1e-11 * std::max(1.0, std::abs(dref)));
    }
  EXPECT_NEAR(legendre_1d(1, 0.5), std::sqrt(3.0), 1e-15);
  EXPECT_THROW(legendre_1d(-1, 0.0), ConfigError);
}

TEST(Legendre, GramMatrixIsIdentity) {
  using Rule = boost::math::quadrature::gauss<double, 20>;
  for (int j = 0; j <= 6; ++j)
    for (int k = 0; k <= 6; ++k) {
      const double g = Rule::integrate(
          [&](double t) { return legendre_1d(j, t) * legendre_1d(k, t); }, -0.5, 0.5);
      EXPECT_NEAR(g, j == k ? 1.0 : 0.0, 1e-10) << j << "," << k;
    }
}

TEST(Basis, BilinearLayoutAndValues) {
  const auto set = MultiIndexSet::bilinear(5);
  EXPECT_EQ(set.size(), 16u);
  EXPECT_TRUE(set.index(0).empty());
  EXPECT_EQ(set.index(1), (MultiIndex{{0, 1}}));
  EXPECT_EQ(set.index(5), (MultiIndex{{4, 1}}));
  EXPECT_EQ(set.index(6), (MultiIndex{{0, 1}, {1, 1}}));
  EXPECT_EQ(set.index(15), (MultiIndex{{3, 1}, {4, 1}}));
  EXPECT_EQ(set.find({{1, 1}, {3, 1}}), 11);
  EXPECT_EQ(set.find({{1, 2}}), -1);
  EXPECT_EQ(MultiIndexSet::bilinear(56).size(), 1597u);
  EXPECT_EQ(MultiIndexSet::bilinear(1008).size(), 508537u);

  const Eigen::VectorXd y = Eigen::VectorXd::Constant(5, 0.5);
  // L_1(1/2) L_1(1/2) = 3.
  EXPECT_NEAR(basis_eval(set, set.find({{0, 1}, {1, 1}}), y), 3.0, 1e-14);
  EXPECT_EQ(basis_eval(set, 0, y), 1.0);
  EXPECT_THROW(basis_eval(set, 16, y), std::out_of_range);
  EXPECT_THROW(basis_eval(set, 0, Eigen::VectorXd::Zero(4)), DimensionMismatch);

  const auto td = MultiIndexSet::total_degree(3, 2);
  EXPECT_EQ(td.size(), 10u);
}

TEST(Projection, ReproducesPolynomialExactly) {
  const SmolyakRule rule(2, 2);
  const auto basis = MultiIndexSet::bilinear(2);
  const Eigen::MatrixXd c = project(rule, basis, 2, [](const Eigen::VectorXd& y) {
    return Eigen::Vector2d(1.0 + y[0] + y[0] * y[1], 2.0 * y[1]);
  });
  // y = L_1 / (2 sqrt 3), so y_1 y_2 = L_1 L_1 / 12.
  Eigen::MatrixXd expected = Eigen::MatrixXd::Zero(2, 4);
  expected(0, 0) = 1.0;
  expected(0, 1) = 1.0 / (2.0 * std::sqrt(3.0));
  expected(0, 3) = 1.0 / 12.0;
  expected(1, 2) = 1.0 / std::sqrt(3.0);
  EXPECT_LT((c - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Projection, GeneralBasisPathAgrees) {
  // The sparse bilinear path and the dense path give the same numbers.
  const SmolyakRule rule(3, 2);
  auto f = [](const Eigen::VectorXd& y) {
    return Eigen::Vector2d(std::exp(y[0] - 0.3 * y[2]), std::cos(y[1] + y[0] * y[2]));
  };
  const auto bil = MultiIndexSet::bilinear(3);
  const auto td = MultiIndexSet::total_degree(3, 2);
  const Eigen::MatrixXd a = project(rule, bil, 2, f);
  const Eigen::MatrixXd b = project(rule, td, 2, f);
  for (std::size_t p = 0; p < bil.size(); ++p)
    EXPECT_NEAR((a.col(p) - b.col(td.find(bil.index(p)))).norm(), 0.0, 1e-14);
}

TEST(Projection, ThreadCountDoesNotChangeBits) {
  const SmolyakRule rule(6, 2);
  const auto basis = MultiIndexSet::bilinear(6);
  auto f = [](const Eigen::VectorXd& y) {
    Eigen::VectorXd v(3);
    v << std::exp(y.sum()), y.prod(), std::sin(y[0] * y[5]);
    return v;
  };
  BuildOptions one, many;
  one.batch = 7;
  many.batch = 7;
  many.threads = 3;
  const Eigen::MatrixXd a = project(rule, basis, 3, f, one);
  const Eigen::MatrixXd b = project(rule, basis, 3, f, many);
  EXPECT_EQ(a, b);
}

TEST(Projection, FailureNamesNode) {
  const SmolyakRule rule(2, 1);
  const auto basis = MultiIndexSet::bilinear(2);
  try {
    project(rule, basis, 1, [](const Eigen::VectorXd& y) -> Eigen::VectorXd {
      if (y[1] > 0.0) throw SolverBreakdown("boom");
      return Eigen::VectorXd::Ones(1);
    });
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("sparse-grid node"), std::string::npos) << msg;
    EXPECT_NE(msg.find("boom"), std::string::npos);
  }
}

TEST(Surrogate, JacobianMatchesFiniteDifferences) {
  const SetupConfig cfg = small_config();
  const int n = cfg.layout().size();
  std::mt19937 g(11);
  std::normal_distribution<double> nd;
  const auto basis = MultiIndexSet::bilinear(n);
  Eigen::MatrixXd c(12, basis.size());
  for (auto& v : c.reshaped()) v = nd(g);
  const Surrogate s(header_for(cfg), c);
  const Eigen::VectorXd y = random_box(g, n);
  const Eigen::MatrixXd jac = s.jacobian(y);
  const double h = 1e-6;
  for (int j = 0; j < n; ++j) {
    Eigen::VectorXd yp = y, ym = y;
    yp[j] += h;
    ym[j] -= h;
    const Eigen::VectorXd fd = (s.eval(yp) - s.eval(ym)) / (2 * h);
    EXPECT_LT((jac.col(j) - fd).norm(), 1e-7 * std::max(1.0, fd.norm())) << "column " << j;
  }
  EXPECT_EQ(s.eval_matrix(y).rows(), 4);
  EXPECT_EQ(s.eval_matrix(y).cols(), 3);
  EXPECT_THROW(s.eval(Eigen::VectorXd::Zero(n - 1)), DimensionMismatch);
  EXPECT_THROW(Surrogate(header_for(cfg), Eigen::MatrixXd::Zero(12, 3)), DimensionMismatch);
}

TEST(Surrogate, BuildSmallAndCentreValue) {
  const Surrogate& s = small_surrogate();
  const SetupConfig cfg = small_config();
  EXPECT_EQ(s.dimension(), cfg.layout().size());
  EXPECT_EQ(s.num_measurements(), 12);
  // At K = 1 the constant coefficient is the 1-D Simpson-weighted average.
  const ForwardModel model(cfg);
  const SmolyakRule rule(cfg.layout().size(), 1);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(12);
  for (std::size_t i = 0; i < rule.size(); ++i) mean += rule.weight(i) * flatten(model.voltages(rule.point(i)));
  EXPECT_LT((s.coefficients().col(0) - mean).norm(), 1e-12 * mean.norm());
}

TEST(Surrogate, WithCurrentsMatchesDirectBuild) {
  const SetupConfig cfg = small_config();
  const CurrentMatrix adj = adjacent_currents(cfg.num_electrodes);
  const Surrogate converted = small_surrogate().with_currents(adj);
  const Surrogate direct = build_surrogate(ForwardModel(cfg, adj), 1);
  const double scale = direct.coefficients().cwiseAbs().maxCoeff();
  EXPECT_LT((converted.coefficients() - direct.coefficients()).cwiseAbs().maxCoeff(), 1e-9 * scale);
  EXPECT_EQ(converted.header().currents, adj.matrix());
  EXPECT_THROW(small_surrogate().with_currents(default_currents(5)), DimensionMismatch);
}

TEST(Surrogate, BinaryRoundTrip) {
  const Surrogate& s = small_surrogate();
  std::stringstream ss;
  write_surrogate(ss, s);
  const Surrogate r = read_surrogate(ss);
  EXPECT_EQ(r.coefficients(), s.coefficients());
  EXPECT_EQ(r.header().currents, s.header().currents);
  EXPECT_EQ(r.config(), s.config());
  EXPECT_EQ(r.header().partition, s.header().partition);
  EXPECT_EQ(r.header().order, 1);
}

TEST(Surrogate, BinaryRejectsGarbage) {
  std::stringstream bad("not a surrogate at all");
  EXPECT_THROW(read_surrogate(bad), FormatError);
  std::stringstream ss;
  write_surrogate(ss, small_surrogate());
  const std::string bytes = ss.str();
  std::stringstream cut(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(read_surrogate(cut), FormatError);
}

TEST(Surrogate, JsonRoundTrip) {
  const Surrogate& s = small_surrogate();
  const auto text = surrogate_to_json(s).dump();
  const Surrogate r = surrogate_from_json(nlohmann::json::parse(text));
  EXPECT_EQ(r.coefficients(), s.coefficients());
  EXPECT_EQ(r.config(), s.config());
  auto j = surrogate_to_json(s);
  j["basis"] = "wavelet";
  EXPECT_THROW(surrogate_from_json(j), FormatError);
  j.erase("basis");
  EXPECT_THROW(surrogate_from_json(j), FormatError);
}
