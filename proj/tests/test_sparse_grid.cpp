#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "cemcol/sparse_grid.hpp"

using namespace cemcol;

namespace {

double monomial_integral(int p) { return p % 2 ? 0.0 : std::pow(0.5, p) / (p + 1); }

// All level vectors alpha >= 1 with N <= |alpha| <= N + K, visited by fn.
void for_each_level(int n, int k, const std::function<void(const std::vector<int>&)>& fn) {
  std::vector<int> alpha(n, 1);
  std::function<void(int, int)> rec = [&](int d, int used) {
    if (d == n) {
      fn(alpha);
      return;
    }
    for (int a = 1; used + a <= n + k - (n - d - 1); ++a) {
      alpha[d] = a;
      rec(d + 1, used + a);
    }
  };
  rec(0, 0);
}

// Plain cosine formula for the nodes of level l on [-1/2, 1/2].
std::vector<double> raw_nodes(int level) {
  if (level == 1) return {0.0};
  const int m = (1 << (level - 1)) + 1;
  std::vector<double> y(m);
  for (int j = 0; j < m; ++j) y[j] = -0.5 * std::cos(kPi * j / (m - 1));
  return y;
}

// Brute-force union of the tensor grids with |alpha| <= N + K, nodes
// compared after rounding.
std::size_t brute_force_count(int n, int k) {
  std::set<std::vector<long long>> nodes;
  for_each_level(n, k, [&](const std::vector<int>& alpha) {
    std::vector<std::vector<double>> axes;
    for (int a : alpha) axes.push_back(raw_nodes(a));
    std::vector<int> idx(n, 0);
    while (true) {
      std::vector<long long> key(n);
      for (int d = 0; d < n; ++d) key[d] = std::llround(axes[d][idx[d]] * 1e12);
      nodes.insert(key);
      int d = n - 1;
      while (d >= 0 && ++idx[d] == static_cast<int>(axes[d].size())) idx[d--] = 0;
      if (d < 0) break;
    }
  });
  return nodes.size();
}

// Unmerged Smolyak sum: sum over alpha of (-1)^{N+K-|alpha|} C(N-1, N+K-|alpha|)
// times the tensor rule, with weights from the raw formula.
double combination_integral(int n, int k, const std::function<double(const std::vector<double>&)>& f) {
  double total = 0.0;
  for_each_level(n, k, [&](const std::vector<int>& alpha) {
    int sum = 0;
    for (int a : alpha) sum += a;
    const int q = n + k - sum;
    if (q > n - 1) return;
    double c = std::tgamma(n) / (std::tgamma(q + 1) * std::tgamma(n - q));
    if (q % 2) c = -c;
    std::vector<std::vector<double>> x, w;
    for (int a : alpha) {
      x.push_back(raw_nodes(a));
      w.push_back(cc_weights(a));
    }
    std::vector<int> idx(n, 0);
    std::vector<double> y(n);
    while (true) {
      double wt = c;
      for (int d = 0; d < n; ++d) {
        y[d] = x[d][idx[d]];
        wt *= w[d][idx[d]];
      }
      total += wt * f(y);
      int d = n - 1;
      while (d >= 0 && ++idx[d] == static_cast<int>(x[d].size())) idx[d--] = 0;
      if (d < 0) break;
    }
  });
  return total;
}

}  // namespace

TEST(ClenshawCurtis, NodeCountsAndNesting) {
  EXPECT_EQ(cc_num_nodes(1), 1);
  EXPECT_EQ(cc_num_nodes(2), 3);
  EXPECT_EQ(cc_num_nodes(3), 5);
  EXPECT_EQ(cc_num_nodes(4), 9);
  for (int l = 1; l <= 6; ++l) {
    const auto y = cc_nodes(l);
    const auto raw = raw_nodes(l);
    for (std::size_t j = 0; j < y.size(); ++j) EXPECT_NEAR(y[j], raw[j], 1e-15);
    if (l > 1) {
      const auto coarse = cc_nodes(l - 1);
      for (double c : coarse) EXPECT_NE(std::find(y.begin(), y.end(), c), y.end());
    }
  }
  EXPECT_EQ(cc_nodes(3)[2], 0.0);
}

TEST(ClenshawCurtis, WeightsExactness) {
  for (int l = 1; l <= 7; ++l) {
    const auto y = cc_nodes(l);
    const auto w = cc_weights(l);
    const int m = static_cast<int>(y.size());
    const int degree = m == 1 ? 1 : m;  // odd m gives degree m for symmetric rules
    for (int p = 0; p <= degree; ++p) {
      double s = 0.0;
      for (int j = 0; j < m; ++j) s += w[j] * std::pow(y[j], p);
      EXPECT_NEAR(s, monomial_integral(p), 1e-14) << "level " << l << " degree " << p;
    }
  }
  // Level 2 on [-1/2, 1/2]: Simpson weights 1/6, 2/3, 1/6.
  const auto w2 = cc_weights(2);
  EXPECT_NEAR(w2[0], 1.0 / 6, 1e-15);
  EXPECT_NEAR(w2[1], 2.0 / 3, 1e-15);
}

TEST(Smolyak, CountsMatchBruteForce) {
  for (int n = 1; n <= 6; ++n)
    for (int k = 0; k <= 3; ++k) {
      const std::size_t brute = brute_force_count(n, k);
      EXPECT_EQ(SmolyakRule(n, k).size(), brute) << "N=" << n << " K=" << k;
      EXPECT_EQ(static_cast<std::size_t>(smolyak_node_count(n, k)), brute);
    }
}

TEST(Smolyak, ClosedFormK2) {
  for (int n : {1, 2, 5, 56, 1008})
    EXPECT_EQ(static_cast<long long>(smolyak_node_count(n, 2)), 2LL * n * n + 2LL * n + 1);
  EXPECT_EQ(static_cast<long long>(smolyak_node_count(1008, 2)), 2034145LL);
  EXPECT_EQ(static_cast<long long>(smolyak_node_count(56, 2)), 6385LL);
}

TEST(Smolyak, Exactness) {
  for (auto [n, k] : std::vector<std::pair<int, int>>{{2, 1}, {2, 2}, {3, 1}, {3, 2}, {5, 2}}) {
    const SmolyakRule rule(n, k);
    std::vector<int> e(n, 0);
    std::function<void(int, int)> rec = [&](int d, int left) {
      if (d == n) {
        double exact = 1.0;
        for (int p : e) exact *= monomial_integral(p);
        const double q = rule.integrate([&](const Eigen::VectorXd& y) {
          double v = 1.0;
          for (int i = 0; i < n; ++i) v *= std::pow(y[i], e[i]);
          return v;
        });
        EXPECT_NEAR(q, exact, 1e-12);
        return;
      }
      for (int p = 0; p <= left; ++p) {
        e[d] = p;
        rec(d + 1, left - p);
      }
      e[d] = 0;
    };
    rec(0, 2 * k + 1);
  }
}

TEST(Smolyak, MergedEqualsCombinationSum) {
  std::mt19937 g(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto [n, k] : std::vector<std::pair<int, int>>{{2, 3}, {3, 2}, {4, 3}}) {
    const Eigen::VectorXd a = Eigen::VectorXd::NullaryExpr(n, [&] { return u(g); });
    auto f = [&](const auto& y) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += a[i] * y[i];
      return std::exp(s) + std::cos(3.0 * y[0]);
    };
    const SmolyakRule rule(n, k);
    const double merged = rule.integrate([&](const Eigen::VectorXd& y) { return f(y); });
    const double combo = combination_integral(n, k, [&](const std::vector<double>& y) { return f(y); });
    EXPECT_NEAR(merged, combo, 1e-13);
  }
}

TEST(Smolyak, WeightsSumToOneAndNodesDistinct) {
  const SmolyakRule rule(6, 3);
  double s = 0.0;
  for (double w : rule.weights()) s += w;
  EXPECT_NEAR(s, 1.0, 1e-13);
  std::set<std::vector<double>> seen;
  for (std::size_t i = 0; i < rule.size(); ++i) {
    const Eigen::VectorXd y = rule.point(i);
    EXPECT_LE(y.cwiseAbs().maxCoeff(), 0.5);
    EXPECT_TRUE(seen.insert(std::vector<double>(y.data(), y.data() + y.size())).second);
  }
  EXPECT_EQ(rule.point(0), Eigen::VectorXd::Zero(6));
}

TEST(Smolyak, OrderZeroIsCentre) {
  const SmolyakRule rule(4, 0);
  ASSERT_EQ(rule.size(), 1u);
  EXPECT_EQ(rule.weight(0), 1.0);
}

TEST(Smolyak, CapAndArguments) {
  EXPECT_THROW(SmolyakRule(1008, 3), ResourceLimit);
  EXPECT_THROW(SmolyakRule(56, 2, 1000.0), ResourceLimit);
  EXPECT_THROW(SmolyakRule(0, 1), ConfigError);
  EXPECT_THROW(SmolyakRule(3, -1), ConfigError);
}

TEST(Smolyak, TextDump) {
  const SmolyakRule rule(2, 1);
  std::stringstream ss;
  rule.write(ss);
  int lines = 0;
  double w = 0.0, x = 0.0, y = 0.0, sum = 0.0;
  while (ss >> w >> x >> y) {
    sum += w;
    ++lines;
  }
  EXPECT_EQ(lines, 5);
  EXPECT_NEAR(sum, 1.0, 1e-15);
}
