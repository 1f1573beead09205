#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cemcol/config.hpp"

namespace cemcol {

// ---------------------------------------------------------------------------
// Nested Clenshaw-Curtis rules on [-1/2, 1/2].
//
// Every node of every level is identified by an integer key on the dyadic
// grid of kKeyBits levels: key / 2^kKeyBits is the node's position in
// [0, 1] in the cosine argument, so nested nodes share keys exactly.

inline constexpr int kKeyBits = 30;
inline constexpr std::int64_t kKeyScale = std::int64_t{1} << kKeyBits;
inline constexpr std::int64_t kCentreKey = kKeyScale / 2;
inline constexpr int kMaxLevel = kKeyBits;

/// m(n): 1 for n = 1, 2^(n-1) + 1 otherwise.
inline int cc_num_nodes(int level) {
  if (level < 1 || level > kMaxLevel) throw ConfigError("Clenshaw-Curtis level out of range");
  return level == 1 ? 1 : (1 << (level - 1)) + 1;
}

/// Key of the k-th (0-based) node of the given level.
inline std::int64_t cc_key(int level, int k) {
  if (level == 1) return kCentreKey;
  return static_cast<std::int64_t>(k) << (kKeyBits - level + 1);
}

/// -cos(pi * key / 2^kKeyBits) / 2, exactly 0 at the centre and exactly
/// antisymmetric about it.
inline double cc_key_value(std::int64_t key) {
  if (key == kCentreKey) return 0.0;
  if (key > kCentreKey) return -cc_key_value(kKeyScale - key);
  return -0.5 * std::cos(kPi * (static_cast<double>(key) / static_cast<double>(kKeyScale)));
}

inline std::vector<double> cc_nodes(int level) {
  const int m = cc_num_nodes(level);
  std::vector<double> y(m);
  for (int k = 0; k < m; ++k) y[k] = cc_key_value(cc_key(level, k));
  return y;
}

/// Clenshaw-Curtis weights for the unit-length interval (they sum to 1).
inline std::vector<double> cc_weights(int level) {
  const int m = cc_num_nodes(level);
  if (m == 1) return {1.0};
  const int n = m - 1;
  std::vector<double> w(m);
  for (int k = 0; k < m; ++k) {
    const double theta = kPi * k / n;
    double s = 1.0;
    for (int j = 1; j <= n / 2; ++j) {
      const double b = (2 * j == n) ? 1.0 : 2.0;
      s -= b * std::cos(2.0 * j * theta) / (4.0 * j * j - 1.0);
    }
    const double c = (k == 0 || k == n) ? 1.0 : 2.0;
    w[k] = 0.5 * c * s / n;
  }
  // Symmetrize so that odd moments vanish to the last bit.
  for (int k = 0; k < m / 2; ++k) w[k] = w[m - 1 - k] = 0.5 * (w[k] + w[m - 1 - k]);
  return w;
}

struct UnivariateRule {
  int level = 1;
  std::vector<double> nodes;
  std::vector<double> weights;
};

inline UnivariateRule cc_rule(int level) { return {level, cc_nodes(level), cc_weights(level)}; }

// ---------------------------------------------------------------------------
// Smolyak rule Q_{N,K} on [-1/2, 1/2]^N.

namespace detail {

inline double binomial(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return std::round(r);
}

// New nodes contributed by level n of the nested univariate sequence.
inline long double new_nodes(int level) {
  if (level == 1) return 1.0L;
  if (level == 2) return 2.0L;
  return std::ldexp(1.0L, level - 2);
}

}  // namespace detail

/// Number of distinct nodes of the merged sparse grid, counted through the
/// generating polynomial (sum_l d(l+1) t^l)^N truncated at degree K.
inline long double smolyak_node_count(int n, int k) {
  if (n < 1 || k < 0) throw ConfigError("smolyak_node_count needs N >= 1, K >= 0");
  std::vector<long double> poly(k + 1, 0.0L), base(k + 1);
  poly[0] = 1.0L;
  for (int l = 0; l <= k; ++l) base[l] = detail::new_nodes(l + 1);
  // Exponentiation by squaring on truncated polynomials.
  auto mul = [k](const std::vector<long double>& a, const std::vector<long double>& b) {
    std::vector<long double> c(k + 1, 0.0L);
    for (int i = 0; i <= k; ++i)
      for (int j = 0; i + j <= k; ++j) c[i + j] += a[i] * b[j];
    return c;
  };
  for (int e = n; e > 0; e >>= 1) {
    if (e & 1) poly = mul(poly, base);
    base = mul(base, base);
  }
  long double total = 0.0L;
  for (auto c : poly) total += c;
  return total;
}

/// Sparse-grid node: the coordinates that differ from 0, as (dimension, key)
/// pairs sorted by dimension.
using SparseNode = std::vector<std::pair<int, std::int64_t>>;

class SmolyakRule {
 public:
  static constexpr double kDefaultNodeCap = 1e7;

  /// Builds Q_{N,K}; throws ResourceLimit if the node count exceeds the cap.
  SmolyakRule(int n, int k, double node_cap = kDefaultNodeCap) : dim_(n), order_(k) {
    if (n < 1 || k < 0) throw ConfigError("smolyak rule needs N >= 1, K >= 0");
    if (k + 1 > kMaxLevel) throw ConfigError("smolyak order too large");
    const long double count = smolyak_node_count(n, k);
    if (count > node_cap)
      throw ResourceLimit("sparse grid with N = " + std::to_string(n) + ", K = " +
                          std::to_string(k) + " has " +
                          std::to_string(static_cast<unsigned long long>(count)) +
                          " nodes, above the cap of " +
                          std::to_string(static_cast<unsigned long long>(node_cap)));
    for (int l = 1; l <= k + 1; ++l) {
      keys_.push_back({});
      for (int i = 0; i < cc_num_nodes(l); ++i) keys_.back().push_back(cc_key(l, i));
      weights_1d_.push_back(cc_weights(l));
    }
    std::vector<std::pair<int, int>> support;  // (dimension, beta)
    enumerate(0, k, support);
    nodes_.shrink_to_fit();
    weights_.shrink_to_fit();
    index_.clear();
  }

  int dimension() const { return dim_; }
  int order() const { return order_; }
  std::size_t size() const { return nodes_.size(); }
  const SparseNode& node(std::size_t i) const { return nodes_[i]; }
  double weight(std::size_t i) const { return weights_[i]; }
  const std::vector<double>& weights() const { return weights_; }

  Eigen::VectorXd point(std::size_t i) const {
    Eigen::VectorXd y = Eigen::VectorXd::Zero(dim_);
    for (const auto& [d, key] : nodes_[i]) y[d] = cc_key_value(key);
    return y;
  }

  /// Sum of w_i f(y_i) in node order.
  template <class F>
  double integrate(F&& f) const {
    double s = 0.0;
    for (std::size_t i = 0; i < size(); ++i) s += weights_[i] * f(point(i));
    return s;
  }

  /// Text dump: one line per node, "weight y_1 ... y_N".
  void write(std::ostream& os) const {
    os.precision(17);
    for (std::size_t i = 0; i < size(); ++i) {
      os << weights_[i];
      const Eigen::VectorXd y = point(i);
      for (Eigen::Index d = 0; d < y.size(); ++d) os << ' ' << y[d];
      os << '\n';
    }
  }

 private:
  // Walks all beta = alpha - 1 with |beta| <= K and |beta| >= K + 1 - N,
  // keeping only the nonzero entries.
  void enumerate(int first_dim, int budget, std::vector<std::pair<int, int>>& support) {
    int used = 0;
    for (const auto& s : support) used += s.second;
    if (used >= std::max(0, order_ + 1 - dim_)) {
      const double c = ((order_ - used) % 2 == 0 ? 1.0 : -1.0) *
                       detail::binomial(dim_ - 1, order_ - used);
      if (c != 0.0) add_tensor(support, c);
    }
    for (int d = first_dim; d < dim_; ++d)
      for (int b = 1; b <= budget; ++b) {
        support.emplace_back(d, b);
        enumerate(d + 1, budget - b, support);
        support.pop_back();
      }
  }

  void add_tensor(const std::vector<std::pair<int, int>>& support, double coeff) {
    const int s = static_cast<int>(support.size());
    std::vector<int> idx(s, 0);
    while (true) {
      SparseNode node;
      double w = coeff;
      for (int j = 0; j < s; ++j) {
        const int level = support[j].second + 1;
        const std::int64_t key = keys_[level - 1][idx[j]];
        w *= weights_1d_[level - 1][idx[j]];
        if (key != kCentreKey) node.emplace_back(support[j].first, key);
      }
      auto [it, inserted] = index_.emplace(node, nodes_.size());
      if (inserted) {
        nodes_.push_back(std::move(node));
        weights_.push_back(w);
      } else {
        weights_[it->second] += w;
      }
      int j = s - 1;
      while (j >= 0 && ++idx[j] == static_cast<int>(keys_[support[j].second].size())) idx[j--] = 0;
      if (j < 0) break;
    }
  }

  int dim_;
  int order_;
  std::vector<std::vector<std::int64_t>> keys_;
  std::vector<std::vector<double>> weights_1d_;
  std::vector<SparseNode> nodes_;
  std::vector<double> weights_;
  std::map<SparseNode, std::size_t> index_;
};

inline SmolyakRule smolyak_rule(int n, int k, double node_cap = SmolyakRule::kDefaultNodeCap) {
  return SmolyakRule(n, k, node_cap);
}

}  // namespace cemcol
