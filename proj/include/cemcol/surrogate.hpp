#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cemcol/cem.hpp"
#include "cemcol/sparse_grid.hpp"

namespace cemcol {

// ---------------------------------------------------------------------------
// Orthonormal Legendre polynomials on [-1/2, 1/2]: L_k(t) = sqrt(2k+1) P_k(2t).

inline double legendre_1d(int k, double t) {
  if (k < 0) throw ConfigError("Legendre degree must be >= 0");
  const double x = 2.0 * t;
  double p0 = 1.0, p1 = x;
  if (k == 0) return 1.0;
  for (int n = 1; n < k; ++n) {
    const double p2 = ((2 * n + 1) * x * p1 - n * p0) / (n + 1);
    p0 = p1;
    p1 = p2;
  }
  return std::sqrt(2.0 * k + 1.0) * p1;
}

inline double legendre_1d_derivative(int k, double t) {
  if (k < 0) throw ConfigError("Legendre degree must be >= 0");
  if (k == 0) return 0.0;
  // P_k' = sum of (2j+1) P_j over j = k-1, k-3, ...
  const double x = 2.0 * t;
  double prev = 0.0, cur = 1.0, d = 0.0;
  for (int j = 0; j < k; ++j) {
    if ((k - 1 - j) % 2 == 0) d += (2 * j + 1) * cur;
    const double next = ((2 * j + 1) * x * cur - j * prev) / (j + 1);
    prev = cur;
    cur = next;
  }
  return 2.0 * std::sqrt(2.0 * k + 1.0) * d;
}

/// Multi-index alpha stored sparsely as (dimension, degree) with degree > 0,
/// sorted by dimension.
using MultiIndex = std::vector<std::pair<int, int>>;

class MultiIndexSet {
 public:
  enum class Kind : std::uint8_t { kBilinear = 0, kTotalDegree = 1 };

  /// Constant, then linear by coordinate, then bilinear (j < k) in
  /// lexicographic order; P = (N^2 + N)/2 + 1.
  static MultiIndexSet bilinear(int n) {
    if (n < 1) throw ConfigError("basis dimension must be >= 1");
    MultiIndexSet s(n, Kind::kBilinear, 1);
    s.add({});
    for (int j = 0; j < n; ++j) s.add({{j, 1}});
    for (int j = 0; j < n; ++j)
      for (int k = j + 1; k < n; ++k) s.add({{j, 1}, {k, 1}});
    return s;
  }

  /// All multi-indices of total degree <= degree, by degree and then
  /// lexicographically.
  static MultiIndexSet total_degree(int n, int degree) {
    if (n < 1 || degree < 0) throw ConfigError("bad total-degree basis parameters");
    MultiIndexSet s(n, Kind::kTotalDegree, degree);
    std::vector<int> alpha(n, 0);
    for (int d = 0; d <= degree; ++d) s.fill(alpha, 0, d);
    return s;
  }

  int dimension() const { return dim_; }
  Kind kind() const { return kind_; }
  int max_degree() const { return degree_; }
  std::size_t size() const { return indices_.size(); }
  const MultiIndex& index(std::size_t p) const { return indices_.at(p); }

  /// Position of alpha, or -1.
  long find(const MultiIndex& alpha) const {
    auto it = lookup_.find(alpha);
    return it == lookup_.end() ? -1 : static_cast<long>(it->second);
  }

 private:
  MultiIndexSet(int n, Kind kind, int degree) : dim_(n), kind_(kind), degree_(degree) {}

  void add(MultiIndex alpha) {
    lookup_.emplace(alpha, indices_.size());
    indices_.push_back(std::move(alpha));
  }

  void fill(std::vector<int>& alpha, int d, int remaining) {
    if (d == dim_) {
      if (remaining == 0) {
        MultiIndex a;
        for (int j = 0; j < dim_; ++j)
          if (alpha[j] > 0) a.emplace_back(j, alpha[j]);
        add(std::move(a));
      }
      return;
    }
    for (int v = remaining; v >= 0; --v) {
      alpha[d] = v;
      fill(alpha, d + 1, remaining - v);
    }
    alpha[d] = 0;
  }

  int dim_;
  Kind kind_;
  int degree_;
  std::vector<MultiIndex> indices_;
  std::map<MultiIndex, std::size_t> lookup_;
};

/// L_alpha(y) = prod_j L_{alpha_j}(y_j) for basis index p.
inline double basis_eval(const MultiIndexSet& set, std::size_t p,
                         Eigen::Ref<const Eigen::VectorXd> y) {
  if (p >= set.size()) throw std::out_of_range("basis index " + std::to_string(p) + " >= P");
  if (y.size() != set.dimension()) throw DimensionMismatch("y does not match basis dimension");
  double v = 1.0;
  for (const auto& [d, k] : set.index(p)) v *= legendre_1d(k, y[d]);
  return v;
}

// ---------------------------------------------------------------------------

/// Everything needed to interpret a coefficient matrix without other files.
struct SurrogateHeader {
  SetupConfig config;
  std::vector<int> partition;  // sectors per ring
  Eigen::MatrixXd currents;    // M x (M-1)
  int order = 2;               // Smolyak K
  MultiIndexSet::Kind basis = MultiIndexSet::Kind::kBilinear;
  int basis_degree = 1;
};

/// U(y) = sum_p Uhat(:, p) L_p(y); rows follow the column-major flattening
/// of the M x (M-1) voltage matrix.
class Surrogate {
 public:
  Surrogate(SurrogateHeader header, Eigen::MatrixXd coeffs)
      : header_(std::move(header)), basis_(make_basis(header_)), coeffs_(std::move(coeffs)) {
    if (coeffs_.cols() != static_cast<Eigen::Index>(basis_.size()))
      throw DimensionMismatch("coefficient matrix has " + std::to_string(coeffs_.cols()) +
                              " columns, basis has " + std::to_string(basis_.size()));
    const int m = header_.config.num_electrodes;
    if (coeffs_.rows() != m * (m - 1))
      throw DimensionMismatch("coefficient matrix must have Q = M(M-1) rows");
  }

  const SurrogateHeader& header() const { return header_; }
  const SetupConfig& config() const { return header_.config; }
  const MultiIndexSet& basis() const { return basis_; }
  const Eigen::MatrixXd& coefficients() const { return coeffs_; }
  int dimension() const { return basis_.dimension(); }
  int num_measurements() const { return static_cast<int>(coeffs_.rows()); }
  int num_electrodes() const { return header_.config.num_electrodes; }

  Eigen::VectorXd basis_values(Eigen::Ref<const Eigen::VectorXd> y) const {
    check(y);
    Eigen::VectorXd b(basis_.size());
    for (std::size_t p = 0; p < basis_.size(); ++p) {
      double v = 1.0;
      for (const auto& [d, k] : basis_.index(p)) v *= legendre_1d(k, y[d]);
      b[p] = v;
    }
    return b;
  }

  Eigen::VectorXd eval(Eigen::Ref<const Eigen::VectorXd> y) const {
    return coeffs_ * basis_values(y);
  }

  /// Same values reshaped to the M x (M-1) voltage matrix.
  Eigen::MatrixXd eval_matrix(Eigen::Ref<const Eigen::VectorXd> y) const {
    const Eigen::VectorXd v = eval(y);
    const int m = num_electrodes();
    return Eigen::Map<const Eigen::MatrixXd>(v.data(), m, m - 1);
  }

  Eigen::MatrixXd jacobian(Eigen::Ref<const Eigen::VectorXd> y) const {
    check(y);
    const int n = dimension();
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(coeffs_.rows(), n);
    for (std::size_t p = 0; p < basis_.size(); ++p) {
      const auto& alpha = basis_.index(p);
      for (std::size_t i = 0; i < alpha.size(); ++i) {
        double v = legendre_1d_derivative(alpha[i].second, y[alpha[i].first]);
        if (v == 0.0) continue;
        for (std::size_t l = 0; l < alpha.size(); ++l)
          if (l != i) v *= legendre_1d(alpha[l].second, y[alpha[l].first]);
        if (v != 0.0) jac.col(alpha[i].first) += v * coeffs_.col(static_cast<Eigen::Index>(p));
      }
    }
    return jac;
  }

  /// The surrogate for another current basis, by linearity.
  Surrogate with_currents(const CurrentMatrix& new_currents) const {
    const int m = num_electrodes();
    const CurrentMatrix old_currents(header_.currents);
    if (new_currents.num_electrodes() != m)
      throw DimensionMismatch("surrogate has M = " + std::to_string(m) +
                              ", new currents have M = " +
                              std::to_string(new_currents.num_electrodes()));
    const Eigen::MatrixXd t =
        old_currents.matrix().completeOrthogonalDecomposition().pseudoInverse() *
        new_currents.matrix();
    Eigen::MatrixXd c(coeffs_.rows(), coeffs_.cols());
    for (Eigen::Index p = 0; p < coeffs_.cols(); ++p) {
      Eigen::Map<const Eigen::MatrixXd> u(coeffs_.col(p).data(), m, m - 1);
      Eigen::Map<Eigen::MatrixXd>(c.col(p).data(), m, m - 1) = u * t;
    }
    SurrogateHeader h = header_;
    h.currents = new_currents.matrix();
    return Surrogate(std::move(h), std::move(c));
  }

 private:
  static MultiIndexSet make_basis(const SurrogateHeader& h) {
    const int n = h.config.layout().size();
    return h.basis == MultiIndexSet::Kind::kBilinear ? MultiIndexSet::bilinear(n)
                                                     : MultiIndexSet::total_degree(n, h.basis_degree);
  }

  void check(Eigen::Ref<const Eigen::VectorXd> y) const {
    if (y.size() != dimension())
      throw DimensionMismatch("y has length " + std::to_string(y.size()) + ", surrogate needs " +
                              std::to_string(dimension()));
  }

  SurrogateHeader header_;
  MultiIndexSet basis_;
  Eigen::MatrixXd coeffs_;
};

// ---------------------------------------------------------------------------
// Cubature projection.

struct BuildOptions {
  int threads = 1;
  /// Nodes evaluated per batch; results of a batch are accumulated in node
  /// order, so the output does not depend on the thread count.
  std::size_t batch = 4096;
  std::function<void(std::size_t done, std::size_t total)> progress;
};

/// Uhat(q, p) = sum_k w_k f_q(y_k) L_p(y_k). `forward` maps a point to a
/// vector of length q and must be callable concurrently.
template <class Forward>
Eigen::MatrixXd project(const SmolyakRule& rule, const MultiIndexSet& basis, int q,
                        Forward&& forward, const BuildOptions& opts = {}) {
  if (rule.dimension() != basis.dimension())
    throw DimensionMismatch("rule and basis dimensions differ");
  const std::size_t total = rule.size();
  const std::size_t batch = std::max<std::size_t>(1, opts.batch);
  const int threads = std::max(1, opts.threads);
  Eigen::MatrixXd coeffs = Eigen::MatrixXd::Zero(q, static_cast<Eigen::Index>(basis.size()));
  Eigen::MatrixXd values(q, static_cast<Eigen::Index>(std::min(batch, total)));

  for (std::size_t begin = 0; begin < total; begin += batch) {
    const std::size_t count = std::min(batch, total - begin);
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::size_t failed_node = 0;
    std::mutex failure_mutex;
    auto worker = [&] {
      for (std::size_t i; (i = next.fetch_add(1)) < count;) {
        try {
          const Eigen::VectorXd f = forward(rule.point(begin + i));
          if (f.size() != q) throw DimensionMismatch("forward returned a vector of wrong length");
          values.col(static_cast<Eigen::Index>(i)) = f;
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure || begin + i < failed_node) {
            failure = std::current_exception();
            failed_node = begin + i;
          }
          next = count;
        }
      }
    };
    if (threads == 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
      for (auto& th : pool) th.join();
    }
    if (failure) {
      std::string where = "forward evaluation failed at sparse-grid node " +
                          std::to_string(failed_node) + " (";
      bool first = true;
      for (const auto& [d, key] : rule.node(failed_node)) {
        where += (first ? "" : ", ") + ("y[" + std::to_string(d) + "] = " +
                                         std::to_string(cc_key_value(key)));
        first = false;
      }
      where += first ? "centre)" : ")";
      try {
        std::rethrow_exception(failure);
      } catch (const std::exception& e) {
        throw Error(where + ": " + e.what());
      }
    }

    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t k = begin + i;
      const auto col = values.col(static_cast<Eigen::Index>(i));
      const double w = rule.weight(k);
      if (basis.max_degree() <= 1) {
        // Only indices supported on the node's nonzero coordinates survive,
        // since L_1(0) = 0.
        const SparseNode& node = rule.node(k);
        const Eigen::VectorXd y = rule.point(k);
        const int s = static_cast<int>(node.size());
        for (unsigned mask = 0; mask < (1u << s); ++mask) {
          MultiIndex alpha;
          double v = 1.0;
          for (int j = 0; j < s; ++j)
            if (mask & (1u << j)) {
              alpha.emplace_back(node[j].first, 1);
              v *= legendre_1d(1, y[node[j].first]);
            }
          const long p = basis.find(alpha);
          if (p >= 0) coeffs.col(p) += (w * v) * col;
        }
      } else {
        const Eigen::VectorXd y = rule.point(k);
        for (std::size_t p = 0; p < basis.size(); ++p) {
          const double v = basis_eval(basis, p, y);
          if (v != 0.0) coeffs.col(static_cast<Eigen::Index>(p)) += (w * v) * col;
        }
      }
    }
    if (opts.progress) opts.progress(begin + count, total);
  }
  return coeffs;
}

/// Zeroes coefficients below 1e-14 of the largest magnitude.
inline void truncate_coefficients(Eigen::MatrixXd& coeffs) {
  if (coeffs.size() == 0) return;
  const double cut = 1e-14 * coeffs.cwiseAbs().maxCoeff();
  coeffs = (coeffs.array().abs() < cut).select(0.0, coeffs);
}

inline Eigen::VectorXd flatten(const Eigen::MatrixXd& u) {
  return Eigen::Map<const Eigen::VectorXd>(u.data(), u.size());
}

/// Surrogate of the CEM forward map of `model` from the order-K sparse grid.
inline Surrogate build_surrogate(const ForwardModel& model, int order,
                                 const BuildOptions& opts = {},
                                 double node_cap = SmolyakRule::kDefaultNodeCap) {
  const SetupConfig& cfg = model.config();
  const SmolyakRule rule(cfg.layout().size(), order, node_cap);
  const MultiIndexSet basis = MultiIndexSet::bilinear(cfg.layout().size());
  Eigen::MatrixXd coeffs = project(
      rule, basis, model.num_measurements(),
      [&](const Eigen::VectorXd& y) { return flatten(model.voltages(y)); }, opts);
  truncate_coefficients(coeffs);
  SurrogateHeader h;
  h.config = cfg;
  h.partition = model.meshes().partition().sectors_per_ring();
  h.currents = model.currents().matrix();
  h.order = order;
  return Surrogate(std::move(h), std::move(coeffs));
}

// ---------------------------------------------------------------------------
// Files.

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "surrogate files are written in native little-endian order");

inline constexpr char kSurrogateMagic[8] = {'C', 'E', 'M', 'S', 'U', 'R', 'R', '1'};

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("surrogate file is truncated");
  return v;
}

}  // namespace detail

/// Binary layout (little-endian): magic "CEMSURR1"; u64 N, Q, P, K, M,
/// N_sigma, N_gamma; u8 first_electrode_fixed, u8 basis kind, u8 basis
/// degree; u64 rings then u64 sectors per ring; f64 rho-, rho+, alpha,
/// omega, sigma-, sigma+, zeta-, zeta+; f64 current matrix M x (M-1)
/// column-major; f64 Uhat Q x P row-major.
inline void write_surrogate(std::ostream& os, const Surrogate& s) {
  using detail::put;
  const auto& h = s.header();
  const auto& c = h.config;
  os.write(detail::kSurrogateMagic, 8);
  put<std::uint64_t>(os, s.dimension());
  put<std::uint64_t>(os, s.num_measurements());
  put<std::uint64_t>(os, s.basis().size());
  put<std::uint64_t>(os, h.order);
  put<std::uint64_t>(os, c.num_electrodes);
  put<std::uint64_t>(os, c.n_sigma);
  put<std::uint64_t>(os, c.n_gamma);
  put<std::uint8_t>(os, c.first_electrode_fixed ? 1 : 0);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(h.basis));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(h.basis_degree));
  put<std::uint64_t>(os, h.partition.size());
  for (int sectors : h.partition) put<std::uint64_t>(os, sectors);
  for (double v : {c.rho_minus, c.rho_plus, c.angle_offset, c.electrode_width, c.sigma_bounds[0],
                   c.sigma_bounds[1], c.zeta_bounds[0], c.zeta_bounds[1]})
    put<double>(os, v);
  for (Eigen::Index j = 0; j < h.currents.cols(); ++j)
    for (Eigen::Index i = 0; i < h.currents.rows(); ++i) put<double>(os, h.currents(i, j));
  const auto& u = s.coefficients();
  for (Eigen::Index i = 0; i < u.rows(); ++i)
    for (Eigen::Index p = 0; p < u.cols(); ++p) put<double>(os, u(i, p));
  if (!os) throw FormatError("failed to write surrogate");
}

inline Surrogate read_surrogate(std::istream& is) {
  using detail::get;
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kSurrogateMagic, 8) != 0)
    throw FormatError("not a surrogate file (bad magic)");
  const auto n = get<std::uint64_t>(is);
  const auto q = get<std::uint64_t>(is);
  const auto p = get<std::uint64_t>(is);
  SurrogateHeader h;
  h.order = static_cast<int>(get<std::uint64_t>(is));
  auto& c = h.config;
  c.num_electrodes = static_cast<int>(get<std::uint64_t>(is));
  c.n_sigma = static_cast<int>(get<std::uint64_t>(is));
  c.n_gamma = static_cast<int>(get<std::uint64_t>(is));
  c.first_electrode_fixed = get<std::uint8_t>(is) != 0;
  const auto kind = get<std::uint8_t>(is);
  if (kind > 1) throw FormatError("unknown basis kind " + std::to_string(kind));
  h.basis = static_cast<MultiIndexSet::Kind>(kind);
  h.basis_degree = get<std::uint8_t>(is);
  const auto rings = get<std::uint64_t>(is);
  if (rings == 0 || rings > (1u << 20)) throw FormatError("bad partition ring count");
  for (std::uint64_t r = 0; r < rings; ++r) h.partition.push_back(static_cast<int>(get<std::uint64_t>(is)));
  c.rho_minus = get<double>(is);
  c.rho_plus = get<double>(is);
  c.angle_offset = get<double>(is);
  c.electrode_width = get<double>(is);
  c.sigma_bounds = {get<double>(is), get<double>(is)};
  c.zeta_bounds = {get<double>(is), get<double>(is)};
  c.validate();
  const int m = c.num_electrodes;
  if (n != static_cast<std::uint64_t>(c.layout().size()))
    throw FormatError("header N = " + std::to_string(n) + " does not match the set-up (" +
                      std::to_string(c.layout().size()) + ")");
  if (q != static_cast<std::uint64_t>(m) * (m - 1)) throw FormatError("header Q != M(M-1)");
  h.currents.resize(m, m - 1);
  for (int j = 0; j < m - 1; ++j)
    for (int i = 0; i < m; ++i) h.currents(i, j) = get<double>(is);
  Eigen::MatrixXd u(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(p));
  for (Eigen::Index i = 0; i < u.rows(); ++i)
    for (Eigen::Index k = 0; k < u.cols(); ++k) u(i, k) = get<double>(is);
  return Surrogate(std::move(h), std::move(u));
}

inline void save_surrogate(const std::string& path, const Surrogate& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_surrogate(os, s);
}

inline Surrogate load_surrogate(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_surrogate(is);
}

inline nlohmann::json surrogate_to_json(const Surrogate& s) {
  const auto& h = s.header();
  nlohmann::json j;
  j["format"] = "CEMSURR1-json";
  j["config"] = h.config;
  j["order"] = h.order;
  j["basis"] = h.basis == MultiIndexSet::Kind::kBilinear ? "bilinear" : "total_degree";
  j["basis_degree"] = h.basis_degree;
  j["partition"] = h.partition;
  auto& cur = j["current_matrix"] = nlohmann::json::array();
  for (Eigen::Index i = 0; i < h.currents.rows(); ++i) {
    std::vector<double> row(h.currents.cols());
    for (Eigen::Index k = 0; k < h.currents.cols(); ++k) row[k] = h.currents(i, k);
    cur.push_back(row);
  }
  auto& coef = j["coefficients"] = nlohmann::json::array();
  for (Eigen::Index i = 0; i < s.coefficients().rows(); ++i) {
    std::vector<double> row(s.coefficients().cols());
    for (Eigen::Index k = 0; k < s.coefficients().cols(); ++k) row[k] = s.coefficients()(i, k);
    coef.push_back(row);
  }
  return j;
}

inline Surrogate surrogate_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "CEMSURR1-json") throw FormatError("unknown surrogate JSON format");
    SurrogateHeader h;
    h.config = j.at("config").get<SetupConfig>();
    h.order = j.at("order").get<int>();
    const std::string basis = j.at("basis").get<std::string>();
    if (basis != "bilinear" && basis != "total_degree")
      throw FormatError("unknown basis '" + basis + "'");
    h.basis = basis == "bilinear" ? MultiIndexSet::Kind::kBilinear : MultiIndexSet::Kind::kTotalDegree;
    h.basis_degree = j.at("basis_degree").get<int>();
    h.partition = j.at("partition").get<std::vector<int>>();
    const auto cur = j.at("current_matrix").get<std::vector<std::vector<double>>>();
    const auto coef = j.at("coefficients").get<std::vector<std::vector<double>>>();
    auto to_matrix = [](const std::vector<std::vector<double>>& rows) {
      Eigen::MatrixXd m(rows.size(), rows.empty() ? 0 : rows.front().size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != static_cast<std::size_t>(m.cols()))
          throw FormatError("ragged matrix in surrogate JSON");
        for (std::size_t k = 0; k < rows[i].size(); ++k) m(i, k) = rows[i][k];
      }
      return m;
    };
    h.currents = to_matrix(cur);
    return Surrogate(std::move(h), to_matrix(coef));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("surrogate JSON: ") + e.what());
  }
}

}  // namespace cemcol
