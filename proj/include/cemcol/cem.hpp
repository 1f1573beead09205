#pragma once

#include <array>
#include <cmath>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "cemcol/mesh.hpp"

namespace cemcol {

/// M x (M-1) matrix whose columns are linearly independent current
/// patterns with zero net current.
class CurrentMatrix {
 public:
  explicit CurrentMatrix(Eigen::MatrixXd matrix) : matrix_(std::move(matrix)) {
    const auto m = matrix_.rows();
    if (m < 2) throw ConfigError("current matrix needs at least two electrodes");
    if (matrix_.cols() != m - 1)
      throw DimensionMismatch("current matrix must be M x (M-1), got " +
                              std::to_string(matrix_.rows()) + " x " +
                              std::to_string(matrix_.cols()));
    const double scale = std::max(1.0, matrix_.cwiseAbs().maxCoeff());
    for (Eigen::Index j = 0; j < matrix_.cols(); ++j)
      if (std::abs(matrix_.col(j).sum()) > 1e-12 * scale * m)
        throw ConfigError("current pattern " + std::to_string(j + 1) + " has nonzero net current");
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(matrix_);
    qr.setThreshold(1e-10);
    if (qr.rank() != m - 1) throw ConfigError("current patterns are linearly dependent");
  }

  const Eigen::MatrixXd& matrix() const { return matrix_; }
  int num_electrodes() const { return static_cast<int>(matrix_.rows()); }
  int num_patterns() const { return static_cast<int>(matrix_.cols()); }

 private:
  Eigen::MatrixXd matrix_;
};

/// Column m is e_1 - e_{m+1}.
inline CurrentMatrix default_currents(int m) {
  if (m < 2) throw ConfigError("default_currents needs M >= 2");
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(m, m - 1);
  for (int j = 0; j < m - 1; ++j) {
    c(0, j) = 1.0;
    c(j + 1, j) = -1.0;
  }
  return CurrentMatrix(std::move(c));
}

/// Mean-free basis of R^M: column j is e_j - 1/M.
inline Eigen::MatrixXd mean_free_basis(int m) {
  Eigen::MatrixXd b = Eigen::MatrixXd::Constant(m, m - 1, -1.0 / m);
  for (int j = 0; j < m - 1; ++j) b(j, j) += 1.0;
  return b;
}

/// Grounded CEM system. Unknowns are the nodal potentials followed by the
/// M-1 coordinates of the electrode voltages in the mean-free basis.
struct LinearSystem {
  Eigen::SparseMatrix<double> matrix;
  Eigen::MatrixXd rhs;
  int num_nodes = 0;
  int num_electrodes = 0;
};

struct ForwardSolution {
  Eigen::MatrixXd electrode_voltages;  // M x patterns, zero-mean columns
  Eigen::MatrixXd nodal_potentials;    // nodes x patterns
};

inline LinearSystem assemble(const TriMesh& mesh, const Eigen::VectorXd& sigma,
                             const Eigen::VectorXd& z, const CurrentMatrix& currents) {
  const int n = static_cast<int>(mesh.vertices.size());
  const int m = mesh.num_electrodes;
  if (sigma.size() != static_cast<Eigen::Index>(mesh.triangles.size()))
    throw DimensionMismatch("one conductivity per triangle required");
  if (z.size() != m || currents.num_electrodes() != m)
    throw DimensionMismatch("contact resistances / currents do not match the electrode count");
  if (!(sigma.minCoeff() > 0.0)) throw DomainError("conductivity must be positive");
  if (!(z.minCoeff() > 0.0)) throw DomainError("contact resistances must be positive");

  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(9 * mesh.triangles.size() + 8 * mesh.boundary_edges.size() + m * m);
  for (int t = 0; t < static_cast<int>(mesh.triangles.size()); ++t) {
    const auto& tri = mesh.triangles[t];
    const double area = mesh.signed_area(t);
    if (!(area > 0.0)) throw DomainError("triangle " + std::to_string(t) + " is degenerate");
    // Gradient of the hat function at vertex i is rot(opposite edge) / (2 area).
    std::array<Eigen::Vector2d, 3> g;
    for (int i = 0; i < 3; ++i) {
      const Eigen::Vector2d e = mesh.vertices[tri[(i + 2) % 3]] - mesh.vertices[tri[(i + 1) % 3]];
      g[i] = Eigen::Vector2d(-e.y(), e.x()) / (2.0 * area);
    }
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) trip.emplace_back(tri[i], tri[j], sigma[t] * area * g[i].dot(g[j]));
  }

  const Eigen::MatrixXd basis = mean_free_basis(m);
  Eigen::VectorXd electrode_area = Eigen::VectorXd::Zero(m);
  for (const auto& e : mesh.boundary_edges) {
    if (e.electrode == kGap) continue;
    const double len = (mesh.vertices[e.b] - mesh.vertices[e.a]).norm();
    const double w = 1.0 / z[e.electrode];
    trip.emplace_back(e.a, e.a, w * len / 3.0);
    trip.emplace_back(e.b, e.b, w * len / 3.0);
    trip.emplace_back(e.a, e.b, w * len / 6.0);
    trip.emplace_back(e.b, e.a, w * len / 6.0);
    for (int j = 0; j < m - 1; ++j) {
      const double c = -w * 0.5 * len * basis(e.electrode, j);
      if (c == 0.0) continue;
      for (int node : {e.a, e.b}) {
        trip.emplace_back(node, n + j, c);
        trip.emplace_back(n + j, node, c);
      }
    }
    electrode_area[e.electrode] += len;
  }
  for (int k = 0; k < m; ++k)
    if (!(electrode_area[k] > 0.0))
      throw DomainError("electrode " + std::to_string(k + 1) + " has no boundary edges");
  const Eigen::MatrixXd block =
      basis.transpose() * (electrode_area.cwiseQuotient(z)).asDiagonal() * basis;
  for (int i = 0; i < m - 1; ++i)
    for (int j = 0; j < m - 1; ++j) trip.emplace_back(n + i, n + j, block(i, j));

  LinearSystem sys;
  sys.num_nodes = n;
  sys.num_electrodes = m;
  sys.matrix.resize(n + m - 1, n + m - 1);
  sys.matrix.setFromTriplets(trip.begin(), trip.end());
  sys.rhs = Eigen::MatrixXd::Zero(n + m - 1, currents.num_patterns());
  sys.rhs.bottomRows(m - 1) = basis.transpose() * currents.matrix();
  return sys;
}

inline ForwardSolution solve(const LinearSystem& sys) {
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(sys.matrix);
  if (ldlt.info() != Eigen::Success) throw SolverBreakdown("sparse LDL^T factorization failed");
  const Eigen::VectorXd d = ldlt.vectorD();
  if (!(d.minCoeff() > 0.0))
    throw SolverBreakdown("system is not positive definite (min pivot " +
                          std::to_string(d.minCoeff()) + ", max pivot " +
                          std::to_string(d.maxCoeff()) + ")");
  Eigen::MatrixXd x = ldlt.solve(sys.rhs);
  const double rhs_norm = std::max(sys.rhs.norm(), 1e-300);
  double rel = 0.0;
  for (int it = 0; it < 4; ++it) {
    const Eigen::MatrixXd r = sys.rhs - sys.matrix * x;
    rel = r.norm() / rhs_norm;
    if (rel <= 1e-12) break;
    x += ldlt.solve(r);
  }
  rel = (sys.rhs - sys.matrix * x).norm() / rhs_norm;
  if (!(rel <= 1e-10))
    throw SolverBreakdown("relative residual " + std::to_string(rel) +
                          " exceeds 1e-10 (pivot ratio " +
                          std::to_string(d.maxCoeff() / d.minCoeff()) + ")");

  const int n = sys.num_nodes;
  const int m = sys.num_electrodes;
  ForwardSolution sol;
  sol.nodal_potentials = x.topRows(n);
  sol.electrode_voltages = mean_free_basis(m) * x.bottomRows(m - 1);
  for (Eigen::Index j = 0; j < sol.electrode_voltages.cols(); ++j)
    sol.electrode_voltages.col(j).array() -= sol.electrode_voltages.col(j).mean();
  return sol;
}

/// Voltages under `new_currents` from voltages U measured under
/// `old_currents`, by linearity: U * pinv(I_old) * I_new.
inline Eigen::MatrixXd change_current_basis(const Eigen::MatrixXd& u,
                                            const CurrentMatrix& old_currents,
                                            const CurrentMatrix& new_currents) {
  if (u.cols() != old_currents.num_patterns() ||
      old_currents.num_electrodes() != new_currents.num_electrodes())
    throw DimensionMismatch("voltage matrix does not match the current matrices");
  const Eigen::MatrixXd pinv =
      old_currents.matrix().completeOrthogonalDecomposition().pseudoInverse();
  return u * pinv * new_currents.matrix();
}

/// Debug dump: "A rows cols nnz" followed by "i j value" lines, then
/// "F rows cols" followed by the dense right-hand side row by row.
inline void write_triplets(std::ostream& os, const LinearSystem& sys) {
  os.precision(17);
  os << "A " << sys.matrix.rows() << ' ' << sys.matrix.cols() << ' ' << sys.matrix.nonZeros()
     << '\n';
  for (int k = 0; k < sys.matrix.outerSize(); ++k)
    for (Eigen::SparseMatrix<double>::InnerIterator it(sys.matrix, k); it; ++it)
      os << it.row() << ' ' << it.col() << ' ' << it.value() << '\n';
  os << "F " << sys.rhs.rows() << ' ' << sys.rhs.cols() << '\n';
  for (Eigen::Index i = 0; i < sys.rhs.rows(); ++i) {
    for (Eigen::Index j = 0; j < sys.rhs.cols(); ++j) os << (j ? " " : "") << sys.rhs(i, j);
    os << '\n';
  }
}

// ---------------------------------------------------------------------------

/// Barycentric sample points of the 16 congruent sub-triangles of a
/// triangle split 4 x 4 (their centroids).
inline const std::vector<Eigen::Vector3d>& element_sample_points() {
  static const std::vector<Eigen::Vector3d> points = [] {
    std::vector<Eigen::Vector3d> p;
    constexpr int k = 4;
    for (int a = 0; a < k; ++a)
      for (int b = 0; a + b < k; ++b) {
        const int c = k - 1 - a - b;
        p.emplace_back((a + 1.0 / 3) / k, (b + 1.0 / 3) / k, (c + 1.0 / 3) / k);
        if (c > 0) p.emplace_back((a + 2.0 / 3) / k, (b + 2.0 / 3) / k, (c - 1 + 2.0 / 3) / k);
      }
    return p;
  }();
  return points;
}

/// Mesh of D(y_gamma) plus, for each triangle, the fraction of its sample
/// points falling in each conductivity pixel.
struct Geometry {
  TriMesh mesh;
  Eigen::SparseMatrix<double, Eigen::RowMajor> pixel_weights;  // triangles x pixels

  Eigen::VectorXd element_conductivity(const Eigen::VectorXd& pixel_sigma) const {
    return pixel_weights * pixel_sigma;
  }
};

inline Geometry build_geometry(const MeshFamily& family, Eigen::Ref<const Eigen::VectorXd> y_gamma,
                               Eigen::Ref<const Eigen::VectorXd> y_e) {
  const SetupConfig& cfg = family.config();
  const ConductivityPartition& partition = family.partition();
  Geometry g{family.mesh(y_gamma, y_e), {}};
  const SplineBoundary b(cfg, y_gamma);
  const auto& samples = element_sample_points();
  const double share = 1.0 / static_cast<double>(samples.size());
  std::vector<Eigen::Triplet<double>> trip;
  for (int t = 0; t < static_cast<int>(g.mesh.triangles.size()); ++t) {
    const auto& tri = g.mesh.triangles[t];
    for (const auto& s : samples) {
      const Eigen::Vector2d x =
          s[0] * g.mesh.vertices[tri[0]] + s[1] * g.mesh.vertices[tri[1]] + s[2] * g.mesh.vertices[tri[2]];
      const PolarPoint p = to_polar(x);
      const double ref = std::min(cfg.rho0() * p.radius / b.radius(p.angle), partition.radius());
      trip.emplace_back(t, partition.pixel_at(ref, p.angle), share);
    }
  }
  g.pixel_weights.resize(static_cast<Eigen::Index>(g.mesh.triangles.size()), partition.size());
  g.pixel_weights.setFromTriplets(trip.begin(), trip.end());
  return g;
}

/// Parameter-to-voltage map y -> U(y) for one set-up and current basis.
/// Meshes are cached by (y_gamma, y_E); thread-safe.
class ForwardModel {
 public:
  explicit ForwardModel(const SetupConfig& cfg, const MeshResolution& res = {})
      : ForwardModel(cfg, default_currents(cfg.num_electrodes), res) {}

  ForwardModel(const SetupConfig& cfg, CurrentMatrix currents, const MeshResolution& res = {})
      : family_(cfg, res), currents_(std::move(currents)) {
    if (currents_.num_electrodes() != cfg.num_electrodes)
      throw DimensionMismatch("current matrix does not match num_electrodes");
  }

  const SetupConfig& config() const { return family_.config(); }
  const MeshFamily& meshes() const { return family_; }
  const CurrentMatrix& currents() const { return currents_; }
  int num_measurements() const {
    return currents_.num_electrodes() * currents_.num_patterns();
  }

  std::shared_ptr<const Geometry> geometry(Eigen::Ref<const Eigen::VectorXd> y_gamma,
                                           Eigen::Ref<const Eigen::VectorXd> y_e) const {
    std::vector<double> key(y_gamma.data(), y_gamma.data() + y_gamma.size());
    key.insert(key.end(), y_e.data(), y_e.data() + y_e.size());
    {
      std::lock_guard lock(mutex_);
      if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    }
    auto g = std::make_shared<const Geometry>(build_geometry(family_, y_gamma, y_e));
    std::lock_guard lock(mutex_);
    if (cache_.emplace(key, g).second) {
      order_.push_back(key);
      if (order_.size() > kCacheSize) {
        cache_.erase(order_.front());
        order_.pop_front();
      }
    }
    return g;
  }

  ForwardSolution solve(Eigen::Ref<const Eigen::VectorXd> y) const {
    const SetupConfig& cfg = config();
    const ParameterLayout layout = cfg.layout();
    if (y.size() != layout.size())
      throw DimensionMismatch("parameter vector has length " + std::to_string(y.size()) +
                              ", expected " + std::to_string(layout.size()));
    const auto geo = geometry(y.segment(layout.gamma_offset(), layout.n_gamma),
                              y.segment(layout.electrode_offset(), layout.num_electrodes));
    const Eigen::VectorXd sigma = geo->element_conductivity(
        pixel_conductivities(y.segment(layout.sigma_offset(), layout.n_sigma), cfg));
    const Eigen::VectorXd z =
        contact_resistances(y.segment(layout.contact_offset(), layout.num_electrodes), cfg);
    return cemcol::solve(assemble(geo->mesh, sigma, z, currents_));
  }

  Eigen::MatrixXd voltages(Eigen::Ref<const Eigen::VectorXd> y) const {
    return solve(y).electrode_voltages;
  }

 private:
  static constexpr std::size_t kCacheSize = 64;

  MeshFamily family_;
  CurrentMatrix currents_;
  mutable std::mutex mutex_;
  mutable std::map<std::vector<double>, std::shared_ptr<const Geometry>> cache_;
  mutable std::deque<std::vector<double>> order_;
};

}  // namespace cemcol
