#pragma once

#include <cmath>
#include <concepts>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "cemcol/config.hpp"
#include "cemcol/partition.hpp"

namespace cemcol {

inline double wrap_angle(double phi) {
  double a = std::fmod(phi, kTwoPi);
  if (a < 0.0) a += kTwoPi;
  return a;
}

// ---------------------------------------------------------------------------
// Periodic quadratic B-splines on the uniform knots k * 2pi / n.

namespace detail {

// Cardinal quadratic B-spline supported on [0, 3).
inline double cardinal_quadratic(double u) {
  if (u < 0.0 || u >= 3.0) return 0.0;
  if (u < 1.0) return 0.5 * u * u;
  if (u < 2.0) return 0.5 * (-2.0 * u * u + 6.0 * u - 3.0);
  const double v = 3.0 - u;
  return 0.5 * v * v;
}

inline double cardinal_quadratic_derivative(double u) {
  if (u < 0.0 || u >= 3.0) return 0.0;
  if (u < 1.0) return u;
  if (u < 2.0) return 3.0 - 2.0 * u;
  return u - 3.0;
}

inline void check_spline_index(int i, int n) {
  if (n < 3) throw ConfigError("need at least 3 boundary splines");
  if (i < 0 || i >= n)
    throw std::out_of_range("spline index " + std::to_string(i) + " not in [0, " +
                            std::to_string(n) + ")");
}

// Local coordinate of phi in the support of spline i, in knot-spacing units.
inline double spline_local(int i, int n, double phi) {
  const double h = kTwoPi / n;
  return wrap_angle(phi - i * h) / h;
}

}  // namespace detail

/// Value of the i-th (0-based) periodic quadratic B-spline out of n at phi.
/// Spline i is supported on [i, i+3] * 2pi/n (mod 2pi).
inline double bspline_basis(int i, int n, double phi) {
  detail::check_spline_index(i, n);
  return detail::cardinal_quadratic(detail::spline_local(i, n, phi));
}

inline double bspline_basis_derivative(int i, int n, double phi) {
  detail::check_spline_index(i, n);
  return detail::cardinal_quadratic_derivative(detail::spline_local(i, n, phi)) * n / kTwoPi;
}

// ---------------------------------------------------------------------------
// Star-shaped boundaries r = r(phi).

template <class B>
concept StarBoundary = requires(const B& b, double phi) {
  { b.radius(phi) } -> std::convertible_to<double>;
  { b.radius_derivative(phi) } -> std::convertible_to<double>;
};

/// Boundary curve r(phi) = rho0 + (rho+ - rho-) sum_i y_i psi_i(phi).
class SplineBoundary {
 public:
  SplineBoundary(const SetupConfig& cfg, Eigen::Ref<const Eigen::VectorXd> y_gamma)
      : rho0_(cfg.rho0()), amplitude_(cfg.rho_plus - cfg.rho_minus), coeffs_(y_gamma) {
    if (coeffs_.size() != cfg.n_gamma)
      throw DimensionMismatch("y_gamma has length " + std::to_string(coeffs_.size()) +
                              ", expected " + std::to_string(cfg.n_gamma));
  }

  double radius(double phi) const { return rho0_ + amplitude_ * sum(phi, false); }
  double radius_derivative(double phi) const { return amplitude_ * sum(phi, true); }
  double reference_radius() const { return rho0_; }

 private:
  // Only three splines are nonzero at any angle.
  double sum(double phi, bool derivative) const {
    const int n = static_cast<int>(coeffs_.size());
    const double h = kTwoPi / n;
    const double u = wrap_angle(phi) / h;
    const int cell = std::min(static_cast<int>(std::floor(u)), n - 1);
    double acc = 0.0;
    for (int back = 0; back < 3; ++back) {
      const int i = ((cell - back) % n + n) % n;
      const double local = u - (cell - back);
      acc += coeffs_[i] * (derivative ? detail::cardinal_quadratic_derivative(local) / h
                                      : detail::cardinal_quadratic(local));
    }
    return acc;
  }

  double rho0_;
  double amplitude_;
  Eigen::VectorXd coeffs_;
};

inline double boundary_radius(double phi, Eigen::Ref<const Eigen::VectorXd> y_gamma,
                              const SetupConfig& cfg) {
  return SplineBoundary(cfg, y_gamma).radius(phi);
}

struct PolarPoint {
  double radius = 0.0;
  double angle = 0.0;
};

/// Radial homeomorphism D(y_gamma) -> D(0).
inline PolarPoint map_to_reference(const PolarPoint& p, Eigen::Ref<const Eigen::VectorXd> y_gamma,
                                   const SetupConfig& cfg) {
  const double r = boundary_radius(p.angle, y_gamma, cfg);
  if (p.radius < 0.0 || p.radius > r * (1.0 + 1e-12))
    throw DomainError("point at radius " + std::to_string(p.radius) +
                      " lies outside D(y_gamma) (boundary radius " + std::to_string(r) + ")");
  return {cfg.rho0() * p.radius / r, p.angle};
}

inline PolarPoint map_from_reference(const PolarPoint& p,
                                     Eigen::Ref<const Eigen::VectorXd> y_gamma,
                                     const SetupConfig& cfg) {
  const double rho0 = cfg.rho0();
  if (p.radius < 0.0 || p.radius > rho0 * (1.0 + 1e-12))
    throw DomainError("point at radius " + std::to_string(p.radius) + " lies outside D(0)");
  return {p.radius * boundary_radius(p.angle, y_gamma, cfg) / rho0, p.angle};
}

inline PolarPoint to_polar(const Eigen::Vector2d& x) {
  return {x.norm(), std::atan2(x.y(), x.x())};
}

inline Eigen::Vector2d to_cartesian(const PolarPoint& p) {
  return {p.radius * std::cos(p.angle), p.radius * std::sin(p.angle)};
}

// ---------------------------------------------------------------------------
// Arc length and electrodes.

template <StarBoundary B>
double boundary_speed(const B& b, double phi) {
  return std::hypot(b.radius(phi), b.radius_derivative(phi));
}

/// Counterclockwise arc length of the boundary between angles phi0 <= phi1.
template <StarBoundary B>
double arc_length(const B& b, double phi0, double phi1) {
  if (phi1 == phi0) return 0.0;
  using Integrator = boost::math::quadrature::gauss_kronrod<double, 15>;
  return Integrator::integrate([&](double t) { return boundary_speed(b, t); }, phi0, phi1, 20,
                               1e-10);
}

/// Angle phi1 > phi0 at which the arc length from phi0 reaches `length`.
template <StarBoundary B>
double angle_at_arc_length(const B& b, double phi0, double length) {
  double phi = phi0 + length / b.radius(phi0);
  for (int it = 0; it < 60; ++it) {
    const double residual = arc_length(b, phi0, phi) - length;
    const double step = residual / boundary_speed(b, phi);
    phi -= step;
    if (std::abs(step) < 1e-14 * (1.0 + std::abs(phi))) break;
  }
  return phi;
}

template <StarBoundary B>
double circumference(const B& b) {
  return arc_length(b, 0.0, kTwoPi);
}

/// An electrode occupies the boundary between start_angle and end_angle
/// (counterclockwise). start_angle is in [0, 2pi); end_angle may exceed 2pi.
struct ElectrodeArc {
  double start_angle = 0.0;
  double end_angle = 0.0;

  double span() const { return end_angle - start_angle; }
};

/// Starting angles theta_m(y_E), wrapped to [0, 2pi).
inline std::vector<double> electrode_angles(Eigen::Ref<const Eigen::VectorXd> y_e,
                                            const SetupConfig& cfg) {
  const int m = cfg.num_electrodes;
  if (y_e.size() != m)
    throw DimensionMismatch("y_E has length " + std::to_string(y_e.size()) + ", expected " +
                            std::to_string(m));
  std::vector<double> theta(m);
  for (int k = 0; k < m; ++k)
    theta[k] = wrap_angle(k * kTwoPi / m + 2.0 * cfg.angle_offset * y_e[k]);
  if (cfg.first_electrode_fixed) theta[0] = 0.0;
  return theta;
}

/// Lower bound on the arc-length gap between neighbouring electrodes over
/// the whole parameter box: rho- (2pi/M - 2 alpha) - width.
inline double min_electrode_gap_bound(const SetupConfig& cfg) {
  return cfg.rho_minus * (kTwoPi / cfg.num_electrodes - 2.0 * cfg.angle_offset) -
         cfg.electrode_width;
}

/// Electrode arcs of the given width starting at `start_angles` (listed in
/// counterclockwise order) on boundary b. Throws NonOverlapViolation when two
/// electrodes overlap, touch or change order.
template <StarBoundary B>
std::vector<ElectrodeArc> electrode_arcs(const B& b, std::span<const double> start_angles,
                                         double width) {
  const int m = static_cast<int>(start_angles.size());
  if (m < 2) throw ConfigError("need at least two electrodes");
  std::vector<double> gaps(m);
  double total = 0.0;
  for (int k = 0; k < m; ++k) {
    double d = wrap_angle(start_angles[(k + 1) % m] - start_angles[k]);
    gaps[k] = d;
    total += d;
  }
  if (std::abs(total - kTwoPi) > 1e-9)
    throw NonOverlapViolation("electrode starting angles are not in counterclockwise order");
  std::vector<ElectrodeArc> arcs(m);
  for (int k = 0; k < m; ++k) {
    const double start = wrap_angle(start_angles[k]);
    const double spacing = arc_length(b, start, start + gaps[k]);
    if (!(spacing > width))
      throw NonOverlapViolation("electrodes " + std::to_string(k + 1) + " and " +
                                std::to_string((k + 1) % m + 1) + " overlap: spacing " +
                                std::to_string(spacing) + " <= width " + std::to_string(width));
    arcs[k] = {start, angle_at_arc_length(b, start, width)};
  }
  return arcs;
}

inline std::vector<ElectrodeArc> electrode_arcs(Eigen::Ref<const Eigen::VectorXd> y_gamma,
                                                Eigen::Ref<const Eigen::VectorXd> y_e,
                                                const SetupConfig& cfg) {
  cfg.validate();
  const SplineBoundary b(cfg, y_gamma);
  const auto theta = electrode_angles(y_e, cfg);
  return electrode_arcs(b, theta, cfg.electrode_width);
}

// ---------------------------------------------------------------------------
// Conductivity and contact resistances.

/// exp(log(sqrt(lo*hi)) + log(hi/lo) * t); maps [-1/2, 1/2] onto [lo, hi].
inline double log_interpolate(double lo, double hi, double t) {
  return std::exp(0.5 * std::log(lo * hi) + std::log(hi / lo) * t);
}

inline Eigen::VectorXd pixel_conductivities(Eigen::Ref<const Eigen::VectorXd> y_sigma,
                                            const SetupConfig& cfg) {
  if (y_sigma.size() != cfg.n_sigma)
    throw DimensionMismatch("y_sigma has length " + std::to_string(y_sigma.size()) +
                            ", expected " + std::to_string(cfg.n_sigma));
  Eigen::VectorXd s(y_sigma.size());
  for (Eigen::Index i = 0; i < s.size(); ++i)
    s[i] = log_interpolate(cfg.sigma_bounds[0], cfg.sigma_bounds[1], y_sigma[i]);
  return s;
}

/// Conductivity at x in D(y_gamma): the reference conductivity at Phi(x).
inline double conductivity_at(const Eigen::Vector2d& x, Eigen::Ref<const Eigen::VectorXd> y_sigma,
                              Eigen::Ref<const Eigen::VectorXd> y_gamma, const SetupConfig& cfg,
                              const ConductivityPartition& partition) {
  if (y_sigma.size() != partition.size())
    throw DimensionMismatch("y_sigma does not match the partition size");
  const PolarPoint ref = map_to_reference(to_polar(x), y_gamma, cfg);
  const int pixel = partition.pixel_at(ref.radius, ref.angle);
  return log_interpolate(cfg.sigma_bounds[0], cfg.sigma_bounds[1], y_sigma[pixel]);
}

inline Eigen::VectorXd contact_resistances(Eigen::Ref<const Eigen::VectorXd> y_z,
                                           const SetupConfig& cfg) {
  if (y_z.size() != cfg.num_electrodes)
    throw DimensionMismatch("y_z has length " + std::to_string(y_z.size()) + ", expected " +
                            std::to_string(cfg.num_electrodes));
  Eigen::VectorXd z(y_z.size());
  for (Eigen::Index m = 0; m < z.size(); ++m)
    z[m] = log_interpolate(cfg.zeta_bounds[0], cfg.zeta_bounds[1], y_z[m]);
  return z;
}

}  // namespace cemcol
