#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "cemcol/config.hpp"

namespace cemcol {

/// Piecewise-constant conductivity pixels on the reference disk D(0).
///
/// The disk is cut into rings of equal radial width; ring j (innermost
/// first) is split into equal angular sectors starting at angle 0. Pixels
/// are numbered ring by ring, sectors counterclockwise.
class ConductivityPartition {
 public:
  struct Pixel {
    int ring = 0;
    int sector = 0;
    double r_inner = 0.0;
    double r_outer = 0.0;
    double phi_begin = 0.0;
    double phi_end = 0.0;
    /// Point given by the mean radius and mean angle of the pixel.
    Eigen::Vector2d centroid = Eigen::Vector2d::Zero();

    double area() const {
      return 0.5 * (phi_end - phi_begin) * (r_outer * r_outer - r_inner * r_inner);
    }
  };

  ConductivityPartition(double radius, std::vector<int> sectors_per_ring)
      : radius_(radius), sectors_(std::move(sectors_per_ring)) {
    if (!(radius_ > 0.0)) throw ConfigError("partition radius must be positive");
    if (sectors_.empty()) throw ConfigError("partition needs at least one ring");
    const int rings = static_cast<int>(sectors_.size());
    for (int j = 0; j < rings; ++j) {
      if (sectors_[j] < 1) throw ConfigError("every ring needs at least one sector");
      ring_start_.push_back(static_cast<int>(pixels_.size()));
      const double r0 = radius_ * j / rings;
      const double r1 = radius_ * (j + 1) / rings;
      for (int s = 0; s < sectors_[j]; ++s) {
        Pixel p;
        p.ring = j;
        p.sector = s;
        p.r_inner = r0;
        p.r_outer = r1;
        p.phi_begin = kTwoPi * s / sectors_[j];
        p.phi_end = kTwoPi * (s + 1) / sectors_[j];
        const double rm = 0.5 * (r0 + r1);
        const double pm = 0.5 * (p.phi_begin + p.phi_end);
        p.centroid = {rm * std::cos(pm), rm * std::sin(pm)};
        pixels_.push_back(p);
      }
    }
  }

  int size() const { return static_cast<int>(pixels_.size()); }
  double radius() const { return radius_; }
  const std::vector<int>& sectors_per_ring() const { return sectors_; }
  const std::vector<Pixel>& pixels() const { return pixels_; }
  const Pixel& pixel(int i) const { return pixels_.at(i); }

  /// Pixel containing the reference-domain point with polar coordinates
  /// (rho, phi). Points on the outer circle belong to the outermost ring.
  int pixel_at(double rho, double phi) const {
    if (rho < 0.0 || rho > radius_ * (1.0 + 1e-12))
      throw DomainError("point at radius " + std::to_string(rho) + " lies outside D(0)");
    const int rings = static_cast<int>(sectors_.size());
    const int j = std::clamp(static_cast<int>(std::floor(rho / radius_ * rings)), 0, rings - 1);
    double a = std::fmod(phi, kTwoPi);
    if (a < 0.0) a += kTwoPi;
    const int s =
        std::clamp(static_cast<int>(std::floor(a / kTwoPi * sectors_[j])), 0, sectors_[j] - 1);
    return ring_start_[j] + s;
  }

  int pixel_at(const Eigen::Vector2d& x) const {
    return pixel_at(x.norm(), std::atan2(x.y(), x.x()));
  }

 private:
  double radius_;
  std::vector<int> sectors_;
  std::vector<int> ring_start_;
  std::vector<Pixel> pixels_;
};

/// Ring/sector layout for n_sigma pixels: N_r rings with N_r^2 dividing
/// n_sigma, ring j carrying k(2j-1) sectors with k = n_sigma / N_r^2.
/// Among admissible N_r the one with k closest to pi (in log scale) wins,
/// which makes the pixels of every ring roughly square.
inline std::vector<int> partition_layout(int n_sigma) {
  if (n_sigma < 1) throw ConfigError("unsupported n_sigma " + std::to_string(n_sigma));
  int best_rings = 1;
  double best_score = std::abs(std::log(static_cast<double>(n_sigma) / kPi));
  for (int rings = 2; rings * rings <= n_sigma; ++rings) {
    if (n_sigma % (rings * rings) != 0) continue;
    const double k = static_cast<double>(n_sigma / (rings * rings));
    const double score = std::abs(std::log(k / kPi));
    if (score < best_score - 1e-12) {
      best_score = score;
      best_rings = rings;
    }
  }
  const int k = n_sigma / (best_rings * best_rings);
  std::vector<int> sectors;
  for (int j = 1; j <= best_rings; ++j) sectors.push_back(k * (2 * j - 1));
  return sectors;
}

inline ConductivityPartition build_partition(const SetupConfig& cfg) {
  return ConductivityPartition(cfg.rho0(), partition_layout(cfg.n_sigma));
}

}  // namespace cemcol
