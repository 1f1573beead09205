#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Dense>
#include <json.hpp>

#include "cemcol/errors.hpp"

namespace cemcol {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Sizes of the four parameter blocks. The flattened order is always
/// (conductivity, boundary, electrode angles, contact resistances).
struct ParameterLayout {
  int n_sigma = 0;
  int n_gamma = 0;
  int num_electrodes = 0;

  int size() const { return n_sigma + n_gamma + 2 * num_electrodes; }
  int sigma_offset() const { return 0; }
  int gamma_offset() const { return n_sigma; }
  int electrode_offset() const { return n_sigma + n_gamma; }
  int contact_offset() const { return n_sigma + n_gamma + num_electrodes; }

  bool operator==(const ParameterLayout&) const = default;
};

/// Fixed constants of a measurement set-up.
struct SetupConfig {
  int num_electrodes = 16;
  double electrode_width = 2.0;
  double rho_minus = 15.0;
  double rho_plus = 20.0;
  double angle_offset = 0.1;
  std::array<double, 2> sigma_bounds{0.1, 1.0};
  std::array<double, 2> zeta_bounds{0.05, 1.0};
  int n_sigma = 960;
  int n_gamma = 16;
  bool first_electrode_fixed = true;

  double rho0() const { return 0.5 * (rho_minus + rho_plus); }

  ParameterLayout layout() const { return {n_sigma, n_gamma, num_electrodes}; }

  /// Throws ConfigError on out-of-range fields and NonOverlapViolation when
  /// the electrodes cannot fit on the smallest admissible boundary.
  void validate() const {
    if (num_electrodes < 2) throw ConfigError("num_electrodes must be >= 2");
    if (!(electrode_width > 0.0)) throw ConfigError("electrode_width must be positive");
    if (!(rho_minus > 0.0) || !(rho_minus <= rho_plus))
      throw ConfigError("radii must satisfy 0 < rho_minus <= rho_plus");
    if (!(angle_offset >= 0.0)) throw ConfigError("angle_offset must be >= 0");
    if (!(sigma_bounds[0] > 0.0) || !(sigma_bounds[0] <= sigma_bounds[1]))
      throw ConfigError("sigma_bounds must satisfy 0 < lo <= hi");
    if (!(zeta_bounds[0] > 0.0) || !(zeta_bounds[0] <= zeta_bounds[1]))
      throw ConfigError("zeta_bounds must satisfy 0 < lo <= hi");
    if (n_sigma < 1) throw ConfigError("n_sigma must be >= 1");
    if (n_gamma < 3) throw ConfigError("n_gamma must be >= 3");
    if (!(kTwoPi * rho_minus > num_electrodes * electrode_width))
      throw NonOverlapViolation("electrodes do not fit: 2*pi*rho_minus = " +
                                std::to_string(kTwoPi * rho_minus) + " <= M*width = " +
                                std::to_string(num_electrodes * electrode_width));
  }

  bool operator==(const SetupConfig&) const = default;
};

/// Set-up used for the full-scale experiments (N = 1008).
inline SetupConfig paper_config() { return SetupConfig{}; }

/// Scaled-down set-up that can be built on a desktop (N = 56).
inline SetupConfig desk_config() {
  SetupConfig cfg;
  cfg.num_electrodes = 8;
  cfg.n_sigma = 32;
  cfg.n_gamma = 8;
  return cfg;
}

/// Parameter vector y in the hypercube [-1/2, 1/2]^N, stored flat.
class ParameterVector {
 public:
  explicit ParameterVector(const ParameterLayout& layout)
      : layout_(layout), values_(Eigen::VectorXd::Zero(layout.size())) {}

  ParameterVector(const ParameterLayout& layout, Eigen::VectorXd values)
      : layout_(layout), values_(std::move(values)) {
    if (values_.size() != layout_.size())
      throw DimensionMismatch("parameter vector has length " + std::to_string(values_.size()) +
                              ", layout requires " + std::to_string(layout_.size()));
  }

  const ParameterLayout& layout() const { return layout_; }
  const Eigen::VectorXd& flat() const { return values_; }
  Eigen::VectorXd& flat() { return values_; }

  auto sigma() const { return values_.segment(layout_.sigma_offset(), layout_.n_sigma); }
  auto gamma() const { return values_.segment(layout_.gamma_offset(), layout_.n_gamma); }
  auto electrodes() const {
    return values_.segment(layout_.electrode_offset(), layout_.num_electrodes);
  }
  auto contacts() const {
    return values_.segment(layout_.contact_offset(), layout_.num_electrodes);
  }
  auto sigma() { return values_.segment(layout_.sigma_offset(), layout_.n_sigma); }
  auto gamma() { return values_.segment(layout_.gamma_offset(), layout_.n_gamma); }
  auto electrodes() { return values_.segment(layout_.electrode_offset(), layout_.num_electrodes); }
  auto contacts() { return values_.segment(layout_.contact_offset(), layout_.num_electrodes); }

  bool in_box() const { return values_.size() == 0 || values_.cwiseAbs().maxCoeff() <= 0.5; }

 private:
  ParameterLayout layout_;
  Eigen::VectorXd values_;
};

inline void to_json(nlohmann::json& j, const SetupConfig& c) {
  j = nlohmann::json{{"num_electrodes", c.num_electrodes},
                     {"electrode_width", c.electrode_width},
                     {"rho_minus", c.rho_minus},
                     {"rho_plus", c.rho_plus},
                     {"angle_offset", c.angle_offset},
                     {"sigma_bounds", c.sigma_bounds},
                     {"zeta_bounds", c.zeta_bounds},
                     {"n_sigma", c.n_sigma},
                     {"n_gamma", c.n_gamma},
                     {"first_electrode_fixed", c.first_electrode_fixed}};
}

inline void from_json(const nlohmann::json& j, SetupConfig& c) {
  auto get = [&](const char* key, auto& out) {
    if (!j.contains(key)) throw FormatError(std::string("config: missing key '") + key + "'");
    try {
      j.at(key).get_to(out);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("config: bad value for '") + key + "': " + e.what());
    }
  };
  get("num_electrodes", c.num_electrodes);
  get("electrode_width", c.electrode_width);
  get("rho_minus", c.rho_minus);
  get("rho_plus", c.rho_plus);
  get("angle_offset", c.angle_offset);
  get("sigma_bounds", c.sigma_bounds);
  get("zeta_bounds", c.zeta_bounds);
  get("n_sigma", c.n_sigma);
  get("n_gamma", c.n_gamma);
  c.first_electrode_fixed = j.value("first_electrode_fixed", true);
}

}  // namespace cemcol
