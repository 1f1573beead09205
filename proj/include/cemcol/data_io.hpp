#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cemcol/cem.hpp"
#include "cemcol/surrogate.hpp"

namespace cemcol {

// ---------------------------------------------------------------------------
// Reproducible Gaussian noise: SplitMix64 applied to a counter, Box-Muller.

inline constexpr const char* kNoiseGenerator = "splitmix64-ctr-v1";

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Uniform in (0, 1) from stream `seed`, position `counter`.
inline double counter_uniform(std::uint64_t seed, std::uint64_t counter) {
  const std::uint64_t bits = splitmix64(splitmix64(seed) ^ (counter * 0xD1B54A32D192ED03ull));
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

/// n standard normal draws; draw i depends only on (seed, i).
inline Eigen::VectorXd gaussian_noise(std::uint64_t seed, Eigen::Index n) {
  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; i += 2) {
    const auto pair = static_cast<std::uint64_t>(i / 2);
    const double u1 = counter_uniform(seed, 2 * pair);
    const double u2 = counter_uniform(seed, 2 * pair + 1);
    const double rad = std::sqrt(-2.0 * std::log(u1));
    z[i] = rad * std::cos(kTwoPi * u2);
    if (i + 1 < n) z[i + 1] = rad * std::sin(kTwoPi * u2);
  }
  return z;
}

// ---------------------------------------------------------------------------
// Phantoms.

/// r(phi) = r0 + sum_k a_k cos(k phi) + b_k sin(k phi), k = 1, 2, ...
struct FourierBoundary {
  double r0 = 17.5;
  std::vector<double> cos_coeffs;
  std::vector<double> sin_coeffs;

  double radius(double phi) const {
    double r = r0;
    for (std::size_t k = 0; k < cos_coeffs.size(); ++k) r += cos_coeffs[k] * std::cos((k + 1.0) * phi);
    for (std::size_t k = 0; k < sin_coeffs.size(); ++k) r += sin_coeffs[k] * std::sin((k + 1.0) * phi);
    return r;
  }

  double radius_derivative(double phi) const {
    double d = 0.0;
    for (std::size_t k = 0; k < cos_coeffs.size(); ++k)
      d -= (k + 1.0) * cos_coeffs[k] * std::sin((k + 1.0) * phi);
    for (std::size_t k = 0; k < sin_coeffs.size(); ++k)
      d += (k + 1.0) * sin_coeffs[k] * std::cos((k + 1.0) * phi);
    return d;
  }
};

struct Inclusion {
  Eigen::Vector2d center = Eigen::Vector2d::Zero();
  double radius = 1.0;
  double conductivity = 1.0;
};

struct Phantom {
  FourierBoundary boundary;
  double background = 0.1 * std::sqrt(10.0);
  std::vector<Inclusion> inclusions;  // later entries win where they overlap
  std::vector<double> electrode_angles;
  std::vector<double> contact_resistances;

  double conductivity(const Eigen::Vector2d& x) const {
    double s = background;
    for (const auto& inc : inclusions)
      if ((x - inc.center).squaredNorm() < inc.radius * inc.radius) s = inc.conductivity;
    return s;
  }

  /// Throws if the phantom is not a valid star-shaped body for `m` electrodes.
  void validate(int m) const {
    if (static_cast<int>(electrode_angles.size()) != m ||
        static_cast<int>(contact_resistances.size()) != m)
      throw DimensionMismatch("phantom needs " + std::to_string(m) +
                              " electrode angles and contact resistances");
    if (!(background > 0.0)) throw DomainError("phantom background conductivity must be positive");
    for (const auto& inc : inclusions)
      if (!(inc.conductivity > 0.0) || !(inc.radius > 0.0))
        throw DomainError("phantom inclusions need positive radius and conductivity");
    for (double z : contact_resistances)
      if (!(z > 0.0)) throw DomainError("phantom contact resistances must be positive");
    for (int k = 0; k < 1024; ++k)
      if (!(boundary.radius(kTwoPi * k / 1024) > 0.0))
        throw DomainError("phantom boundary is not star-shaped about the origin");
  }
};

inline void to_json(nlohmann::json& j, const Phantom& p) {
  j["boundary"] = {{"type", "fourier"},
                   {"r0", p.boundary.r0},
                   {"cos", p.boundary.cos_coeffs},
                   {"sin", p.boundary.sin_coeffs}};
  j["background"] = p.background;
  auto& inc = j["inclusions"] = nlohmann::json::array();
  for (const auto& i : p.inclusions)
    inc.push_back({{"center", {i.center.x(), i.center.y()}},
                   {"radius", i.radius},
                   {"conductivity", i.conductivity}});
  j["electrode_angles"] = p.electrode_angles;
  j["contact_resistances"] = p.contact_resistances;
}

inline void from_json(const nlohmann::json& j, Phantom& p) {
  try {
    const auto& b = j.at("boundary");
    if (b.value("type", std::string("fourier")) != "fourier")
      throw FormatError("phantom: only 'fourier' boundaries are supported");
    p.boundary.r0 = b.at("r0").get<double>();
    p.boundary.cos_coeffs = b.value("cos", std::vector<double>{});
    p.boundary.sin_coeffs = b.value("sin", std::vector<double>{});
    p.background = j.at("background").get<double>();
    p.inclusions.clear();
    for (const auto& i : j.value("inclusions", nlohmann::json::array())) {
      const auto c = i.at("center").get<std::vector<double>>();
      if (c.size() != 2) throw FormatError("phantom: inclusion center must have 2 entries");
      p.inclusions.push_back({{c[0], c[1]}, i.at("radius").get<double>(),
                              i.at("conductivity").get<double>()});
    }
    p.electrode_angles = j.at("electrode_angles").get<std::vector<double>>();
    p.contact_resistances = j.at("contact_resistances").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("phantom: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Measurement frames.

struct Units {
  std::string length = "cm";
  std::string conductivity = "mS/cm";
  std::string contact_resistance = "kOhm*cm^2";
  std::string current = "mA";
  std::string voltage = "V";

  bool operator==(const Units&) const = default;
};

struct MeasurementFrame {
  Eigen::MatrixXd current_matrix;  // M x (M-1)
  Eigen::VectorXd voltages;        // Q, column-major over current patterns
  std::optional<double> noise_std;
  std::optional<double> tank_height;
  Units units;

  int num_electrodes() const { return static_cast<int>(current_matrix.rows()); }

  Eigen::MatrixXd voltage_matrix() const {
    const int m = num_electrodes();
    return Eigen::Map<const Eigen::MatrixXd>(voltages.data(), m, m - 1);
  }
};

/// Checks sizes and shifts every voltage column to zero mean.
inline void normalize_frame(MeasurementFrame& f) {
  const int m = f.num_electrodes();
  if (m < 2) throw FormatError("measurement frame needs M >= 2");
  if (f.current_matrix.cols() != m - 1)
    throw FormatError("current_matrix must be " + std::to_string(m) + " x " +
                      std::to_string(m - 1));
  const long q = static_cast<long>(m) * (m - 1);
  if (f.voltages.size() != q)
    throw FormatError("expected Q = " + std::to_string(q) + " voltages for M = " +
                      std::to_string(m) + ", got " + std::to_string(f.voltages.size()));
  CurrentMatrix check(f.current_matrix);
  Eigen::Map<Eigen::MatrixXd> u(f.voltages.data(), m, m - 1);
  // Columns already centred to rounding are left alone, so save -> load is exact.
  const double eps = std::numeric_limits<double>::epsilon();
  for (Eigen::Index j = 0; j < u.cols(); ++j) {
    const double mean = u.col(j).mean();
    if (std::abs(mean) > 4.0 * m * eps * u.col(j).cwiseAbs().maxCoeff()) u.col(j).array() -= mean;
  }
}

inline nlohmann::json frame_to_json(const MeasurementFrame& f) {
  nlohmann::json j;
  j["m"] = f.num_electrodes();
  auto& cur = j["current_matrix"] = nlohmann::json::array();
  for (Eigen::Index i = 0; i < f.current_matrix.rows(); ++i) {
    std::vector<double> row(f.current_matrix.cols());
    for (Eigen::Index k = 0; k < f.current_matrix.cols(); ++k) row[k] = f.current_matrix(i, k);
    cur.push_back(row);
  }
  j["voltages"] = std::vector<double>(f.voltages.data(), f.voltages.data() + f.voltages.size());
  if (f.tank_height) j["tank_height_cm"] = *f.tank_height;
  if (f.noise_std) j["noise_std"] = *f.noise_std;
  j["units"] = {{"length", f.units.length},
                {"conductivity", f.units.conductivity},
                {"contact_resistance", f.units.contact_resistance},
                {"current", f.units.current},
                {"voltage", f.units.voltage}};
  return j;
}

inline MeasurementFrame frame_from_json(const nlohmann::json& j) {
  MeasurementFrame f;
  auto field = [&](const char* key) -> const nlohmann::json& {
    if (!j.contains(key)) throw FormatError(std::string("measurement: missing field '") + key + "'");
    return j.at(key);
  };
  try {
    const int m = field("m").get<int>();
    const auto rows = field("current_matrix").get<std::vector<std::vector<double>>>();
    if (static_cast<int>(rows.size()) != m)
      throw FormatError("measurement: current_matrix has " + std::to_string(rows.size()) +
                        " rows, expected M = " + std::to_string(m));
    f.current_matrix.resize(m, std::max(m - 1, 0));
    for (int i = 0; i < m; ++i) {
      if (static_cast<int>(rows[i].size()) != m - 1)
        throw FormatError("measurement: current_matrix row " + std::to_string(i) + " has " +
                          std::to_string(rows[i].size()) + " entries, expected " +
                          std::to_string(m - 1));
      for (int k = 0; k < m - 1; ++k) f.current_matrix(i, k) = rows[i][k];
    }
    const auto v = field("voltages").get<std::vector<double>>();
    f.voltages = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    if (j.contains("tank_height_cm")) f.tank_height = j.at("tank_height_cm").get<double>();
    if (j.contains("noise_std")) f.noise_std = j.at("noise_std").get<double>();
    if (j.contains("units")) {
      const auto& u = j.at("units");
      f.units.length = u.value("length", f.units.length);
      f.units.conductivity = u.value("conductivity", f.units.conductivity);
      f.units.contact_resistance = u.value("contact_resistance", f.units.contact_resistance);
      f.units.current = u.value("current", f.units.current);
      f.units.voltage = u.value("voltage", f.units.voltage);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("measurement: ") + e.what());
  }
  normalize_frame(f);
  return f;
}

inline void save_measurements(const std::string& path, const MeasurementFrame& f) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os << std::setprecision(17) << frame_to_json(f).dump(2) << '\n';
  if (!os) throw FormatError("failed to write " + path);
}

inline MeasurementFrame load_measurements(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
  return frame_from_json(j);
}

/// Divides the currents by the tank height so a 2-D model reproduces
/// three-dimensional units.
inline MeasurementFrame convert_units(MeasurementFrame f, std::optional<double> tank_height) {
  if (!tank_height) throw ConfigError("tank height is required for unit conversion");
  if (!(*tank_height > 0.0)) throw ConfigError("tank height must be positive");
  f.current_matrix /= *tank_height;
  f.tank_height = *tank_height;
  if (*tank_height != 1.0) f.units.current = f.units.current + "/" + f.units.length;
  return f;
}

// ---------------------------------------------------------------------------
// Simulation.

struct SimulationOptions {
  int mesh_refinement = 2;  // linear refinement over the inversion mesh
  double noise_rel = 1e-3;
  std::uint64_t seed = 0;
  MeshResolution inversion_resolution{};
};

struct Simulation {
  MeasurementFrame frame;
  Eigen::VectorXd exact;  // noise-free voltages
  int mesh_vertices = 0;
};

/// Per-triangle mean of `field` over the 16 sub-triangle centroids.
template <class Field>
Eigen::VectorXd sample_elements(const TriMesh& mesh, Field&& field) {
  const auto& samples = element_sample_points();
  Eigen::VectorXd out(static_cast<Eigen::Index>(mesh.triangles.size()));
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    const auto& tri = mesh.triangles[t];
    double s = 0.0;
    for (const auto& b : samples)
      s += field(Eigen::Vector2d(b[0] * mesh.vertices[tri[0]] + b[1] * mesh.vertices[tri[1]] +
                                 b[2] * mesh.vertices[tri[2]]));
    out[static_cast<Eigen::Index>(t)] = s / static_cast<double>(samples.size());
  }
  return out;
}

/// FEM data for a phantom on a mesh considerably finer than the one behind
/// the surrogate, plus Gaussian noise of std noise_rel * (max V - min V).
inline Simulation simulate(const Phantom& phantom, const SetupConfig& cfg,
                           const SimulationOptions& opt = {}) {
  cfg.validate();
  phantom.validate(cfg.num_electrodes);
  if (opt.mesh_refinement < 2) throw ConfigError("simulation mesh_refinement must be >= 2");
  if (!(opt.noise_rel >= 0.0)) throw ConfigError("noise level must be >= 0");

  const int inversion_vertices =
      MeshFamily(cfg, opt.inversion_resolution).template_for(
          electrode_arcs(Eigen::VectorXd::Zero(cfg.n_gamma), Eigen::VectorXd::Zero(cfg.num_electrodes), cfg))
          ->num_vertices();
  MeshResolution dense = opt.inversion_resolution;
  dense.target_vertices *= opt.mesh_refinement * opt.mesh_refinement;
  std::vector<double> starts;
  for (double a : phantom.electrode_angles) starts.push_back(wrap_angle(a));
  const auto arcs = electrode_arcs(phantom.boundary, starts, cfg.electrode_width);
  TriMesh mesh = MeshFamily(cfg, dense).mesh(phantom.boundary, arcs);
  for (int bump = 0; static_cast<int>(mesh.vertices.size()) < 4 * inversion_vertices; ++bump) {
    if (bump > 8) throw ResourceLimit("cannot reach a simulation mesh 4x denser than the inversion mesh");
    dense.target_vertices = dense.target_vertices * 5 / 4;
    mesh = MeshFamily(cfg, dense).mesh(phantom.boundary, arcs);
  }
  if (static_cast<int>(mesh.vertices.size()) < 4 * inversion_vertices)
    throw std::logic_error("simulation mesh is not 4x denser than the inversion mesh");

  const Eigen::VectorXd sigma =
      sample_elements(mesh, [&](const Eigen::Vector2d& x) { return phantom.conductivity(x); });
  const Eigen::VectorXd z =
      Eigen::Map<const Eigen::VectorXd>(phantom.contact_resistances.data(), cfg.num_electrodes);
  const CurrentMatrix currents = default_currents(cfg.num_electrodes);
  const ForwardSolution sol = solve(assemble(mesh, sigma, z, currents));

  Simulation sim;
  sim.mesh_vertices = static_cast<int>(mesh.vertices.size());
  sim.exact = flatten(sol.electrode_voltages);
  const double tau = opt.noise_rel * (sim.exact.maxCoeff() - sim.exact.minCoeff());
  sim.frame.current_matrix = currents.matrix();
  sim.frame.voltages = sim.exact;
  if (tau > 0.0) sim.frame.voltages += tau * gaussian_noise(opt.seed, sim.exact.size());
  sim.frame.noise_std = tau;
  return sim;
}

}  // namespace cemcol
