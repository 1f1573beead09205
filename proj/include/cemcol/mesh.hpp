#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <tuple>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cemcol/geometry.hpp"

namespace cemcol {

struct MeshResolution {
  int target_vertices = 2000;
  /// Local density increase at electrode ends; a power of two.
  int electrode_refinement = 4;

  bool operator==(const MeshResolution&) const = default;
};

inline constexpr int kGap = -1;

struct BoundaryEdge {
  int a = 0;
  int b = 0;
  /// 0-based electrode index, or kGap.
  int electrode = kGap;
};

/// Triangulation of a star-shaped domain with tagged boundary edges.
struct TriMesh {
  std::vector<Eigen::Vector2d> vertices;
  std::vector<std::array<int, 3>> triangles;  // counterclockwise
  std::vector<BoundaryEdge> boundary_edges;   // counterclockwise along the boundary
  /// Pixel of each triangle's centroid pulled back to D(0); empty for meshes
  /// not tied to a conductivity partition.
  std::vector<int> element_pixel;
  int num_electrodes = 0;

  double signed_area(int t) const {
    const auto& [i, j, k] = triangles[t];
    const Eigen::Vector2d e1 = vertices[j] - vertices[i];
    const Eigen::Vector2d e2 = vertices[k] - vertices[i];
    return 0.5 * (e1.x() * e2.y() - e1.y() * e2.x());
  }

  double area() const {
    double a = 0.0;
    for (int t = 0; t < static_cast<int>(triangles.size()); ++t) a += signed_area(t);
    return a;
  }

  Eigen::Vector2d centroid(int t) const {
    const auto& [i, j, k] = triangles[t];
    return (vertices[i] + vertices[j] + vertices[k]) / 3.0;
  }

  double electrode_length(int m) const {
    double len = 0.0;
    for (const auto& e : boundary_edges)
      if (e.electrode == m) len += (vertices[e.b] - vertices[e.a]).norm();
    return len;
  }

  double min_angle_degrees() const {
    double worst = 180.0;
    for (const auto& tri : triangles) {
      for (int c = 0; c < 3; ++c) {
        const Eigen::Vector2d u = vertices[tri[(c + 1) % 3]] - vertices[tri[c]];
        const Eigen::Vector2d v = vertices[tri[(c + 2) % 3]] - vertices[tri[c]];
        const double ang = std::atan2(std::abs(u.x() * v.y() - u.y() * v.x()), u.dot(v));
        worst = std::min(worst, ang * 180.0 / kPi);
      }
    }
    return worst;
  }
};

/// Debug export: vertices, triangles, boundary tags (electrodes 1-based,
/// null for gaps) and element pixels.
inline nlohmann::json mesh_to_json(const TriMesh& mesh) {
  nlohmann::json j;
  j["num_electrodes"] = mesh.num_electrodes;
  auto& verts = j["vertices"] = nlohmann::json::array();
  for (const auto& v : mesh.vertices) verts.push_back({v.x(), v.y()});
  j["triangles"] = mesh.triangles;
  auto& edges = j["boundary_edges"] = nlohmann::json::array();
  for (const auto& e : mesh.boundary_edges) {
    nlohmann::json tag = e.electrode == kGap ? nlohmann::json(nullptr) : nlohmann::json(e.electrode + 1);
    edges.push_back({{"vertices", {e.a, e.b}}, {"electrode", tag}});
  }
  j["element_pixel"] = mesh.element_pixel;
  return j;
}

/// Fixed-topology triangulation of the unit disk in "key" coordinates.
///
/// Angular keys run over [0, T) with T = M * (cells per electrode + cells
/// per gap) * 2^L; key 0 is the start of electrode 1 and electrode ends sit
/// on multiples of 2^L. The disk is cut into radial layers of roughly square
/// cells whose angular count halves towards the centre; cells next to
/// electrode ends are quadtree-refined L times and the tree is 2:1 balanced.
/// Every leaf is fanned from its centre, the innermost ring from the origin.
/// Instantiating the template on a boundary only moves vertices: the
/// angular key map sends electrode ends to the actual electrode ends and
/// radii are scaled by the boundary radius.
class PolarTemplate {
 public:
  struct Spec {
    int num_electrodes = 16;
    int cells_per_electrode = 2;  // even, so electrode 1's centre is a grid line
    int cells_per_gap = 5;  // average over the gaps
    double aspect = 1.0;    // layer thickness / cell arc width
    int refinement_levels = 2;

    bool operator==(const Spec&) const = default;
  };

  /// gap_cells[m] is the number of cells between electrodes m and m+1; they
  /// must sum to M * cells_per_gap. Empty means cells_per_gap everywhere.
  explicit PolarTemplate(const Spec& spec, std::vector<int> gap_cells = {})
      : spec_(spec), gap_cells_(std::move(gap_cells)) {
    if (spec.num_electrodes < 2) throw ConfigError("template needs >= 2 electrodes");
    if (spec.cells_per_electrode < 2 || spec.cells_per_electrode % 2 != 0)
      throw ConfigError("cells_per_electrode must be even and >= 2");
    if (spec.cells_per_gap < 1) throw ConfigError("cells_per_gap must be >= 1");
    if (spec.refinement_levels < 0 || spec.refinement_levels > 6)
      throw ConfigError("refinement_levels out of range");
    unit_ = std::int64_t{1} << spec.refinement_levels;
    if (gap_cells_.empty()) gap_cells_.assign(spec.num_electrodes, spec.cells_per_gap);
    if (static_cast<int>(gap_cells_.size()) != spec.num_electrodes)
      throw DimensionMismatch("gap_cells needs one entry per electrode");
    int sum = 0;
    for (int g : gap_cells_) {
      if (g < 1) throw ConfigError("every gap needs at least one cell");
      sum += g;
    }
    if (sum != spec.num_electrodes * spec.cells_per_gap)
      throw ConfigError("gap_cells must sum to M * cells_per_gap");
    std::int64_t key = 0;
    for (int m = 0; m < spec.num_electrodes; ++m) {
      start_keys_.push_back(key);
      key += static_cast<std::int64_t>(spec.cells_per_electrode + gap_cells_[m]) * unit_;
    }
    total_ = key;
    build_layers();
    build_topology();
  }

  const Spec& spec() const { return spec_; }
  const std::vector<int>& gap_cells() const { return gap_cells_; }
  int num_vertices() const { return static_cast<int>(keys_.size()); }
  int num_triangles() const { return static_cast<int>(triangles_.size()); }
  int num_layers() const { return static_cast<int>(layers_.size()); }

  /// Builds the mesh for boundary b and electrodes `arcs` (electrode order,
  /// counterclockwise).
  template <StarBoundary B>
  TriMesh instantiate(const B& b, std::span<const ElectrodeArc> arcs) const {
    const int m = spec_.num_electrodes;
    if (static_cast<int>(arcs.size()) != m)
      throw DimensionMismatch("template built for " + std::to_string(m) + " electrodes, got " +
                              std::to_string(arcs.size()));
    std::vector<double> starts(m + 1), ends(m);
    starts[0] = arcs[0].start_angle;
    for (int k = 1; k < m; ++k) {
      double a = arcs[k].start_angle;
      while (a <= starts[k - 1]) a += kTwoPi;
      starts[k] = a;
    }
    starts[m] = starts[0] + kTwoPi;
    for (int k = 0; k < m; ++k) {
      ends[k] = starts[k] + arcs[k].span();
      if (!(arcs[k].span() > 0.0) || !(ends[k] < starts[k + 1]))
        throw NonOverlapViolation("electrode " + std::to_string(k + 1) +
                                  " overlaps its successor");
    }

    TriMesh mesh;
    mesh.num_electrodes = m;
    mesh.vertices.reserve(keys_.size());
    const double total = static_cast<double>(total_);
    const double centre_key = 0.5 * static_cast<double>(spec_.cells_per_electrode * unit_);
    const double centre_angle = angle_of(centre_key, starts, ends);
    for (const auto& key : keys_) {
      if (key.center) {
        mesh.vertices.emplace_back(0.0, 0.0);
        continue;
      }
      const double rn = normalized_radius(key.radial);
      double phi = angle_of(key.angle, starts, ends);
      if (rn < kBlendOuter) {
        // Near the centre the electrode layout is irrelevant; fade to a
        // uniform angular map so the innermost rings stay regular.
        const double s = std::clamp((rn - kBlendInner) / (kBlendOuter - kBlendInner), 0.0, 1.0);
        const double w = s * s * (3.0 - 2.0 * s);
        double ak = std::fmod(key.angle, total);
        if (ak < 0.0) ak += total;
        const double uniform = centre_angle + kTwoPi * (ak - centre_key) / total;
        phi = w * phi + (1.0 - w) * uniform;
      }
      const double rho = rn * b.radius(phi);
      mesh.vertices.emplace_back(rho * std::cos(phi), rho * std::sin(phi));
    }
    mesh.triangles = triangles_;
    mesh.boundary_edges = boundary_edges_;
    return mesh;
  }

  // Cells may grow to (1 + kGrading) times the boundary size at the centre.
  static constexpr double kGrading = 2.0;
  static constexpr double kBlendInner = 0.15;
  static constexpr double kBlendOuter = 0.5;

  struct Layer {
    double outer = 1.0;
    double thickness = 0.0;
    int halvings = 0;
  };

  struct Cell {
    int layer = 0;
    int level = 0;
    std::int64_t a0 = 0;
    std::int64_t width = 0;
    std::int64_t r0 = 0;
    std::int64_t height = 0;
  };

  struct VertexKey {
    double radial = 0.0;
    double angle = 0.0;
    bool center = false;
  };

  std::int64_t wrap(std::int64_t a) const { return ((a % total_) + total_) % total_; }

  std::int64_t packed(std::int64_t r, std::int64_t a) const { return r * total_ + wrap(a); }

  void build_layers() {
    const std::int64_t n_total = total_ / unit_;
    const double w0 = kTwoPi / static_cast<double>(n_total);
    std::int64_t n = n_total;
    int halvings = 0;
    double r = 1.0;
    while (true) {
      // n is the cell count of the ring at radius r.
      const bool halve = !layers_.empty() && n % 2 == 0 && n / 2 >= 6 &&
                         r * kTwoPi / static_cast<double>(n / 2) <=
                             1.3 * w0 * (1.0 + kGrading * (1.0 - r));
      const std::int64_t n_layer = halve ? n / 2 : n;
      const double nominal = spec_.aspect * r * kTwoPi / static_cast<double>(n_layer);
      if ((!layers_.empty() && n <= 12 && r <= 2.2 * nominal) || r <= 1.3 * nominal * 0.4) break;
      const double t = std::min(nominal, 0.4 * r);
      if (halve) ++halvings;
      n = n_layer;
      layers_.push_back({r, t, halvings});
      r -= t;
    }
    core_radius_ = r;
  }

  double normalized_radius(double rk) const {
    const double k_max = static_cast<double>(layers_.size()) * static_cast<double>(unit_);
    if (rk >= k_max) return core_radius_;
    const int k = static_cast<int>(std::floor(rk / static_cast<double>(unit_)));
    const double frac = (rk - k * static_cast<double>(unit_)) / static_cast<double>(unit_);
    return layers_[k].outer - frac * layers_[k].thickness;
  }

  double angle_of(double ak, const std::vector<double>& starts,
                  const std::vector<double>& ends) const {
    const double total = static_cast<double>(total_);
    double s = std::fmod(ak, total);
    if (s < 0.0) s += total;
    const auto it = std::upper_bound(start_keys_.begin(), start_keys_.end(), s,
                                     [](double v, std::int64_t k) { return v < static_cast<double>(k); });
    const int m = std::max(0, static_cast<int>(it - start_keys_.begin()) - 1);
    const double u = s - static_cast<double>(start_keys_[m]);
    const double electrode_keys = static_cast<double>(spec_.cells_per_electrode * unit_);
    if (u <= electrode_keys) return starts[m] + u / electrode_keys * (ends[m] - starts[m]);
    const double gap_keys = static_cast<double>(gap_cells_[m] * unit_);
    return ends[m] + (u - electrode_keys) / gap_keys * (starts[m + 1] - ends[m]);
  }

  std::vector<std::int64_t> electrode_end_keys() const {
    std::vector<std::int64_t> e;
    for (int m = 0; m < spec_.num_electrodes; ++m) {
      e.push_back(start_keys_[m]);
      e.push_back(start_keys_[m] + spec_.cells_per_electrode * unit_);
    }
    return e;
  }

  // Distance in keys from point e to the cyclic interval [a0, a0 + w].
  std::int64_t interval_distance(std::int64_t e, std::int64_t a0, std::int64_t w) const {
    const std::int64_t d = wrap(e - a0);
    if (d <= w) return 0;
    return std::min(d - w, total_ - d);
  }

  bool needs_refinement(const Cell& c, const std::vector<std::int64_t>& ends) const {
    if (c.layer != 0 || c.level >= spec_.refinement_levels) return false;
    for (auto e : ends) {
      const std::int64_t dist = std::max(interval_distance(e, c.a0, c.width), c.r0);
      if (dist < c.width) return true;
    }
    return false;
  }

  static std::array<Cell, 4> split(const Cell& c) {
    const std::int64_t w = c.width / 2;
    const std::int64_t h = c.height / 2;
    std::array<Cell, 4> kids;
    int i = 0;
    for (std::int64_t dr : {std::int64_t{0}, h})
      for (std::int64_t da : {std::int64_t{0}, w})
        kids[i++] = Cell{c.layer, c.level + 1, c.a0 + da, w, c.r0 + dr, h};
    return kids;
  }

  template <class Fn>
  void for_each_boundary_key(const Cell& c, Fn&& fn) const {
    // Counterclockwise: outward along the a0 edge, along the outer arc,
    // inward along the a0 + width edge, back along the inner arc.
    for (std::int64_t r = c.r0 + c.height; r > c.r0; --r) fn(r, c.a0);
    for (std::int64_t d = 0; d < c.width; ++d) fn(c.r0, c.a0 + d);
    for (std::int64_t r = c.r0; r < c.r0 + c.height; ++r) fn(r, c.a0 + c.width);
    for (std::int64_t d = c.width; d > 0; --d) fn(c.r0 + c.height, c.a0 + d);
  }

  // Registered vertices strictly inside each of the four cell edges.
  std::array<int, 4> hanging_counts(const Cell& c,
                                    const std::unordered_set<std::int64_t>& reg) const {
    std::array<int, 4> n{0, 0, 0, 0};
    for (std::int64_t r = c.r0 + 1; r < c.r0 + c.height; ++r) {
      n[0] += reg.count(packed(r, c.a0));
      n[2] += reg.count(packed(r, c.a0 + c.width));
    }
    for (std::int64_t d = 1; d < c.width; ++d) {
      n[1] += reg.count(packed(c.r0, c.a0 + d));
      n[3] += reg.count(packed(c.r0 + c.height, c.a0 + d));
    }
    return n;
  }

  std::unordered_set<std::int64_t> registry(const std::vector<Cell>& cells) const {
    std::unordered_set<std::int64_t> reg;
    for (const auto& c : cells)
      for (std::int64_t dr : {std::int64_t{0}, c.height})
        for (std::int64_t da : {std::int64_t{0}, c.width}) reg.insert(packed(c.r0 + dr, c.a0 + da));
    return reg;
  }

  void build_topology() {
    const std::int64_t centre_key = spec_.cells_per_electrode * unit_ / 2;
    std::vector<Cell> cells;
    for (int k = 0; k < static_cast<int>(layers_.size()); ++k) {
      const std::int64_t w = unit_ << layers_[k].halvings;
      const std::int64_t offset = centre_key % w;
      for (std::int64_t a = offset; a < total_ + offset; a += w)
        cells.push_back(Cell{k, 0, a, w, k * unit_, unit_});
    }

    const auto ends = electrode_end_keys();
    for (bool changed = true; changed;) {
      changed = false;
      std::vector<Cell> next;
      for (const auto& c : cells) {
        if (needs_refinement(c, ends)) {
          for (const auto& kid : split(c)) next.push_back(kid);
          changed = true;
        } else {
          next.push_back(c);
        }
      }
      cells.swap(next);
    }
    // 2:1 balance: at most one hanging vertex per cell edge.
    for (bool changed = true; changed;) {
      changed = false;
      const auto reg = registry(cells);
      std::vector<Cell> next;
      for (const auto& c : cells) {
        const auto h = hanging_counts(c, reg);
        if (*std::max_element(h.begin(), h.end()) > 1) {
          if (c.height < 2) throw std::logic_error("polar template: cannot balance cell");
          for (const auto& kid : split(c)) next.push_back(kid);
          changed = true;
        } else {
          next.push_back(c);
        }
      }
      cells.swap(next);
    }

    std::sort(cells.begin(), cells.end(), [&](const Cell& x, const Cell& y) {
      return std::tuple(x.r0, wrap(x.a0)) < std::tuple(y.r0, wrap(y.a0));
    });

    const std::int64_t core_r = static_cast<std::int64_t>(layers_.size()) * unit_;
    std::unordered_set<std::int64_t> reg = registry(cells);
    if (layers_.empty()) {
      // Whole disk is the core fan; the boundary ring carries the electrode
      // ends and nothing else.
      for (std::int64_t a = 0; a < total_; a += unit_) reg.insert(packed(0, a));
    }
    std::vector<std::int64_t> sorted(reg.begin(), reg.end());
    std::sort(sorted.begin(), sorted.end());
    std::map<std::int64_t, int> index;
    for (auto p : sorted) {
      index[p] = static_cast<int>(keys_.size());
      keys_.push_back({static_cast<double>(p / total_), static_cast<double>(p % total_), false});
    }

    for (const auto& c : cells) {
      std::vector<int> loop;
      for_each_boundary_key(c, [&](std::int64_t r, std::int64_t a) {
        auto it = index.find(packed(r, a));
        if (it != index.end()) loop.push_back(it->second);
      });
      const int centre = static_cast<int>(keys_.size());
      keys_.push_back({static_cast<double>(c.r0) + 0.5 * static_cast<double>(c.height),
                       static_cast<double>(c.a0) + 0.5 * static_cast<double>(c.width), false});
      for (std::size_t i = 0; i < loop.size(); ++i)
        triangles_.push_back({centre, loop[i], loop[(i + 1) % loop.size()]});
    }

    std::vector<int> ring;
    for (auto p : sorted)
      if (p / total_ == core_r) ring.push_back(index[p]);
    const int origin = static_cast<int>(keys_.size());
    keys_.push_back({0.0, 0.0, true});
    for (std::size_t i = 0; i < ring.size(); ++i)
      triangles_.push_back({origin, ring[i], ring[(i + 1) % ring.size()]});

    std::vector<std::int64_t> boundary;
    for (auto p : sorted)
      if (p / total_ == 0) boundary.push_back(p % total_);
    const std::int64_t electrode_keys = spec_.cells_per_electrode * unit_;
    for (std::size_t i = 0; i < boundary.size(); ++i) {
      const std::int64_t a = boundary[i];
      const std::int64_t b = i + 1 < boundary.size() ? boundary[i + 1] : total_;
      const auto it = std::upper_bound(start_keys_.begin(), start_keys_.end(), a);
      const std::int64_t m = (it - start_keys_.begin()) - 1;
      const std::int64_t local = a - start_keys_[m];
      const bool on_electrode =
          local < electrode_keys && b - start_keys_[m] <= electrode_keys;
      boundary_edges_.push_back({index[packed(0, a)], index[packed(0, b)],
                                 on_electrode ? static_cast<int>(m) : kGap});
    }
  }

  Spec spec_;
  std::vector<int> gap_cells_;
  std::vector<std::int64_t> start_keys_;
  std::int64_t unit_ = 1;
  std::int64_t total_ = 0;
  std::vector<Layer> layers_;
  double core_radius_ = 1.0;
  std::vector<VertexKey> keys_;
  std::vector<std::array<int, 3>> triangles_;
  std::vector<BoundaryEdge> boundary_edges_;
};

namespace detail {

inline std::int64_t odd_part(std::int64_t n) {
  while (n > 0 && n % 2 == 0) n /= 2;
  return n;
}

}  // namespace detail

/// Picks the template whose vertex count is closest to the target for
/// electrodes covering `electrode_fraction` of their angular period.
/// Electrode and gap cells are kept within 35% of each other in width.
inline PolarTemplate::Spec calibrate_template(int num_electrodes, double electrode_fraction,
                                              const MeshResolution& res) {
  if (res.target_vertices < 50) throw ConfigError("target vertex count too small");
  if (res.electrode_refinement < 1 ||
      !std::has_single_bit(static_cast<unsigned>(res.electrode_refinement)))
    throw ConfigError("electrode_refinement must be a power of two");
  if (!(electrode_fraction > 0.0 && electrode_fraction < 1.0))
    throw ConfigError("electrode fraction must lie in (0, 1)");
  const int levels = std::countr_zero(static_cast<unsigned>(res.electrode_refinement));

  static std::mutex mutex;
  static std::map<std::tuple<int, double, int, int>, PolarTemplate::Spec> cache;
  const auto cache_key = std::tuple(num_electrodes, std::round(electrode_fraction * 1e9) / 1e9,
                                    res.target_vertices, levels);
  {
    std::lock_guard lock(mutex);
    if (auto it = cache.find(cache_key); it != cache.end()) return it->second;
  }

  PolarTemplate::Spec best;
  double best_err = 1e300;
  double best_tie = 1e300;
  bool found = false;
  const int hi = static_cast<int>(2.0 * std::sqrt(kTwoPi * res.target_vertices) / num_electrodes) + 4;
  for (int per = 3; per <= hi; ++per) {
    if (detail::odd_part(static_cast<std::int64_t>(per) * num_electrodes) > 12) continue;
    // Even electrode cell count whose width best matches the gap cells.
    int n_e = 0;
    double ratio = 0.0;
    for (int cand = 2; cand < per; cand += 2) {
      const double r = (electrode_fraction / cand) / ((1.0 - electrode_fraction) / (per - cand));
      if (n_e == 0 || std::abs(std::log(r)) < std::abs(std::log(ratio))) {
        n_e = cand;
        ratio = r;
      }
    }
    if (n_e == 0 || std::abs(std::log(ratio)) > std::log(1.35)) continue;
    const int n_g = per - n_e;
    // Vertex counts fall with the aspect ratio; skip hopeless candidates.
    const int thin = PolarTemplate({num_electrodes, n_e, n_g, 0.9, levels}).num_vertices();
    if (thin < 0.7 * res.target_vertices || thin > 2.0 * res.target_vertices) continue;
    for (int step = 0; step <= 6; ++step) {
      const double aspect = 0.9 + 0.05 * step;
      PolarTemplate::Spec spec{num_electrodes, n_e, n_g, aspect, levels};
      const int count = step == 0 ? thin : PolarTemplate(spec).num_vertices();
      const double err = std::abs(count - res.target_vertices) / double(res.target_vertices);
      const double tie = std::abs(std::log(aspect)) + std::abs(std::log(ratio));
      if (err < best_err - 1e-12 || (std::abs(err - best_err) <= 1e-12 && tie < best_tie)) {
        best = spec;
        best_err = err;
        best_tie = tie;
        found = true;
      }
    }
  }
  if (!found) throw ConfigError("no admissible mesh template for this resolution");
  std::lock_guard lock(mutex);
  cache.emplace(cache_key, best);
  return best;
}

/// Distributes `total` gap cells over the gaps in proportion to their
/// angular lengths (largest remainder), at least one cell per gap.
inline std::vector<int> allocate_gap_cells(std::span<const ElectrodeArc> arcs, int total) {
  const int m = static_cast<int>(arcs.size());
  if (total < m) throw ConfigError("fewer gap cells than gaps");
  std::vector<double> gap(m);
  double sum = 0.0;
  for (int k = 0; k < m; ++k) {
    gap[k] = wrap_angle(arcs[(k + 1) % m].start_angle - arcs[k].end_angle);
    sum += gap[k];
  }
  std::vector<int> cells(m);
  std::vector<double> remainder(m);
  int assigned = 0;
  for (int k = 0; k < m; ++k) {
    // Rounded so that equal gaps receive equal counts despite round-off.
    const double ideal = std::round(total * gap[k] / sum * 1e9) / 1e9;
    cells[k] = std::max(1, static_cast<int>(std::floor(ideal)));
    remainder[k] = ideal - cells[k];
    assigned += cells[k];
  }
  std::vector<int> order(m);
  for (int k = 0; k < m; ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return remainder[a] > remainder[b]; });
  for (int i = 0; assigned < total; i = (i + 1) % m) {
    ++cells[order[i]];
    ++assigned;
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return remainder[a] < remainder[b]; });
  for (int i = 0; assigned > total; i = (i + 1) % m) {
    if (cells[order[i]] > 1) {
      --cells[order[i]];
      --assigned;
    }
  }
  return cells;
}

/// Fraction of the angular period covered by an electrode on the
/// undeformed disk of radius rho0.
inline double nominal_electrode_fraction(const SetupConfig& cfg) {
  return (cfg.electrode_width / cfg.rho0()) / (kTwoPi / cfg.num_electrodes);
}

/// All templates of one set-up: a calibrated spec plus one template per
/// gap allocation, built on demand. Thread-safe.
class MeshFamily {
 public:
  MeshFamily(const SetupConfig& cfg, const MeshResolution& res = {})
      : cfg_(cfg),
        partition_(build_partition(cfg)),
        spec_((cfg.validate(),
               calibrate_template(cfg.num_electrodes, nominal_electrode_fraction(cfg), res))) {}

  const SetupConfig& config() const { return cfg_; }
  const ConductivityPartition& partition() const { return partition_; }
  const PolarTemplate::Spec& spec() const { return spec_; }

  std::shared_ptr<const PolarTemplate> template_for(std::span<const ElectrodeArc> arcs) const {
    auto cells = allocate_gap_cells(arcs, spec_.num_electrodes * spec_.cells_per_gap);
    std::lock_guard lock(mutex_);
    auto& slot = templates_[cells];
    if (!slot) slot = std::make_shared<const PolarTemplate>(spec_, std::move(cells));
    return slot;
  }

  /// Mesh of an arbitrary star-shaped body; element_pixel is left empty.
  template <StarBoundary B>
  TriMesh mesh(const B& b, std::span<const ElectrodeArc> arcs) const {
    return template_for(arcs)->instantiate(b, arcs);
  }

  TriMesh mesh(Eigen::Ref<const Eigen::VectorXd> y_gamma,
               Eigen::Ref<const Eigen::VectorXd> y_e) const {
    const auto arcs = electrode_arcs(y_gamma, y_e, cfg_);
    TriMesh mesh = template_for(arcs)->instantiate(SplineBoundary(cfg_, y_gamma), arcs);
    assign_element_pixels(mesh, y_gamma);
    return mesh;
  }

  /// Fills element_pixel from centroids pulled back to D(0).
  void assign_element_pixels(TriMesh& mesh, Eigen::Ref<const Eigen::VectorXd> y_gamma) const {
    const SplineBoundary b(cfg_, y_gamma);
    mesh.element_pixel.resize(mesh.triangles.size());
    for (int t = 0; t < static_cast<int>(mesh.triangles.size()); ++t) {
      const PolarPoint p = to_polar(mesh.centroid(t));
      const double ref = std::min(cfg_.rho0() * p.radius / b.radius(p.angle), partition_.radius());
      mesh.element_pixel[t] = partition_.pixel_at(ref, p.angle);
    }
  }

 private:
  SetupConfig cfg_;
  ConductivityPartition partition_;
  PolarTemplate::Spec spec_;
  mutable std::mutex mutex_;
  mutable std::map<std::vector<int>, std::shared_ptr<const PolarTemplate>> templates_;
};

inline TriMesh generate_mesh(Eigen::Ref<const Eigen::VectorXd> y_gamma,
                             Eigen::Ref<const Eigen::VectorXd> y_e, const SetupConfig& cfg,
                             const MeshResolution& res = {}) {
  return MeshFamily(cfg, res).mesh(y_gamma, y_e);
}

}  // namespace cemcol
