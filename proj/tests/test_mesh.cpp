#include <algorithm>
#include <map>
#include <random>
#include <utility>

#include <gtest/gtest.h>

#include "cemcol/mesh.hpp"

using namespace cemcol;

namespace {

Eigen::VectorXd random_box(std::mt19937& g, int n) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  Eigen::VectorXd y(n);
  for (auto& v : y) v = u(g);
  return y;
}

// 1/2 closed integral of r(phi)^2 by the periodic trapezoidal rule.
double enclosed_area(const SplineBoundary& b) {
  const int n = 20000;
  double s = 0.0;
  for (int k = 0; k < n; ++k) {
    const double r = b.radius(kTwoPi * k / n);
    s += r * r;
  }
  return 0.5 * s * kTwoPi / n;
}

void expect_conforming(const TriMesh& mesh) {
  std::map<std::pair<int, int>, int> count;
  for (const auto& t : mesh.triangles)
    for (int c = 0; c < 3; ++c) {
      const int a = t[c], b = t[(c + 1) % 3];
      ++count[{std::min(a, b), std::max(a, b)}];
    }
  std::map<std::pair<int, int>, int> boundary;
  for (const auto& e : mesh.boundary_edges) ++boundary[{std::min(e.a, e.b), std::max(e.a, e.b)}];
  for (const auto& [edge, n] : count) {
    const bool on_boundary = boundary.count(edge) > 0;
    EXPECT_EQ(n, on_boundary ? 1 : 2) << "edge " << edge.first << "-" << edge.second;
  }
  for (const auto& [edge, n] : boundary) {
    EXPECT_EQ(n, 1);
    EXPECT_EQ(count.count(edge), 1u);
  }
  // Boundary edges form a single closed counterclockwise loop.
  for (std::size_t k = 0; k < mesh.boundary_edges.size(); ++k)
    EXPECT_EQ(mesh.boundary_edges[k].b,
              mesh.boundary_edges[(k + 1) % mesh.boundary_edges.size()].a);
  for (int t = 0; t < static_cast<int>(mesh.triangles.size()); ++t) EXPECT_GT(mesh.signed_area(t), 0.0);
}

}  // namespace

TEST(Mesh, ReferenceDiskInvariants) {
  const SetupConfig cfg;
  const TriMesh mesh = generate_mesh(Eigen::VectorXd::Zero(cfg.n_gamma),
                                     Eigen::VectorXd::Zero(cfg.num_electrodes), cfg);
  EXPECT_GE(mesh.vertices.size(), 1800u);
  EXPECT_LE(mesh.vertices.size(), 2200u);
  expect_conforming(mesh);
  EXPECT_NEAR(mesh.area(), kPi * 17.5 * 17.5, 0.005 * kPi * 17.5 * 17.5);
  for (int m = 0; m < cfg.num_electrodes; ++m)
    EXPECT_NEAR(mesh.electrode_length(m), cfg.electrode_width, 0.02 * cfg.electrode_width);
  EXPECT_GE(mesh.min_angle_degrees(), 20.0);
  EXPECT_EQ(mesh.element_pixel.size(), mesh.triangles.size());
}

TEST(Mesh, DeskCount) {
  const SetupConfig cfg = desk_config();
  const TriMesh mesh = generate_mesh(Eigen::VectorXd::Zero(cfg.n_gamma),
                                     Eigen::VectorXd::Zero(cfg.num_electrodes), cfg);
  EXPECT_GE(mesh.vertices.size(), 1800u);
  EXPECT_LE(mesh.vertices.size(), 2200u);
}

TEST(Mesh, RandomParametersQuality) {
  for (const SetupConfig& cfg : {SetupConfig{}, desk_config()}) {
    const MeshFamily family(cfg);
    std::mt19937 g(3);
    for (int k = 0; k < 50; ++k) {
      const Eigen::VectorXd yg = random_box(g, cfg.n_gamma);
      const Eigen::VectorXd ye = random_box(g, cfg.num_electrodes);
      const TriMesh mesh = family.mesh(yg, ye);
      const SplineBoundary b(cfg, yg);
      const double area = enclosed_area(b);
      EXPECT_NEAR(mesh.area(), area, 0.005 * area);
      EXPECT_GE(mesh.min_angle_degrees(), 20.0);
      for (int m = 0; m < cfg.num_electrodes; ++m)
        EXPECT_NEAR(mesh.electrode_length(m), cfg.electrode_width, 0.02 * cfg.electrode_width);
      if (k < 5) expect_conforming(mesh);
    }
  }
}

TEST(Mesh, ElectrodeEndsAreVertices) {
  const SetupConfig cfg = desk_config();
  std::mt19937 g(4);
  const Eigen::VectorXd yg = random_box(g, cfg.n_gamma);
  const Eigen::VectorXd ye = random_box(g, cfg.num_electrodes);
  const TriMesh mesh = generate_mesh(yg, ye, cfg);
  const auto arcs = electrode_arcs(yg, ye, cfg);
  const SplineBoundary b(cfg, yg);
  for (int m = 0; m < cfg.num_electrodes; ++m) {
    for (double phi : {arcs[m].start_angle, arcs[m].end_angle}) {
      const Eigen::Vector2d p = to_cartesian({b.radius(phi), phi});
      double best = 1e300;
      for (const auto& e : mesh.boundary_edges)
        if (e.electrode == m) best = std::min({best, (mesh.vertices[e.a] - p).norm(),
                                               (mesh.vertices[e.b] - p).norm()});
      EXPECT_LT(best, 1e-9);
    }
  }
}

TEST(Mesh, Deterministic) {
  const SetupConfig cfg = desk_config();
  std::mt19937 g(5);
  const Eigen::VectorXd yg = random_box(g, cfg.n_gamma);
  const Eigen::VectorXd ye = random_box(g, cfg.num_electrodes);
  const TriMesh a = generate_mesh(yg, ye, cfg);
  const TriMesh b = generate_mesh(yg, ye, cfg);
  ASSERT_EQ(a.vertices.size(), b.vertices.size());
  for (std::size_t i = 0; i < a.vertices.size(); ++i) EXPECT_EQ(a.vertices[i], b.vertices[i]);
  EXPECT_EQ(a.triangles, b.triangles);
  EXPECT_EQ(a.element_pixel, b.element_pixel);
}

TEST(Mesh, TopologyFixedAcrossShapes) {
  // Only the electrode positions can change the template.
  const SetupConfig cfg = desk_config();
  const MeshFamily family(cfg);
  std::mt19937 g(6);
  const Eigen::VectorXd ye = Eigen::VectorXd::Zero(cfg.num_electrodes);
  const TriMesh a = family.mesh(random_box(g, cfg.n_gamma), ye);
  const TriMesh b = family.mesh(random_box(g, cfg.n_gamma), ye);
  EXPECT_EQ(a.triangles, b.triangles);
}

TEST(Mesh, ElementPixelsFollowPullback) {
  const SetupConfig cfg = desk_config();
  std::mt19937 g(7);
  const Eigen::VectorXd yg = random_box(g, cfg.n_gamma);
  const TriMesh mesh = generate_mesh(yg, Eigen::VectorXd::Zero(cfg.num_electrodes), cfg);
  const auto partition = build_partition(cfg);
  for (int t = 0; t < static_cast<int>(mesh.triangles.size()); t += 7) {
    const PolarPoint ref = map_to_reference(to_polar(mesh.centroid(t)), yg, cfg);
    EXPECT_EQ(mesh.element_pixel[t], partition.pixel_at(ref.radius, ref.angle));
  }
}

TEST(Mesh, JsonExport) {
  const SetupConfig cfg = desk_config();
  const TriMesh mesh = generate_mesh(Eigen::VectorXd::Zero(cfg.n_gamma),
                                     Eigen::VectorXd::Zero(cfg.num_electrodes), cfg);
  const auto j = mesh_to_json(mesh);
  EXPECT_EQ(j["vertices"].size(), mesh.vertices.size());
  EXPECT_EQ(j["triangles"].size(), mesh.triangles.size());
  int tagged = 0, gaps = 0;
  for (const auto& e : j["boundary_edges"]) {
    if (e["electrode"].is_null()) {
      ++gaps;
    } else {
      const int m = e["electrode"].get<int>();
      EXPECT_GE(m, 1);
      EXPECT_LE(m, cfg.num_electrodes);
      ++tagged;
    }
  }
  EXPECT_GT(tagged, 0);
  EXPECT_GT(gaps, 0);
}

TEST(Mesh, GapAllocationSumsToTotal) {
  const SetupConfig cfg = desk_config();
  std::mt19937 g(8);
  for (int k = 0; k < 20; ++k) {
    const auto arcs = electrode_arcs(random_box(g, cfg.n_gamma), random_box(g, cfg.num_electrodes), cfg);
    const auto cells = allocate_gap_cells(arcs, 96);
    int sum = 0;
    for (int c : cells) {
      EXPECT_GE(c, 1);
      sum += c;
    }
    EXPECT_EQ(sum, 96);
  }
}

TEST(Mesh, Overlap) {
  SetupConfig cfg = desk_config();
  Eigen::VectorXd ye = Eigen::VectorXd::Zero(cfg.num_electrodes);
  // Push electrode 2 onto electrode 3 with an inflated offset range.
  cfg.angle_offset = 1.0;
  ye[1] = 0.5;
  EXPECT_THROW(generate_mesh(Eigen::VectorXd::Zero(cfg.n_gamma), ye, cfg), NonOverlapViolation);
}
