// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "mapvae/errors.hpp"
#include "mapvae/geometry.hpp"
#include "mapvae/pointcloud_io.hpp"
#include "mapvae/rng.hpp"

using namespace mapvae;
using namespace mapvae::geometry;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
  const auto path = std::filesystem::temp_directory_path() / name;
  std::ofstream out(path);
  out << content;
  return path.string();
}

PointCloud line_cloud(std::initializer_list<double> xs) {
  PointCloud c;
  for (double x : xs) c.points.push_back({x, 0.0, 0.0});
  return c;
}

// Brute-force shortest path by exhaustive simple-path enumeration. Exact for
// small graphs; the independent oracle for Dijkstra.
void enumerate_paths(const NeighborGraph& g, std::size_t u, std::size_t target,
                     double acc, std::vector<bool>& visited, double& best) {
  if (u == target) {
    best = std::min(best, acc);
    return;
  }
  for (const auto& e : g.adj[u]) {
    if (visited[e.to]) continue;
    visited[e.to] = true;
    enumerate_paths(g, e.to, target, acc + e.w, visited, best);
    visited[e.to] = false;
  }
}

double bruteforce_distance(const NeighborGraph& g, std::size_t s, std::size_t t) {
  std::vector<bool> visited(g.size(), false);
  visited[s] = true;
  double best = std::numeric_limits<double>::infinity();
  enumerate_paths(g, s, t, 0.0, visited, best);
  return best;
}

}  // namespace

TEST_CASE("xyz loader reads points back verbatim") {
  const auto path = write_temp("t_load.xyz", "0 0 0\n1 0 0\n0 1 0\n");
  const PointCloud c = load_point_cloud(path, CloudFormat::xyz_text);
  REQUIRE(c.size() == 3);
  CHECK(c.points[1][0] == 1.0);
  CHECK(c.points[2][1] == 1.0);
  CHECK(!c.has_labels());
}

TEST_CASE("xyz loader rejects empty and malformed input") {
  const auto empty = write_temp("t_empty.xyz", "");
  CHECK_THROWS_AS(load_point_cloud(empty, CloudFormat::xyz_text), DataError);

  const auto bad = write_temp("t_bad.xyz", "0 0 0\n1 oops 0\n");
  try {
    load_point_cloud(bad, CloudFormat::xyz_text);
    FAIL("expected parse error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);  // line number
  }

  const auto inf = write_temp("t_inf.xyz", "0 0 inf\n");
  CHECK_THROWS_AS(load_point_cloud(inf, CloudFormat::xyz_text), DataError);
}

TEST_CASE("xyz labels round-trip") {
  const auto path = write_temp("t_lab.xyz", "0 0 0 1\n1 0 0 2\n");
  const PointCloud c = load_point_cloud(path, CloudFormat::xyz_text);
  REQUIRE(c.has_labels());
  CHECK(c.labels == std::vector<int>{1, 2});
}

TEST_CASE("off sampling stays on a single-triangle plane") {
  const auto path = write_temp("t_tri.off", "OFF\n3 1 0\n0 0 0\n2 0 0\n0 2 0\n3 0 1 2\n");
  const PointCloud c = load_point_cloud(path, CloudFormat::off_mesh, 100, 42);
  REQUIRE(c.size() == 100);
  for (const Vec3& p : c.points) {
    CHECK(std::abs(p[2]) <= 1e-9);  // triangle lies in z=0
    // barycentric membership: x,y >= 0 and x/2 + y/2 <= 1
    CHECK(p[0] >= -1e-9);
    CHECK(p[1] >= -1e-9);
    CHECK(p[0] / 2 + p[1] / 2 <= 1.0 + 1e-9);
  }
  // determinism
  const PointCloud c2 = load_point_cloud(path, CloudFormat::off_mesh, 100, 42);
  CHECK(c.points == c2.points);
}

TEST_CASE("off with zero area is a degenerate mesh") {
  const auto path = write_temp("t_degen.off", "OFF\n3 1 0\n0 0 0\n0 0 0\n0 0 0\n3 0 1 2\n");
  CHECK_THROWS_AS(load_point_cloud(path, CloudFormat::off_mesh, 10, 1), DataError);
}

TEST_CASE("normalize maps the hand-computed pair to the unit segment") {
  PointCloud c;
  c.points = {{1, 1, 1}, {3, 1, 1}};
  const PointCloud n = normalize(c);
  CHECK(n.points[0][0] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(n.points[1][0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(n.points[0][1]) <= 1e-12);
  CHECK(std::abs(n.points[0][2]) <= 1e-12);
}

TEST_CASE("normalize invariants and idempotence") {
  const PointCloud raw = synth_shape("box", {}, 64, 3);
  const PointCloud n1 = normalize(raw);
  Vec3 centroid = {0, 0, 0};
  double max_norm = 0.0;
  for (const Vec3& p : n1.points) {
    centroid = centroid + p;
    max_norm = std::max(max_norm, norm(p));
  }
  centroid = (1.0 / static_cast<double>(n1.size())) * centroid;
  CHECK(norm(centroid) <= 1e-9);
  CHECK(max_norm == doctest::Approx(1.0).epsilon(1e-9));

  const PointCloud n2 = normalize(n1);
  for (std::size_t i = 0; i < n1.size(); ++i) {
    CHECK(dist(n1.points[i], n2.points[i]) <= 1e-12);
  }
}

TEST_CASE("normalize rejects a repeated single point") {
  PointCloud c;
  c.points = {{2, 2, 2}, {2, 2, 2}};
  CHECK_THROWS_AS(normalize(c), DataError);
}

TEST_CASE("synth shapes meet their surface contracts") {
  SynthParams sp;
  const PointCloud sphere = synth_shape("sphere", sp, 256, 5);
  REQUIRE(sphere.size() == 256);
  for (const Vec3& p : sphere.points) CHECK(norm(p) == doctest::Approx(1.0).epsilon(1e-9));

  const PointCloud chair = synth_shape("two-part-chair", sp, 256, 5);
  std::set<int> labs(chair.labels.begin(), chair.labels.end());
  CHECK(labs.size() == 2);

  const PointCloud again = synth_shape("sphere", sp, 256, 5);
  CHECK(sphere.points == again.points);

  CHECK_THROWS_AS(synth_shape("torus", sp, 64, 1), UsageError);
}

TEST_CASE("knn graph on collinear points matches the exhaustive answer") {
  const PointCloud c = line_cloud({0, 1, 2});
  const NeighborGraph g = build_knn_graph(c, 1);
  CHECK(g.has_edge(0, 1));
  CHECK(g.has_edge(1, 0));
  CHECK(g.has_edge(1, 2));
  CHECK(g.has_edge(2, 1));
  CHECK(!g.has_edge(0, 2));
}

TEST_CASE("knn graph with k = count-1 is complete and duplicates are fine") {
  const PointCloud c = synth_shape("sphere", {}, 16, 9);
  const NeighborGraph g = build_knn_graph(c, 15);
  for (std::size_t i = 0; i < 16; ++i) CHECK(g.adj[i].size() == 15);

  PointCloud dup;
  dup.points = {{0, 0, 0}, {0, 0, 0}, {1, 0, 0}};
  const NeighborGraph gd = build_knn_graph(dup, 1);
  CHECK(gd.has_edge(0, 1));
  CHECK(gd.has_edge(1, 0));
  for (std::size_t a = 0; a < 3; ++a) {
    for (const auto& e : gd.adj[a]) {
      CHECK(gd.has_edge(e.to, a));  // symmetry
    }
  }
}

TEST_CASE("geodesic distances on a path graph") {
  const PointCloud c = line_cloud({0, 1, 2});
  const NeighborGraph g = build_knn_graph(c, 1);
  const auto d = geodesic_distances(g, 0);
  CHECK(d[0] == 0.0);
  CHECK(d[1] == doctest::Approx(1.0));
  CHECK(d[2] == doctest::Approx(2.0));
}

TEST_CASE("disconnected vertices are infinitely far") {
  NeighborGraph g;
  g.adj.assign(3, {});
  g.adj[0].push_back({1, 1.0});
  g.adj[1].push_back({0, 1.0});
  const auto d = geodesic_distances(g, 0);
  CHECK(std::isinf(d[2]));
}

TEST_CASE("dijkstra equals brute-force path enumeration on small random graphs") {
  rng::Engine eng(77);
  for (int trial = 0; trial < 25; ++trial) {
    PointCloud c;
    const std::size_t n = 8;
    for (std::size_t i = 0; i < n; ++i) {
      c.points.push_back({rng::uniform(eng, -1, 1), rng::uniform(eng, -1, 1),
                          rng::uniform(eng, -1, 1)});
    }
    const NeighborGraph g = build_knn_graph(c, 2);
    const std::size_t s = rng::below(eng, n);
    const auto d = geodesic_distances(g, s);
    for (std::size_t t = 0; t < n; ++t) {
      const double want = t == s ? 0.0 : bruteforce_distance(g, s, t);
      if (std::isinf(want)) {
        CHECK(std::isinf(d[t]));
      } else {
        CHECK(d[t] == doctest::Approx(want).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("geodesic distances satisfy the triangle inequality over edges") {
  const PointCloud c = normalize(synth_shape("cylinder", {}, 30, 11));
  const NeighborGraph g = build_knn_graph(c, 3);
  const auto d = geodesic_distances(g, 0);
  CHECK(d[0] == 0.0);
  for (std::size_t u = 0; u < g.size(); ++u) {
    for (const auto& e : g.adj[u]) {
      if (std::isfinite(d[u])) CHECK(d[e.to] <= d[u] + e.w + 1e-12);
    }
  }
}

TEST_CASE("viewpoints are equally spaced on the scaled circle") {
  const PointCloud c = normalize(synth_shape("sphere", {}, 64, 2));
  const auto vps = viewpoints(c, 4, 1, 2.0);
  REQUIRE(vps.size() == 4);
  for (const auto& vp : vps) {
    CHECK(norm(vp.position) == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(std::abs(vp.position[1]) <= 1e-9);  // plane orthogonal to y
  }
  for (int i = 0; i < 4; ++i) {
    const Vec3& a = vps[static_cast<std::size_t>(i)].position;
    const Vec3& b = vps[static_cast<std::size_t>((i + 1) % 4)].position;
    const double cosang = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / 4.0;
    CHECK(cosang == doctest::Approx(0.0).epsilon(1e-9));  // 90 degrees apart
  }

  const auto one = viewpoints(c, 1, 1, 2.0);
  CHECK(one[0].position[0] == doctest::Approx(2.0));  // +x reference direction
  CHECK(std::abs(one[0].position[2]) <= 1e-9);
}

TEST_CASE("euclidean split of collinear points") {
  const PointCloud c = line_cloud({0, 1, 2, 3});
  const Viewpoint vp{{-1, 0, 0}, 1};
  const HalfPair hp = split_half(c, vp, 2, SplitMode::euclidean);
  CHECK(hp.front_idx == std::vector<std::size_t>{0, 1});
  CHECK(hp.back_idx == std::vector<std::size_t>{2, 3});
  CHECK(hp.front.points[0][0] == 0.0);
  CHECK(hp.back.points[1][0] == 3.0);
}

TEST_CASE("geodesic split on the chain graph matches the hand-run answer") {
  const PointCloud c = line_cloud({0, 1, 2, 3});
  const NeighborGraph g = build_knn_graph(c, 1);
  const Viewpoint vp{{-1, 0, 0}, 1};
  // u = point at x=0; geodesic order along the chain: 0,1,2,3
  const HalfPair hp = split_half(c, vp, 2, SplitMode::geodesic, &g);
  CHECK(hp.front_idx == std::vector<std::size_t>{0, 1});
  CHECK(hp.back_idx == std::vector<std::size_t>{2, 3});
}

TEST_CASE("split_half rejects odd or mismatched sizes") {
  const PointCloud c = line_cloud({0, 1, 2});
  const Viewpoint vp{{-1, 0, 0}, 1};
  CHECK_THROWS_AS(split_half(c, vp, 2, SplitMode::euclidean), DataError);
}

TEST_CASE("unreachable points rank last, ordered by euclidean distance to u") {
  // two clusters: 0,1 near the viewpoint, 2,3 far; connect only within clusters
  PointCloud c;
  c.points = {{0, 0, 0}, {0.1, 0, 0}, {10, 0, 0}, {12, 0, 0}};
  NeighborGraph g;
  g.adj.assign(4, {});
  g.adj[0].push_back({1, 0.1});
  g.adj[1].push_back({0, 0.1});
  g.adj[2].push_back({3, 2.0});
  g.adj[3].push_back({2, 2.0});
  const Viewpoint vp{{-1, 0, 0}, 1};
  const HalfPair hp = split_half(c, vp, 2, SplitMode::geodesic, &g);
  CHECK(hp.front_idx == std::vector<std::size_t>{0, 1});
  // 2 is euclidean-closer to u than 3
  CHECK(hp.back_idx == std::vector<std::size_t>{2, 3});
}

TEST_CASE("sequence pair angle selection") {
  CHECK(select_angles(1, 12, 6, SequenceScheme::uniform, 0) ==
        std::vector<int>{1, 3, 5, 7, 9, 11});
  CHECK(select_angles(2, 12, 6, SequenceScheme::uniform, 0) ==
        std::vector<int>{2, 4, 6, 8, 10, 12});
  CHECK(select_angles(11, 12, 3, SequenceScheme::contiguous, 0) ==
        std::vector<int>{11, 12, 1});

  // random scheme: starts at i, draws distinct angles, deterministic in seed
  const auto r1 = select_angles(4, 12, 6, SequenceScheme::random, 9);
  const auto r2 = select_angles(4, 12, 6, SequenceScheme::random, 9);
  CHECK(r1 == r2);
  CHECK(r1[0] == 4);
  std::set<int> uniq(r1.begin(), r1.end());
  CHECK(uniq.size() == 6);

  CHECK_THROWS_AS(select_angles(1, 12, 5, SequenceScheme::uniform, 0), UsageError);
}

TEST_CASE("uniform angle sets cover every residue class exactly once") {
  const int V = 12, W = 6, stride = V / W;
  for (int start = 1; start <= V; ++start) {
    const auto angles = select_angles(start, V, W, SequenceScheme::uniform, 0);
    std::set<int> residues;
    for (int a : angles) residues.insert((a - 1) / stride);
    CHECK(static_cast<int>(residues.size()) == W);
  }
}

TEST_CASE("build_sequence_pairs yields V samples with complementary halves") {
  const PointCloud c = normalize(synth_shape("box", {}, 64, 21));
  const auto samples =
      build_sequence_pairs(c, 12, 6, 32, SplitMode::euclidean, SequenceScheme::uniform);
  REQUIRE(samples.size() == 12);
  for (const auto& s : samples) {
    CHECK(s.fronts.size() == 6);
    CHECK(s.backs.size() == 6);
    CHECK(s.angles[0] == s.start_angle);
    for (std::size_t w = 0; w < 6; ++w) {
      CHECK(s.fronts[w].size() == 32);
      CHECK(s.backs[w].size() == 32);
    }
  }

  // W=12: every sample uses all angles, rotated start
  const auto full = build_sequence_pairs(c, 12, 12, 32, SplitMode::euclidean,
                                         SequenceScheme::uniform);
  for (const auto& s : full) {
    std::set<int> uniq(s.angles.begin(), s.angles.end());
    CHECK(uniq.size() == 12);
  }
}

TEST_CASE("half pair partition invariants across shapes, angles and modes") {
  rng::Engine eng(1234);
  const char* kinds[] = {"sphere", "box", "cylinder", "plane", "two-part-chair",
                         "two-part-table"};
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    SynthParams sp;
    sp.jitter = 0.01;
    const PointCloud cloud = normalize(
        synth_shape(kinds[trial % 6], sp, 64, 1000 + static_cast<std::uint64_t>(trial)));
    const NeighborGraph g = build_knn_graph(cloud, 6);
    bool connected = true;
    for (double d : geodesic_distances(g, 0)) connected &= std::isfinite(d);
    const auto vps = viewpoints(cloud, 12);
    for (const auto& vp : vps) {
      for (const SplitMode mode : {SplitMode::euclidean, SplitMode::geodesic}) {
        const HalfPair hp = split_half(cloud, vp, 32, mode, &g);
        REQUIRE(hp.front_idx.size() == 32);
        REQUIRE(hp.back_idx.size() == 32);
        std::set<std::size_t> all(hp.front_idx.begin(), hp.front_idx.end());
        for (std::size_t i : hp.back_idx) all.insert(i);
        CHECK(all.size() == 64);  // disjoint and full coverage

        // determinism
        const HalfPair hp2 = split_half(cloud, vp, 32, mode, &g);
        CHECK(hp.front_idx == hp2.front_idx);

        // geodesic front half is connected whenever the graph is
        if (mode == SplitMode::geodesic && connected) {
          std::set<std::size_t> front(hp.front_idx.begin(), hp.front_idx.end());
          std::vector<std::size_t> stack = {hp.front_idx[0]};
          std::set<std::size_t> seen = {hp.front_idx[0]};
          while (!stack.empty()) {
            const std::size_t u = stack.back();
            stack.pop_back();
            for (const auto& e : g.adj[u]) {
              if (front.count(e.to) && !seen.count(e.to)) {
                seen.insert(e.to);
                stack.push_back(e.to);
              }
            }
          }
          CHECK(seen.size() == front.size());
          ++checked;
        }
      }
    }
  }
  CHECK(checked > 0);
}
