// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>

#include "mapvae/errors.hpp"
#include "mapvae/kernels.hpp"
#include "mapvae/rng.hpp"
#include "mapvae/transport.hpp"

using namespace mapvae;
using namespace mapvae::transport;

namespace {

PointCloud random_cloud(std::size_t n, rng::Engine& eng) {
  PointCloud c;
  c.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    c.points.push_back({rng::uniform(eng, -1, 1), rng::uniform(eng, -1, 1),
                        rng::uniform(eng, -1, 1)});
  }
  return c;
}

PointCloud shuffled(const PointCloud& c, rng::Engine& eng) {
  PointCloud out = c;
  rng::shuffle(out.points, eng);
  return out;
}

}  // namespace

TEST_CASE("emd of identical clouds is zero with the identity matching") {
  rng::Engine eng(3);
  const PointCloud a = random_cloud(20, eng);
  const TransportResult r = emd_exact(a, a);
  CHECK(r.cost == doctest::Approx(0.0).epsilon(1e-12));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(r.matching.perm[i] == i);
}

TEST_CASE("single-pair emd is the point distance") {
  PointCloud a, b;
  a.points = {{0, 0, 0}};
  b.points = {{3, 4, 0}};
  CHECK(emd_exact(a, b).cost == doctest::Approx(5.0));
}

TEST_CASE("two-point crossing case from first principles") {
  PointCloud a, b;
  a.points = {{0, 0, 0}, {2, 0, 0}};
  b.points = {{1, 1, 0}, {1, -1, 0}};
  // both pairings cost sqrt(2) + sqrt(2)
  CHECK(emd_exact(a, b).cost == doctest::Approx(2.0 * std::sqrt(2.0)).epsilon(1e-12));
}

TEST_CASE("emd size mismatch names both sizes") {
  rng::Engine eng(4);
  const PointCloud a = random_cloud(3, eng);
  const PointCloud b = random_cloud(5, eng);
  try {
    emd_exact(a, b);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find('3') != std::string::npos);
    CHECK(msg.find('5') != std::string::npos);
  }
}

TEST_CASE("bruteforce guard and n=1 case") {
  rng::Engine eng(5);
  const PointCloud a1 = random_cloud(1, eng);
  const PointCloud b1 = random_cloud(1, eng);
  const TransportResult r = emd_bruteforce(a1, b1);
  CHECK(r.matching.perm == std::vector<std::size_t>{0});
  CHECK(r.cost == doctest::Approx(geometry::dist(a1.points[0], b1.points[0])));

  const PointCloud a9 = random_cloud(9, eng);
  CHECK_THROWS_AS(emd_bruteforce(a9, a9), UsageError);
}

TEST_CASE("oracle equivalence on 200 random pairs within 1e-9 and 5 s") {
  const auto t0 = std::chrono::steady_clock::now();
  rng::Engine eng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng::below(eng, 7);
    const PointCloud a = random_cloud(n, eng);
    const PointCloud b = random_cloud(n, eng);
    const TransportResult exact = emd_exact(a, b);
    const TransportResult brute = emd_bruteforce(a, b);
    CHECK(std::abs(exact.cost - brute.cost) <= 1e-9);
    CHECK(exact.matching.valid());
    CHECK(std::abs(matching_cost(a, b, exact.matching) - exact.cost) <= 1e-9);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(secs < 5.0);
}

TEST_CASE("scalar and avx2 assignment paths agree") {
  if (!kernels::avx2_supported()) return;
  rng::Engine eng(17);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 1 + rng::below(eng, 96);
    const PointCloud a = random_cloud(n, eng);
    const PointCloud b = random_cloud(n, eng);
    kernels::set_backend(kernels::Backend::scalar);
    const TransportResult rs = emd_exact(a, b);
    kernels::set_backend(kernels::Backend::avx2);
    const TransportResult ra = emd_exact(a, b);
    CHECK(std::abs(rs.cost - ra.cost) <= 1e-9 * std::max(1.0, rs.cost));
    CHECK(ra.matching.valid());
  }
}

TEST_CASE("emd symmetry and permutation invariance") {
  rng::Engine eng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const PointCloud a = random_cloud(64, eng);
    const PointCloud b = random_cloud(64, eng);
    const double ab = emd_exact(a, b).cost;
    const double ba = emd_exact(b, a).cost;
    CHECK(std::abs(ab - ba) <= 1e-9);

    const PointCloud ap = shuffled(a, eng);
    const PointCloud bp = shuffled(b, eng);
    CHECK(std::abs(emd_exact(ap, b).cost - ab) <= 1e-9);
    CHECK(std::abs(emd_exact(a, bp).cost - ab) <= 1e-9);
  }
}

TEST_CASE("cost is zero iff B is a permutation of A") {
  rng::Engine eng(41);
  const PointCloud a = random_cloud(32, eng);
  const PointCloud ap = shuffled(a, eng);
  CHECK(emd_exact(a, ap).cost <= 1e-9);

  PointCloud moved = a;
  moved.points[7][1] += 0.25;
  CHECK(emd_exact(a, moved).cost > 1e-6);
}

TEST_CASE("subgradient basics") {
  PointCloud a, b;
  a.points = {{1, 0, 0}, {0, 1, 0}};
  b.points = {{0, 0, 0}, {0, 1, 0}};
  Matching m{{0, 1}};
  const auto g = emd_subgradient(a, b, m);
  CHECK(g[0][0] == doctest::Approx(1.0));  // unit direction away from target
  CHECK(g[0][1] == doctest::Approx(0.0));
  CHECK(g[1][0] == 0.0);  // coincident pair -> zero subgradient
  CHECK(g[1][1] == 0.0);
  CHECK(g[1][2] == 0.0);
}

TEST_CASE("subgradient matches finite differences at stable matchings") {
  rng::Engine eng(53);
  const double h = 1e-6;
  int checked = 0;
  for (int trial = 0; trial < 6; ++trial) {
    PointCloud a = random_cloud(16, eng);
    const PointCloud b = random_cloud(16, eng);
    const TransportResult r = emd_exact(a, b);
    const auto g = emd_subgradient(a, b, r.matching);
    for (std::size_t i = 0; i < 4; ++i) {
      for (int c = 0; c < 3; ++c) {
        PointCloud ap = a, am = a;
        ap.points[i][static_cast<std::size_t>(c)] += h;
        am.points[i][static_cast<std::size_t>(c)] -= h;
        const TransportResult rp = emd_exact(ap, b);
        const TransportResult rm = emd_exact(am, b);
        // only evaluate where the optimal matching is locally stable
        if (rp.matching.perm != r.matching.perm || rm.matching.perm != r.matching.perm) {
          continue;
        }
        const double fd = (rp.cost - rm.cost) / (2 * h);
        const double got = g[i][static_cast<std::size_t>(c)];
        CHECK(std::abs(fd - got) <= 1e-3 * std::max(1.0, std::abs(fd)));
        ++checked;
      }
    }
  }
  CHECK(checked > 20);
}

TEST_CASE("chamfer hand cases and symmetry") {
  PointCloud a, b;
  a.points = {{0, 0, 0}};
  b.points = {{1, 0, 0}};
  CHECK(chamfer(a, a) == doctest::Approx(0.0));
  CHECK(chamfer(a, b) == doctest::Approx(2.0));  // 1 + 1 under per-side averaging

  rng::Engine eng(61);
  const PointCloud x = random_cloud(40, eng);
  const PointCloud y = random_cloud(25, eng);
  CHECK(chamfer(x, y) == doctest::Approx(chamfer(y, x)).epsilon(1e-12));
}
