// SPDX-License-Identifier: Apache-2.0

#include "mapvae/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mapvae/errors.hpp"
#include "mapvae/kernels.hpp"

namespace mapvae::transport {

using geometry::operator-;

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

void require_equal_sizes(const PointCloud& a, const PointCloud& b) {
  if (a.size() != b.size()) {
    throw DataError("emd: size mismatch, |A| = " + std::to_string(a.size()) +
                    " vs |B| = " + std::to_string(b.size()));
  }
  if (a.size() == 0) throw DataError("emd: empty clouds");
}

void require_finite(const PointCloud& c, const char* who) {
  for (const Vec3& p : c.points) {
    if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2])) {
      throw NumericError(std::string(who) + ": non-finite coordinate");
    }
  }
}

std::vector<double> distance_matrix(const PointCloud& a, const PointCloud& b) {
  std::vector<double> d(a.size() * b.size());
  kernels::ops().dist3(a.flat(), a.size(), b.flat(), b.size(), d.data());
  return d;
}

}  // namespace

bool Matching::valid() const {
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t t : perm) {
    if (t >= perm.size() || seen[t]) return false;
    seen[t] = true;
  }
  return true;
}

double matching_cost(const PointCloud& a, const PointCloud& b, const Matching& m) {
  require_equal_sizes(a, b);
  if (m.perm.size() != a.size()) throw DataError("matching size mismatch");
  double cost = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cost += geometry::dist(a.points[i], b.points[m.perm[i]]);
  }
  return cost;
}

// Jonker-Volgenant style shortest augmenting paths with dual potentials.
// Arrays are 1-based with column 0 as the virtual root, following the classic
// formulation; the two inner scans run through the kernel dispatch.
TransportResult emd_exact(const PointCloud& a, const PointCloud& b) {
  require_equal_sizes(a, b);
  require_finite(a, "emd");
  require_finite(b, "emd");
  const std::size_t n = a.size();
  const std::vector<double> cost = distance_matrix(a, b);
  const auto& K = kernels::ops();

  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::int64_t> col_to_row(n + 1, 0);  // p: row matched to column
  std::vector<double> minv(n + 1);
  std::vector<std::int64_t> way(n + 1);
  std::vector<unsigned char> used(n + 1);
  std::vector<std::int64_t> used_cols;
  used_cols.reserve(n + 1);

  for (std::size_t row = 1; row <= n; ++row) {
    col_to_row[0] = static_cast<std::int64_t>(row);
    std::int64_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(way.begin(), way.end(), std::int64_t{-1});
    std::fill(used.begin(), used.end(), static_cast<unsigned char>(0));
    used_cols.clear();
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      used_cols.push_back(j0);
      const std::int64_t i0 = col_to_row[static_cast<std::size_t>(j0)];
      double delta;
      std::int64_t j1;
      K.jv_relax(cost.data() + (static_cast<std::size_t>(i0) - 1) * n,
                 u[static_cast<std::size_t>(i0)], v.data(), used.data(), minv.data(),
                 way.data(), j0, n, &delta, &j1);
      K.jv_apply_delta(v.data(), minv.data(), used.data(), delta, n);
      for (const std::int64_t jc : used_cols) {
        u[static_cast<std::size_t>(col_to_row[static_cast<std::size_t>(jc)])] += delta;
      }
      j0 = j1;
    } while (col_to_row[static_cast<std::size_t>(j0)] != 0);
    // augment along the alternating path
    do {
      const std::int64_t j1 = way[static_cast<std::size_t>(j0)];
      col_to_row[static_cast<std::size_t>(j0)] = col_to_row[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }

  TransportResult res;
  res.matching.perm.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) {
    res.matching.perm[static_cast<std::size_t>(col_to_row[j]) - 1] = j - 1;
  }
  res.cost = 0.0;
  for (std::size_t i = 0; i < n; ++i) res.cost += cost[i * n + res.matching.perm[i]];
  return res;
}

TransportResult emd_bruteforce(const PointCloud& a, const PointCloud& b) {
  require_equal_sizes(a, b);
  const std::size_t n = a.size();
  if (n > 8) {
    throw UsageError("emd_bruteforce: refusing n = " + std::to_string(n) +
                     " (factorial blow-up, limit is 8)");
  }
  const std::vector<double> cost = distance_matrix(a, b);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  TransportResult best;
  best.cost = kInf;
  do {
    double c = 0.0;
    for (std::size_t i = 0; i < n; ++i) c += cost[i * n + perm[i]];
    if (c < best.cost) {
      best.cost = c;
      best.matching.perm = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

std::vector<Vec3> emd_subgradient(const PointCloud& a, const PointCloud& b,
                                  const Matching& m) {
  require_equal_sizes(a, b);
  if (m.perm.size() != a.size() || !m.valid()) {
    throw DataError("emd_subgradient: invalid matching");
  }
  std::vector<Vec3> grad(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Vec3 diff = a.points[i] - b.points[m.perm[i]];
    const double d = geometry::norm(diff);
    grad[i] = d > 0.0 ? geometry::operator*(1.0 / d, diff) : Vec3{0.0, 0.0, 0.0};
  }
  return grad;
}

std::vector<std::size_t> nearest_indices(const PointCloud& a, const PointCloud& b) {
  if (a.size() == 0 || b.size() == 0) throw DataError("nearest_indices: empty cloud");
  std::vector<std::size_t> nn(a.size());
  // process in row blocks to bound the scratch matrix
  const std::size_t block = 128;
  std::vector<double> d2(block * b.size());
  for (std::size_t start = 0; start < a.size(); start += block) {
    const std::size_t rows = std::min(block, a.size() - start);
    kernels::ops().sqdist3(a.flat() + 3 * start, rows, b.flat(), b.size(), d2.data());
    for (std::size_t i = 0; i < rows; ++i) {
      const double* row = d2.data() + i * b.size();
      std::size_t bi = 0;
      double bd = row[0];
      for (std::size_t j = 1; j < b.size(); ++j) {
        if (row[j] < bd) {
          bd = row[j];
          bi = j;
        }
      }
      nn[start + i] = bi;
    }
  }
  return nn;
}

double chamfer(const PointCloud& a, const PointCloud& b) {
  if (a.size() == 0 || b.size() == 0) throw DataError("chamfer: empty cloud");
  const auto nn_ab = nearest_indices(a, b);
  const auto nn_ba = nearest_indices(b, a);
  double sum_ab = 0.0, sum_ba = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Vec3 d = a.points[i] - b.points[nn_ab[i]];
    sum_ab += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
  }
  for (std::size_t j = 0; j < b.size(); ++j) {
    const Vec3 d = b.points[j] - a.points[nn_ba[j]];
    sum_ba += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
  }
  return sum_ab / static_cast<double>(a.size()) + sum_ba / static_cast<double>(b.size());
}

}  // namespace mapvae::transport
