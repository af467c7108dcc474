// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "mapvae/geometry.hpp"

namespace mapvae::transport {

using geometry::PointCloud;
using geometry::Vec3;

// The bijection phi: index i of cloud A -> perm[i] of cloud B.
struct Matching {
  std::vector<std::size_t> perm;
  bool valid() const;
};

struct TransportResult {
  double cost = 0.0;  // sum of Euclidean point distances under the matching
  Matching matching;
};

// Minimum over all bijections of sum_i ||a_i - b_phi(i)||_2, solved exactly
// as an n x n assignment problem (shortest augmenting paths with potentials).
TransportResult emd_exact(const PointCloud& a, const PointCloud& b);

// Exhaustive minimum over all n! bijections. Test oracle; refuses n > 8.
TransportResult emd_bruteforce(const PointCloud& a, const PointCloud& b);

// Gradient of the matched cost with respect to the points of A at a fixed
// matching: unit vector toward a_i from its partner, zero for coincident
// pairs (the subgradient choice at the kink).
std::vector<Vec3> emd_subgradient(const PointCloud& a, const PointCloud& b,
                                  const Matching& matching);

// Recompute the matched cost; the stored cost must agree to 1e-9.
double matching_cost(const PointCloud& a, const PointCloud& b, const Matching& matching);

// Symmetric Chamfer distance: mean-over-A of min squared distance to B plus
// mean-over-B of min squared distance to A.
double chamfer(const PointCloud& a, const PointCloud& b);

// Nearest-neighbor index in b for every point of a.
std::vector<std::size_t> nearest_indices(const PointCloud& a, const PointCloud& b);

}  // namespace mapvae::transport
