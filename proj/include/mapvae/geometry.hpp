// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace mapvae::geometry {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}
inline Vec3 operator-(const Vec3& a, const Vec3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
double norm(const Vec3& a);
double dist(const Vec3& a, const Vec3& b);

// A point set with optional per-point part labels.
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<int> labels;  // empty, or one label per point

  std::size_t size() const { return points.size(); }
  bool has_labels() const { return !labels.empty(); }
  // Flat 3*n view for the kernel layer.
  const double* flat() const { return points.empty() ? nullptr : points[0].data(); }
};

static_assert(sizeof(Vec3) == 3 * sizeof(double));

// Symmetric weighted neighborhood graph; weights are Euclidean distances.
struct NeighborGraph {
  struct Edge {
    std::size_t to;
    double w;
  };
  std::vector<std::vector<Edge>> adj;
  std::size_t size() const { return adj.size(); }
  bool has_edge(std::size_t a, std::size_t b) const;
};

struct Viewpoint {
  Vec3 position;
  int angle = 1;  // 1-based index around the circle
};

// Complementary halves of one cloud seen from one angle.
struct HalfPair {
  PointCloud front, back;
  std::vector<std::size_t> front_idx, back_idx;  // indices into the source cloud
  int angle = 1;
};

// One training sample: W complementary half pairs plus the full cloud.
struct TrainingSample {
  std::vector<PointCloud> fronts;  // S^F, in selection order
  std::vector<PointCloud> backs;   // S^B, complementary element by element
  std::vector<int> angles;
  PointCloud full;
  int start_angle = 1;
};

enum class SplitMode { euclidean, geodesic };
enum class SequenceScheme { uniform, contiguous, random };

SplitMode parse_split_mode(const std::string& s);
SequenceScheme parse_sequence_scheme(const std::string& s);
const char* to_string(SplitMode m);
const char* to_string(SequenceScheme s);

// Center at the origin and scale the farthest point to unit norm.
PointCloud normalize(const PointCloud& cloud);

struct SynthParams {
  double radius = 1.0;          // sphere / cylinder / plane half-size
  double height = 2.0;          // cylinder
  Vec3 extents = {1.0, 1.0, 1.0};  // box half-extents
  double jitter = 0.0;          // stddev of optional Gaussian surface noise
};

// kinds: sphere, box, cylinder, plane, two-part-chair, two-part-table.
// Multi-part kinds attach per-point part labels (exactly two values).
PointCloud synth_shape(const std::string& kind, const SynthParams& params,
                       std::size_t count, std::uint64_t seed);

// Directed kNN edges symmetrized by union; selection ties go to the lower
// point index.
NeighborGraph build_knn_graph(const PointCloud& cloud, std::size_t k);

// Single-source shortest paths over edge weights; unreachable -> +inf.
std::vector<double> geodesic_distances(const NeighborGraph& graph, std::size_t source);

// V positions equally spaced on a circle of radius radius_scale * max point
// norm, centered at the centroid, in the plane orthogonal to `axis`
// (0=x, 1=y, 2=z), ordered clockwise when viewed along +axis.
std::vector<Viewpoint> viewpoints(const PointCloud& cloud, int v_count, int axis = 1,
                                  double radius_scale = 2.0);

// Partition a 2N-point cloud into the N nearest (front) and N farthest (back)
// points. Euclidean mode orders by distance to the viewpoint; geodesic mode
// orders by shortest-path distance from the cloud point nearest the
// viewpoint. All ties go to the lower point index; points unreachable in the
// graph rank after all reachable ones, ordered by Euclidean distance to the
// source point.
HalfPair split_half(const PointCloud& cloud, const Viewpoint& vp, std::size_t n_half,
                    SplitMode mode, const NeighborGraph* graph = nullptr,
                    std::size_t knn_k = 10);

// All V training samples of one cloud. Scheme picks which W of the V angles
// each sample observes; the start angle i always comes first.
std::vector<TrainingSample> build_sequence_pairs(const PointCloud& cloud, int v_count,
                                                 int w_count, std::size_t n_half,
                                                 SplitMode mode, SequenceScheme scheme,
                                                 std::uint64_t seed = 0,
                                                 std::size_t knn_k = 10);

// The angle selection used by build_sequence_pairs, exposed for reuse.
std::vector<int> select_angles(int start, int v_count, int w_count,
                               SequenceScheme scheme, std::uint64_t seed);

}  // namespace mapvae::geometry
