// SPDX-License-Identifier: Apache-2.0

#include "mapvae/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>

#include "mapvae/errors.hpp"
#include "mapvae/kernels.hpp"
#include "mapvae/rng.hpp"

namespace mapvae::geometry {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

double norm(const Vec3& a) { return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]); }

double dist(const Vec3& a, const Vec3& b) { return norm(a - b); }

bool NeighborGraph::has_edge(std::size_t a, std::size_t b) const {
  for (const Edge& e : adj[a]) {
    if (e.to == b) return true;
  }
  return false;
}

SplitMode parse_split_mode(const std::string& s) {
  if (s == "euclidean") return SplitMode::euclidean;
  if (s == "geodesic") return SplitMode::geodesic;
  throw UsageError("unknown split mode '" + s + "' (euclidean|geodesic)");
}

SequenceScheme parse_sequence_scheme(const std::string& s) {
  if (s == "uniform") return SequenceScheme::uniform;
  if (s == "contiguous") return SequenceScheme::contiguous;
  if (s == "random") return SequenceScheme::random;
  throw UsageError("unknown sequence scheme '" + s + "' (uniform|contiguous|random)");
}

const char* to_string(SplitMode m) {
  return m == SplitMode::euclidean ? "euclidean" : "geodesic";
}

const char* to_string(SequenceScheme s) {
  switch (s) {
    case SequenceScheme::uniform: return "uniform";
    case SequenceScheme::contiguous: return "contiguous";
    default: return "random";
  }
}

PointCloud normalize(const PointCloud& cloud) {
  if (cloud.points.empty()) throw DataError("normalize: empty point cloud");
  Vec3 centroid = {0, 0, 0};
  for (const Vec3& p : cloud.points) centroid = centroid + p;
  centroid = (1.0 / static_cast<double>(cloud.size())) * centroid;

  double max_norm = 0.0;
  for (const Vec3& p : cloud.points) max_norm = std::max(max_norm, norm(p - centroid));
  if (max_norm <= 0.0) {
    throw DataError("normalize: all points identical, scale is degenerate");
  }

  PointCloud out;
  out.points.reserve(cloud.size());
  const double inv = 1.0 / max_norm;
  for (const Vec3& p : cloud.points) out.points.push_back(inv * (p - centroid));
  out.labels = cloud.labels;
  return out;
}

namespace {

Vec3 sphere_dir(rng::Engine& eng) {
  // Rejection-free direction from three normals.
  Vec3 d;
  double n2;
  do {
    d = {rng::normal(eng), rng::normal(eng), rng::normal(eng)};
    n2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
  } while (n2 < 1e-12);
  return (1.0 / std::sqrt(n2)) * d;
}

// A rectangular face spanned by u, v around center c.
struct Face {
  Vec3 c, u, v;
  double area() const { return 4.0 * norm(u) * norm(v); }
};

Vec3 sample_face(const Face& f, rng::Engine& eng) {
  const double a = rng::uniform(eng, -1.0, 1.0);
  const double b = rng::uniform(eng, -1.0, 1.0);
  return f.c + a * f.u + b * f.v;
}

// Append `count` points sampled area-uniformly over the faces of a box with
// half-extents e centered at c.
void sample_box(const Vec3& c, const Vec3& e, std::size_t count, rng::Engine& eng,
                std::vector<Vec3>& out) {
  const std::array<Face, 6> faces = {{
      {{c[0] + e[0], c[1], c[2]}, {0, e[1], 0}, {0, 0, e[2]}},
      {{c[0] - e[0], c[1], c[2]}, {0, e[1], 0}, {0, 0, e[2]}},
      {{c[0], c[1] + e[1], c[2]}, {e[0], 0, 0}, {0, 0, e[2]}},
      {{c[0], c[1] - e[1], c[2]}, {e[0], 0, 0}, {0, 0, e[2]}},
      {{c[0], c[1], c[2] + e[2]}, {e[0], 0, 0}, {0, e[1], 0}},
      {{c[0], c[1], c[2] - e[2]}, {e[0], 0, 0}, {0, e[1], 0}},
  }};
  std::array<double, 6> cum{};
  double total = 0.0;
  for (int i = 0; i < 6; ++i) {
    total += faces[i].area();
    cum[i] = total;
  }
  for (std::size_t i = 0; i < count; ++i) {
    const double r = rng::uniform(eng, 0.0, total);
    int fi = 0;
    while (fi < 5 && r > cum[fi]) ++fi;
    out.push_back(sample_face(faces[fi], eng));
  }
}

void sample_cylinder(double radius, double height, std::size_t count, rng::Engine& eng,
                     std::vector<Vec3>& out) {
  const double lateral = 2.0 * M_PI * radius * height;
  const double cap = M_PI * radius * radius;
  const double total = lateral + 2.0 * cap;
  for (std::size_t i = 0; i < count; ++i) {
    const double r = rng::uniform(eng, 0.0, total);
    if (r < lateral) {
      const double theta = rng::uniform(eng, 0.0, 2.0 * M_PI);
      const double y = rng::uniform(eng, -height / 2.0, height / 2.0);
      out.push_back({radius * std::cos(theta), y, radius * std::sin(theta)});
    } else {
      const double y = (r < lateral + cap) ? height / 2.0 : -height / 2.0;
      // uniform over the disc
      const double rho = radius * std::sqrt(rng::uniform01(eng));
      const double theta = rng::uniform(eng, 0.0, 2.0 * M_PI);
      out.push_back({rho * std::cos(theta), y, rho * std::sin(theta)});
    }
  }
}

// Two-part furniture: part 0 carries the horizontal slab and legs, part 1 the
// vertical slab (chair back) or nothing (table gets legs as part 1 instead).
void sample_two_part(const std::string& kind, std::size_t count, rng::Engine& eng,
                     std::vector<Vec3>& pts, std::vector<int>& labels) {
  struct Part {
    Vec3 c, e;
    int label;
  };
  std::vector<Part> parts;
  const double leg = 0.06;
  if (kind == "two-part-chair") {
    parts.push_back({{0, 0, 0}, {0.5, 0.05, 0.5}, 0});          // seat
    parts.push_back({{0.44, -0.5, 0.44}, {leg, 0.5, leg}, 0});  // legs
    parts.push_back({{-0.44, -0.5, 0.44}, {leg, 0.5, leg}, 0});
    parts.push_back({{0.44, -0.5, -0.44}, {leg, 0.5, leg}, 0});
    parts.push_back({{-0.44, -0.5, -0.44}, {leg, 0.5, leg}, 0});
    parts.push_back({{0, 0.6, -0.47}, {0.5, 0.55, 0.05}, 1});  // backrest
  } else {  // two-part-table
    parts.push_back({{0, 0.5, 0}, {0.8, 0.05, 0.5}, 0});  // top
    parts.push_back({{0.7, -0.05, 0.4}, {leg, 0.5, leg}, 1});
    parts.push_back({{-0.7, -0.05, 0.4}, {leg, 0.5, leg}, 1});
    parts.push_back({{0.7, -0.05, -0.4}, {leg, 0.5, leg}, 1});
    parts.push_back({{-0.7, -0.05, -0.4}, {leg, 0.5, leg}, 1});
  }
  std::vector<double> cum;
  double total = 0.0;
  for (const Part& p : parts) {
    const double area = 8.0 * (p.e[0] * p.e[1] + p.e[1] * p.e[2] + p.e[0] * p.e[2]);
    total += area;
    cum.push_back(total);
  }
  for (std::size_t i = 0; i < count; ++i) {
    const double r = rng::uniform(eng, 0.0, total);
    std::size_t pi = 0;
    while (pi + 1 < parts.size() && r > cum[pi]) ++pi;
    std::vector<Vec3> one;
    sample_box(parts[pi].c, parts[pi].e, 1, eng, one);
    pts.push_back(one[0]);
    labels.push_back(parts[pi].label);
  }
  // Guarantee both part labels appear even for tiny counts.
  if (count >= 2) {
    bool has0 = false, has1 = false;
    for (int l : labels) (l == 0 ? has0 : has1) = true;
    if (!has0) labels[0] = 0;
    if (!has1) labels[count - 1] = 1;
  }
}

}  // namespace

PointCloud synth_shape(const std::string& kind, const SynthParams& params,
                       std::size_t count, std::uint64_t seed) {
  if (count < 8) throw UsageError("synth_shape: count must be >= 8");
  rng::Engine eng(rng::stream_seed(seed, rng::hash_str(kind)));
  PointCloud cloud;
  cloud.points.reserve(count);

  if (kind == "sphere") {
    for (std::size_t i = 0; i < count; ++i) {
      cloud.points.push_back(params.radius * sphere_dir(eng));
    }
  } else if (kind == "box") {
    sample_box({0, 0, 0}, params.extents, count, eng, cloud.points);
  } else if (kind == "cylinder") {
    sample_cylinder(params.radius, params.height, count, eng, cloud.points);
  } else if (kind == "plane") {
    for (std::size_t i = 0; i < count; ++i) {
      cloud.points.push_back({rng::uniform(eng, -params.radius, params.radius), 0.0,
                              rng::uniform(eng, -params.radius, params.radius)});
    }
  } else if (kind == "two-part-chair" || kind == "two-part-table") {
    sample_two_part(kind, count, eng, cloud.points, cloud.labels);
  } else {
    throw UsageError("synth_shape: unknown kind '" + kind + "'");
  }

  if (params.jitter > 0.0) {
    for (Vec3& p : cloud.points) {
      p[0] += params.jitter * rng::normal(eng);
      p[1] += params.jitter * rng::normal(eng);
      p[2] += params.jitter * rng::normal(eng);
    }
  }
  return cloud;
}

NeighborGraph build_knn_graph(const PointCloud& cloud, std::size_t k) {
  const std::size_t n = cloud.size();
  if (k < 1 || k >= n) throw UsageError("build_knn_graph: need 1 <= k < point count");

  std::vector<double> d2(n * n);
  kernels::ops().sqdist3(cloud.flat(), n, cloud.flat(), n, d2.data());

  NeighborGraph g;
  g.adj.assign(n, {});
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), 0);
    const double* row = d2.data() + i * n;
    // ties in neighbor selection break toward the smaller point index
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k) + 1,
                      order.end(), [row](std::size_t a, std::size_t b) {
                        return row[a] != row[b] ? row[a] < row[b] : a < b;
                      });
    std::size_t added = 0;
    for (std::size_t j = 0; j < n && added < k; ++j) {
      const std::size_t nb = order[j];
      if (nb == i) continue;
      if (!g.has_edge(i, nb)) {
        const double w = std::sqrt(row[nb]);
        g.adj[i].push_back({nb, w});
        g.adj[nb].push_back({i, w});
      }
      ++added;
    }
  }
  for (auto& edges : g.adj) {
    std::sort(edges.begin(), edges.end(),
              [](const NeighborGraph::Edge& a, const NeighborGraph::Edge& b) {
                return a.to < b.to;
              });
  }
  return g;
}

std::vector<double> geodesic_distances(const NeighborGraph& graph, std::size_t source) {
  const std::size_t n = graph.size();
  if (source >= n) throw UsageError("geodesic_distances: source out of range");
  std::vector<double> dist(n, kInf);
  dist[source] = 0.0;
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
  heap.push({0.0, source});
  while (!heap.empty()) {
    const auto [d, u] = heap.top();
    heap.pop();
    if (d > dist[u]) continue;
    for (const NeighborGraph::Edge& e : graph.adj[u]) {
      const double nd = d + e.w;
      if (nd < dist[e.to]) {
        dist[e.to] = nd;
        heap.push({nd, e.to});
      }
    }
  }
  return dist;
}

std::vector<Viewpoint> viewpoints(const PointCloud& cloud, int v_count, int axis,
                                  double radius_scale) {
  if (v_count < 1) throw UsageError("viewpoints: V must be >= 1");
  if (radius_scale <= 1.0) throw UsageError("viewpoints: radius_scale must be > 1");
  if (axis < 0 || axis > 2) throw UsageError("viewpoints: axis must be 0, 1 or 2");
  if (cloud.points.empty()) throw DataError("viewpoints: empty cloud");

  Vec3 centroid = {0, 0, 0};
  for (const Vec3& p : cloud.points) centroid = centroid + p;
  centroid = (1.0 / static_cast<double>(cloud.size())) * centroid;
  double max_norm = 0.0;
  for (const Vec3& p : cloud.points) max_norm = std::max(max_norm, norm(p - centroid));
  const double radius = radius_scale * max_norm;

  // (e1, e2, axis) right-handed, so advancing e1 -> e2 appears clockwise when
  // viewed along +axis. e1 is the reference direction for angle 1.
  Vec3 a = {0, 0, 0};
  a[axis] = 1.0;
  Vec3 e1 = {0, 0, 0};
  e1[(axis + 2) % 3] = 1.0;
  const Vec3 e2 = {a[1] * e1[2] - a[2] * e1[1], a[2] * e1[0] - a[0] * e1[2],
                   a[0] * e1[1] - a[1] * e1[0]};

  std::vector<Viewpoint> vps;
  vps.reserve(static_cast<std::size_t>(v_count));
  for (int v = 1; v <= v_count; ++v) {
    const double theta = 2.0 * M_PI * static_cast<double>(v - 1) / v_count;
    const Vec3 pos =
        centroid + radius * std::cos(theta) * e1 + radius * std::sin(theta) * e2;
    vps.push_back({pos, v});
  }
  return vps;
}

namespace {

PointCloud gather(const PointCloud& cloud, const std::vector<std::size_t>& idx) {
  PointCloud out;
  out.points.reserve(idx.size());
  for (std::size_t i : idx) out.points.push_back(cloud.points[i]);
  if (cloud.has_labels()) {
    out.labels.reserve(idx.size());
    for (std::size_t i : idx) out.labels.push_back(cloud.labels[i]);
  }
  return out;
}

}  // namespace

HalfPair split_half(const PointCloud& cloud, const Viewpoint& vp, std::size_t n_half,
                    SplitMode mode, const NeighborGraph* graph, std::size_t knn_k) {
  const std::size_t n = cloud.size();
  if (n != 2 * n_half) {
    throw DataError("split_half: cloud has " + std::to_string(n) +
                    " points, expected 2N = " + std::to_string(2 * n_half));
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  if (mode == SplitMode::euclidean) {
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = dist(cloud.points[i], vp.position);
    std::sort(order.begin(), order.end(), [&d](std::size_t a, std::size_t b) {
      return d[a] != d[b] ? d[a] < d[b] : a < b;
    });
  } else {
    NeighborGraph local;
    if (graph == nullptr) {
      local = build_knn_graph(cloud, knn_k);
      graph = &local;
    }
    // source u: cloud point nearest the viewpoint by Euclidean distance
    std::size_t u = 0;
    double best = kInf;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = dist(cloud.points[i], vp.position);
      if (d < best) {
        best = d;
        u = i;
      }
    }
    const std::vector<double> geo = geodesic_distances(*graph, u);
    std::vector<double> euc(n);
    for (std::size_t i = 0; i < n; ++i) euc[i] = dist(cloud.points[i], cloud.points[u]);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const bool ra = std::isfinite(geo[a]), rb = std::isfinite(geo[b]);
      if (ra != rb) return ra;  // reachable points first
      if (ra) {
        if (geo[a] != geo[b]) return geo[a] < geo[b];
      } else {
        if (euc[a] != euc[b]) return euc[a] < euc[b];
      }
      return a < b;
    });
    // u itself has geodesic distance 0 and therefore already sorts first.
  }

  HalfPair pair;
  pair.angle = vp.angle;
  pair.front_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_half));
  pair.back_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_half), order.end());
  pair.front = gather(cloud, pair.front_idx);
  pair.back = gather(cloud, pair.back_idx);
  return pair;
}

std::vector<int> select_angles(int start, int v_count, int w_count,
                               SequenceScheme scheme, std::uint64_t seed) {
  if (w_count < 1 || w_count > v_count) {
    throw UsageError("select_angles: need 1 <= W <= V");
  }
  std::vector<int> angles;
  angles.reserve(static_cast<std::size_t>(w_count));
  auto wrap = [v_count](int a) { return (a - 1) % v_count + 1; };

  switch (scheme) {
    case SequenceScheme::uniform: {
      if (v_count % w_count != 0) {
        throw UsageError("uniform scheme requires W to divide V (W=" +
                         std::to_string(w_count) + ", V=" + std::to_string(v_count) + ")");
      }
      const int stride = v_count / w_count;
      for (int t = 0; t < w_count; ++t) angles.push_back(wrap(start + t * stride));
      break;
    }
    case SequenceScheme::contiguous: {
      for (int t = 0; t < w_count; ++t) angles.push_back(wrap(start + t));
      break;
    }
    case SequenceScheme::random: {
      // the start angle is always observed first; the rest are drawn without
      // replacement from the remaining angles
      angles.push_back(wrap(start));
      std::vector<int> rest;
      for (int a = 1; a <= v_count; ++a) {
        if (a != angles[0]) rest.push_back(a);
      }
      rng::Engine eng(rng::stream_seed(seed, 0x5eedau, static_cast<std::uint64_t>(start)));
      rng::shuffle(rest, eng);
      for (int t = 0; t + 1 < w_count; ++t) angles.push_back(rest[static_cast<std::size_t>(t)]);
      break;
    }
  }
  return angles;
}

std::vector<TrainingSample> build_sequence_pairs(const PointCloud& cloud, int v_count,
                                                 int w_count, std::size_t n_half,
                                                 SplitMode mode, SequenceScheme scheme,
                                                 std::uint64_t seed, std::size_t knn_k) {
  const std::vector<Viewpoint> vps = viewpoints(cloud, v_count);
  NeighborGraph graph;
  if (mode == SplitMode::geodesic) graph = build_knn_graph(cloud, knn_k);

  // one split per angle, shared by every sample that selects the angle
  std::vector<HalfPair> pairs;
  pairs.reserve(vps.size());
  for (const Viewpoint& vp : vps) {
    pairs.push_back(split_half(cloud, vp, n_half, mode,
                               mode == SplitMode::geodesic ? &graph : nullptr));
  }

  std::vector<TrainingSample> samples;
  samples.reserve(static_cast<std::size_t>(v_count));
  for (int i = 1; i <= v_count; ++i) {
    TrainingSample s;
    s.start_angle = i;
    s.full = cloud;
    s.angles = select_angles(i, v_count, w_count, scheme, seed);
    for (int a : s.angles) {
      s.fronts.push_back(pairs[static_cast<std::size_t>(a - 1)].front);
      s.backs.push_back(pairs[static_cast<std::size_t>(a - 1)].back);
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace mapvae::geometry
