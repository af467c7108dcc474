// SPDX-License-Identifier: Apache-2.0

#include "mapvae/pointcloud_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mapvae/errors.hpp"
#include "mapvae/rng.hpp"

namespace mapvae::geometry {

namespace {

[[noreturn]] void parse_fail(const std::string& path, std::size_t line,
                             const std::string& what) {
  throw DataError(path + ":" + std::to_string(line) + ": " + what);
}

void require_finite(const std::string& path, std::size_t line, const Vec3& p) {
  if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2])) {
    parse_fail(path, line, "non-finite coordinate");
  }
}

bool blank(const std::string& s) {
  return s.find_first_not_of(" \t\r\n") == std::string::npos;
}

PointCloud load_xyz(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  PointCloud cloud;
  std::string line;
  std::size_t lineno = 0;
  bool any_label = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank(line) || line[0] == '#') continue;
    std::istringstream ls(line);
    Vec3 p;
    if (!(ls >> p[0] >> p[1] >> p[2])) parse_fail(path, lineno, "expected 'x y z [label]'");
    require_finite(path, lineno, p);
    int label;
    if (ls >> label) {
      any_label = true;
      cloud.labels.push_back(label);
    } else if (any_label) {
      parse_fail(path, lineno, "label column present on earlier lines but missing here");
    }
    std::string rest;
    if (ls >> rest) parse_fail(path, lineno, "trailing tokens '" + rest + "'");
    cloud.points.push_back(p);
  }
  if (cloud.points.empty()) throw DataError(path + ": no points (empty file?)");
  if (any_label && cloud.labels.size() != cloud.points.size()) {
    throw DataError(path + ": label column missing on some lines");
  }
  return cloud;
}

PointCloud load_ply(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string line;
  std::size_t lineno = 0;

  auto next_line = [&]() -> std::string {
    if (!std::getline(in, line)) parse_fail(path, lineno, "unexpected end of file");
    ++lineno;
    return line;
  };

  if (next_line().rfind("ply", 0) != 0) parse_fail(path, lineno, "missing 'ply' magic");
  std::size_t vertex_count = 0;
  int xcol = -1, ycol = -1, zcol = -1;
  int prop_index = 0;
  bool in_vertex_element = false;
  bool ascii = false;
  while (true) {
    std::istringstream ls(next_line());
    std::string tok;
    ls >> tok;
    if (tok == "end_header") break;
    if (tok == "comment") continue;
    if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = fmt == "ascii";
      if (!ascii) parse_fail(path, lineno, "only ascii PLY is supported");
    } else if (tok == "element") {
      std::string name;
      std::size_t count;
      if (!(ls >> name >> count)) parse_fail(path, lineno, "malformed element line");
      in_vertex_element = name == "vertex";
      if (in_vertex_element) vertex_count = count;
      prop_index = 0;
    } else if (tok == "property" && in_vertex_element) {
      std::string type, name;
      if (!(ls >> type >> name)) parse_fail(path, lineno, "malformed property line");
      if (name == "x") xcol = prop_index;
      if (name == "y") ycol = prop_index;
      if (name == "z") zcol = prop_index;
      ++prop_index;
    }
  }
  if (!ascii) parse_fail(path, lineno, "missing format line");
  if (vertex_count == 0) parse_fail(path, lineno, "no vertex element");
  if (xcol < 0 || ycol < 0 || zcol < 0) parse_fail(path, lineno, "missing x/y/z properties");

  PointCloud cloud;
  cloud.points.reserve(vertex_count);
  for (std::size_t i = 0; i < vertex_count; ++i) {
    std::istringstream ls(next_line());
    std::vector<double> cols;
    double v;
    while (ls >> v) cols.push_back(v);
    if (static_cast<int>(cols.size()) < prop_index) {
      parse_fail(path, lineno, "vertex line has too few columns");
    }
    const Vec3 p = {cols[static_cast<std::size_t>(xcol)],
                    cols[static_cast<std::size_t>(ycol)],
                    cols[static_cast<std::size_t>(zcol)]};
    require_finite(path, lineno, p);
    cloud.points.push_back(p);
  }
  if (cloud.points.empty()) throw DataError(path + ": no points");
  return cloud;
}

PointCloud load_off_sampled(const std::string& path, std::size_t sample_count,
                            std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string line;
  std::size_t lineno = 0;
  auto next_content_line = [&]() -> std::string {
    while (std::getline(in, line)) {
      ++lineno;
      if (!blank(line) && line[0] != '#') return line;
    }
    parse_fail(path, lineno, "unexpected end of file");
  };

  std::string magic = next_content_line();
  // tolerate "OFF" alone or "OFF n f e" on one line
  std::istringstream ms(magic);
  std::string tag;
  ms >> tag;
  if (tag != "OFF") parse_fail(path, lineno, "missing OFF magic");
  std::size_t nv = 0, nf = 0, ne = 0;
  if (!(ms >> nv >> nf >> ne)) {
    std::istringstream cs(next_content_line());
    if (!(cs >> nv >> nf >> ne)) parse_fail(path, lineno, "malformed count line");
  }
  if (nv == 0 || nf == 0) parse_fail(path, lineno, "OFF mesh needs vertices and faces");

  std::vector<Vec3> verts(nv);
  for (std::size_t i = 0; i < nv; ++i) {
    std::istringstream ls(next_content_line());
    if (!(ls >> verts[i][0] >> verts[i][1] >> verts[i][2])) {
      parse_fail(path, lineno, "malformed vertex line");
    }
    require_finite(path, lineno, verts[i]);
  }

  struct Tri {
    std::size_t a, b, c;
    double area;
  };
  std::vector<Tri> tris;
  tris.reserve(nf);
  double total_area = 0.0;
  for (std::size_t i = 0; i < nf; ++i) {
    std::istringstream ls(next_content_line());
    std::size_t arity;
    if (!(ls >> arity)) parse_fail(path, lineno, "malformed face line");
    if (arity != 3) parse_fail(path, lineno, "only triangular faces are supported");
    std::size_t a, b, c;
    if (!(ls >> a >> b >> c)) parse_fail(path, lineno, "malformed face line");
    if (a >= nv || b >= nv || c >= nv) parse_fail(path, lineno, "face index out of range");
    const Vec3 u = verts[b] - verts[a];
    const Vec3 v = verts[c] - verts[a];
    const Vec3 cr = {u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2],
                     u[0] * v[1] - u[1] * v[0]};
    const double area = 0.5 * norm(cr);
    total_area += area;
    tris.push_back({a, b, c, area});
  }
  if (total_area <= 0.0) throw DataError(path + ": degenerate mesh with zero total area");

  std::vector<double> cum(tris.size());
  double run = 0.0;
  for (std::size_t i = 0; i < tris.size(); ++i) {
    run += tris[i].area;
    cum[i] = run;
  }

  rng::Engine eng(seed);
  PointCloud cloud;
  cloud.points.reserve(sample_count);
  for (std::size_t s = 0; s < sample_count; ++s) {
    const double r = rng::uniform(eng, 0.0, total_area);
    const std::size_t ti = static_cast<std::size_t>(
        std::lower_bound(cum.begin(), cum.end(), r) - cum.begin());
    const Tri& t = tris[std::min(ti, tris.size() - 1)];
    // uniform barycentric sample
    const double r1 = std::sqrt(rng::uniform01(eng));
    const double r2 = rng::uniform01(eng);
    const Vec3 p = (1.0 - r1) * verts[t.a] + (r1 * (1.0 - r2)) * verts[t.b] +
                   (r1 * r2) * verts[t.c];
    cloud.points.push_back(p);
  }
  return cloud;
}

}  // namespace

CloudFormat parse_cloud_format(const std::string& s) {
  if (s == "xyz" || s == "xyz-text") return CloudFormat::xyz_text;
  if (s == "ply" || s == "ascii-ply") return CloudFormat::ascii_ply;
  if (s == "off" || s == "off-mesh") return CloudFormat::off_mesh;
  throw UsageError("unknown cloud format '" + s + "' (xyz|ply|off)");
}

CloudFormat format_from_path(const std::string& path) {
  const auto dot = path.rfind('.');
  const std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  if (ext == "ply") return CloudFormat::ascii_ply;
  if (ext == "off") return CloudFormat::off_mesh;
  return CloudFormat::xyz_text;
}

PointCloud load_point_cloud(const std::string& path, CloudFormat format,
                            std::size_t sample_count, std::uint64_t seed) {
  switch (format) {
    case CloudFormat::xyz_text: return load_xyz(path);
    case CloudFormat::ascii_ply: return load_ply(path);
    case CloudFormat::off_mesh: return load_off_sampled(path, sample_count, seed);
  }
  throw UsageError("bad cloud format");
}

void save_point_cloud(const PointCloud& cloud, const std::string& path,
                      CloudFormat format) {
  if (cloud.points.empty()) throw DataError("save_point_cloud: empty cloud");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  char buf[96];
  if (format == CloudFormat::xyz_text) {
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const Vec3& p = cloud.points[i];
      std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g", p[0], p[1], p[2]);
      out << buf;
      if (cloud.has_labels()) out << ' ' << cloud.labels[i];
      out << '\n';
    }
  } else if (format == CloudFormat::ascii_ply) {
    out << "ply\nformat ascii 1.0\nelement vertex " << cloud.size()
        << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
    for (const Vec3& p : cloud.points) {
      std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n", p[0], p[1], p[2]);
      out << buf;
    }
  } else {
    throw UsageError("save_point_cloud: only xyz and ply output are supported");
  }
  if (!out) throw DataError("write failed for '" + path + "'");
}

std::vector<std::array<double, 2>> export_projection(const PointCloud& cloud,
                                                     const std::string& path,
                                                     int axis) {
  if (cloud.points.empty()) throw DataError("export_projection: empty cloud");
  if (axis < 0 || axis > 2) throw UsageError("export_projection: axis must be 0, 1 or 2");
  const int u = (axis + 1) % 3;
  const int v = (axis + 2) % 3;

  std::vector<std::array<double, 2>> proj;
  proj.reserve(cloud.size());
  double lo = 0.0, hi = 0.0;
  for (const Vec3& p : cloud.points) {
    proj.push_back({p[u], p[v]});
    lo = std::min({lo, p[u], p[v]});
    hi = std::max({hi, p[u], p[v]});
  }
  const double span = std::max(hi - lo, 1e-12);
  const double size = 480.0, margin = 16.0;
  const double scale = (size - 2 * margin) / span;

  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\""
      << size << "\" viewBox=\"0 0 " << size << " " << size << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (const auto& q : proj) {
    const double cx = margin + (q[0] - lo) * scale;
    const double cy = size - margin - (q[1] - lo) * scale;  // y grows upward
    out << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"1.6\" fill=\"#1f6fb2\"/>\n";
  }
  out << "</svg>\n";
  if (!out) throw DataError("write failed for '" + path + "'");
  return proj;
}

}  // namespace mapvae::geometry
