// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "mapvae/geometry.hpp"

namespace mapvae::geometry {

enum class CloudFormat { xyz_text, ascii_ply, off_mesh };

CloudFormat parse_cloud_format(const std::string& s);
// Guess from the file extension (.xyz/.txt, .ply, .off).
CloudFormat format_from_path(const std::string& path);

// Readers reject non-finite coordinates and report parse errors with the
// offending line number. OFF meshes are converted to points by area-weighted
// triangle sampling (sample_count points, deterministic in seed).
PointCloud load_point_cloud(const std::string& path, CloudFormat format,
                            std::size_t sample_count = 2048, std::uint64_t seed = 0);

// Text export with full double precision; labels appended when present.
void save_point_cloud(const PointCloud& cloud, const std::string& path,
                      CloudFormat format);

// Orthographic scatter along `axis` written as an SVG file. Returns the
// projected 2-d coordinates in plot order.
std::vector<std::array<double, 2>> export_projection(const PointCloud& cloud,
                                                     const std::string& path,
                                                     int axis = 1);

}  // namespace mapvae::geometry
