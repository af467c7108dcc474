// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mapvae/pipeline.hpp"
#include "mapvae/pointcloud_io.hpp"

namespace mapvae::eval {

using diffcore::ParamSet;
using geometry::PointCloud;
using pipeline::PreparedCloud;

// Global shape descriptor: elementwise max over the V angle-specific
// features, which are kept alongside.
struct ShapeEmbedding {
  std::vector<double> h;                       // D_h
  std::vector<std::vector<double>> per_angle;  // V x D_h
};

ShapeEmbedding embed_shape(const PreparedCloud& prepared, ParamSet& params,
                           const model::Dims& dims);

// One-vs-rest hinge-loss linear classifier trained by full-batch gradient
// descent on standardized inputs.
struct LinearProbe {
  std::vector<double> mean, inv_std;       // input standardization
  std::vector<std::vector<double>> w;      // per class
  std::vector<double> b;
  int classes = 0;
};

struct ProbeOptions {
  std::size_t epochs = 400;
  double lr = 0.05;
  double l2 = 1e-3;
};

LinearProbe train_probe(const std::vector<std::vector<double>>& inputs,
                        const std::vector<int>& labels, std::uint64_t seed,
                        const ProbeOptions& opts = {});
int classify(const LinearProbe& probe, const std::vector<double>& input);
double probe_accuracy(const LinearProbe& probe,
                      const std::vector<std::vector<double>>& inputs,
                      const std::vector<int>& labels);

// Reconstructed points with decoder features and labels transferred from the
// ground-truth cloud by 5-nearest-neighbor majority vote (ties fall back to
// the single nearest neighbor's label).
struct TransferredShape {
  PointCloud reconstructed;
  std::vector<std::vector<double>> features;  // per point, C channels
  std::vector<int> labels;                    // transferred part labels
  std::vector<int> nearest_label;             // label of the single nearest GT point
  std::vector<double> nearest_dist;           // distance to that point
};

TransferredShape transfer_labels(const PreparedCloud& prepared, ParamSet& params,
                                 const model::Dims& dims);

// Majority of the five nearest labels; ties resolved to the nearest point's
// label. Exposed for direct testing of the voting rule.
int vote_label(const std::vector<int>& five_nearest_labels, int nearest_label);

struct SegmentationMetrics {
  std::vector<int> class_ids;
  std::vector<double> class_iou;   // averaged per class over shapes
  std::vector<double> class_acc;
  double mean_iou = 0.0;
  double mean_acc = 0.0;
  double overall_acc = 0.0;
};

// Train the per-point softmax classifier on the training shapes' features
// and score it on the test shapes against their transferred labels.
SegmentationMetrics segment_evaluate(const std::vector<TransferredShape>& train_shapes,
                                     const std::vector<TransferredShape>& test_shapes,
                                     std::uint64_t seed, std::size_t epochs = 150,
                                     double lr = 0.1);

// Decode a latent sampled from the unit Gaussian (or supplied directly).
PointCloud generate(ParamSet& params, const model::Dims& dims, std::uint64_t seed);
PointCloud generate_from(ParamSet& params, const model::Dims& dims,
                         const std::vector<double>& z);

// Decode the linear path between two latents; endpoints are bit-identical to
// generate_from at z_a and z_b.
std::vector<PointCloud> interpolate(ParamSet& params, const model::Dims& dims,
                                    const std::vector<double>& z_a,
                                    const std::vector<double>& z_b, std::size_t steps);

struct CompletionResult {
  PointCloud completed;
  double emd_per_point = 0.0;
};

// Branch A on the partial's sequence sample, non-variational reconstruction,
// EMD/point against the ground-truth complete cloud.
CompletionResult complete(const PreparedCloud& prepared_partial, ParamSet& params,
                          const model::Dims& dims);

// File exports (spec surface; thin wrappers over the io layer).
inline void export_cloud(const PointCloud& cloud, const std::string& path,
                         geometry::CloudFormat format) {
  geometry::save_point_cloud(cloud, path, format);
}
inline std::vector<std::array<double, 2>> export_projection(const PointCloud& cloud,
                                                            const std::string& path,
                                                            int axis = 1) {
  return geometry::export_projection(cloud, path, axis);
}

void write_embeddings_csv(const std::string& path, const std::vector<std::string>& names,
                          const std::vector<int>& labels,
                          const std::vector<ShapeEmbedding>& embeddings);

}  // namespace mapvae::eval
