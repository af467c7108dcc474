// SPDX-License-Identifier: Apache-2.0

#include "mapvae/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include <limits>

#include "mapvae/errors.hpp"
#include "mapvae/kernels.hpp"
#include "mapvae/rng.hpp"
#include "mapvae/transport.hpp"

namespace mapvae::eval {

ShapeEmbedding embed_shape(const PreparedCloud& prepared, ParamSet& params,
                           const model::Dims& dims) {
  if (prepared.samples.empty()) throw DataError("embed_shape: cloud not prepared");
  ShapeEmbedding emb;
  emb.per_angle.reserve(prepared.samples.size());
  for (std::size_t i = 0; i < prepared.samples.size(); ++i) {
    const model::SampleFeatures& f = prepared.features[i];
    emb.per_angle.push_back(model::aggregate(f.global_f, f.front_f, params, dims));
  }
  emb.h = emb.per_angle[0];
  for (const auto& h : emb.per_angle) {
    for (std::size_t d = 0; d < emb.h.size(); ++d) emb.h[d] = std::max(emb.h[d], h[d]);
  }
  return emb;
}

// ---------------------------------------------------------------------------
// Linear probe

LinearProbe train_probe(const std::vector<std::vector<double>>& inputs,
                        const std::vector<int>& labels, std::uint64_t seed,
                        const ProbeOptions& opts) {
  if (inputs.empty() || inputs.size() != labels.size()) {
    throw DataError("train_probe: bad training set");
  }
  std::set<int> classes(labels.begin(), labels.end());
  if (classes.size() < 2) throw DataError("train_probe: need at least two classes");
  const int k = 1 + *std::max_element(labels.begin(), labels.end());
  const std::size_t dim = inputs[0].size();
  const std::size_t n = inputs.size();
  (void)seed;  // optimization is deterministic from a zero start

  LinearProbe p;
  p.classes = k;
  p.mean.assign(dim, 0.0);
  p.inv_std.assign(dim, 1.0);
  for (const auto& x : inputs) {
    for (std::size_t d = 0; d < dim; ++d) p.mean[d] += x[d];
  }
  for (double& m : p.mean) m /= static_cast<double>(n);
  std::vector<double> var(dim, 0.0);
  for (const auto& x : inputs) {
    for (std::size_t d = 0; d < dim; ++d) {
      var[d] += (x[d] - p.mean[d]) * (x[d] - p.mean[d]);
    }
  }
  for (std::size_t d = 0; d < dim; ++d) {
    p.inv_std[d] = 1.0 / std::sqrt(var[d] / static_cast<double>(n) + 1e-12);
  }

  std::vector<std::vector<double>> sx(n, std::vector<double>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < dim; ++d) {
      sx[i][d] = (inputs[i][d] - p.mean[d]) * p.inv_std[d];
    }
  }

  p.w.assign(static_cast<std::size_t>(k), std::vector<double>(dim, 0.0));
  p.b.assign(static_cast<std::size_t>(k), 0.0);
  for (int c = 0; c < k; ++c) {
    auto& w = p.w[static_cast<std::size_t>(c)];
    double& b = p.b[static_cast<std::size_t>(c)];
    for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
      std::vector<double> gw(dim, 0.0);
      double gb = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double y = labels[i] == c ? 1.0 : -1.0;
        double score = b;
        for (std::size_t d = 0; d < dim; ++d) score += w[d] * sx[i][d];
        if (1.0 - y * score > 0.0) {  // margin violation contributes to the hinge
          for (std::size_t d = 0; d < dim; ++d) gw[d] -= y * sx[i][d];
          gb -= y;
        }
      }
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t d = 0; d < dim; ++d) {
        w[d] -= opts.lr * (gw[d] * inv_n + opts.l2 * w[d]);
      }
      b -= opts.lr * gb * inv_n;
    }
  }
  return p;
}

int classify(const LinearProbe& probe, const std::vector<double>& input) {
  if (input.size() != probe.mean.size()) throw DataError("classify: dimension mismatch");
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < probe.classes; ++c) {
    double score = probe.b[static_cast<std::size_t>(c)];
    for (std::size_t d = 0; d < input.size(); ++d) {
      score += probe.w[static_cast<std::size_t>(c)][d] * (input[d] - probe.mean[d]) *
               probe.inv_std[d];
    }
    if (score > best_score) {
      best_score = score;
      best = c;
    }
  }
  return best;
}

double probe_accuracy(const LinearProbe& probe,
                      const std::vector<std::vector<double>>& inputs,
                      const std::vector<int>& labels) {
  if (inputs.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (classify(probe, inputs[i]) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(inputs.size());
}

// ---------------------------------------------------------------------------
// Segmentation

int vote_label(const std::vector<int>& five_nearest_labels, int nearest_label) {
  std::map<int, int> counts;
  for (int l : five_nearest_labels) counts[l] += 1;
  int best_label = nearest_label;
  int best_count = 0;
  bool tie = false;
  for (const auto& [label, count] : counts) {
    if (count > best_count) {
      best_count = count;
      best_label = label;
      tie = false;
    } else if (count == best_count) {
      tie = true;
    }
  }
  return tie ? nearest_label : best_label;
}

TransferredShape transfer_labels(const PreparedCloud& prepared, ParamSet& params,
                                 const model::Dims& dims) {
  const PointCloud& gt = prepared.entry.cloud;
  if (!gt.has_labels()) throw DataError("transfer_labels: ground-truth labels missing");

  // reconstruct from the sample starting at angle 1
  const model::SampleFeatures& f = prepared.features[0];
  const std::vector<double> h = model::aggregate(f.global_f, f.front_f, params, dims);
  const model::Reconstruction rec =
      model::reconstruct(h, params, dims, /*seed=*/0, /*variational=*/false);

  TransferredShape out;
  out.reconstructed = rec.cloud;
  out.features = rec.point_features;
  out.labels.resize(rec.cloud.size());
  out.nearest_label.resize(rec.cloud.size());
  out.nearest_dist.resize(rec.cloud.size());

  std::vector<double> d2(rec.cloud.size() * gt.size());
  kernels::ops().sqdist3(rec.cloud.flat(), rec.cloud.size(), gt.flat(), gt.size(),
                         d2.data());
  std::vector<std::size_t> order(gt.size());
  for (std::size_t i = 0; i < rec.cloud.size(); ++i) {
    const double* row = d2.data() + i * gt.size();
    for (std::size_t j = 0; j < gt.size(); ++j) order[j] = j;
    std::partial_sort(order.begin(), order.begin() + 5, order.end(),
                      [row](std::size_t a, std::size_t b) {
                        return row[a] != row[b] ? row[a] < row[b] : a < b;
                      });
    std::vector<int> five;
    five.reserve(5);
    for (int k = 0; k < 5; ++k) five.push_back(gt.labels[order[static_cast<std::size_t>(k)]]);
    out.nearest_label[i] = gt.labels[order[0]];
    out.nearest_dist[i] = std::sqrt(row[order[0]]);
    out.labels[i] = vote_label(five, out.nearest_label[i]);
  }
  return out;
}

namespace {

struct Softmax {
  std::vector<std::vector<double>> w;  // k x dim
  std::vector<double> b;
  int k = 0;
};

int softmax_predict(const Softmax& sm, const std::vector<double>& x) {
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < sm.k; ++c) {
    double s = sm.b[static_cast<std::size_t>(c)];
    for (std::size_t d = 0; d < x.size(); ++d) s += sm.w[static_cast<std::size_t>(c)][d] * x[d];
    if (s > best_score) {
      best_score = s;
      best = c;
    }
  }
  return best;
}

}  // namespace

SegmentationMetrics segment_evaluate(const std::vector<TransferredShape>& train_shapes,
                                     const std::vector<TransferredShape>& test_shapes,
                                     std::uint64_t seed, std::size_t epochs, double lr) {
  if (train_shapes.empty() || test_shapes.empty()) {
    throw DataError("segment_evaluate: empty split");
  }
  (void)seed;

  std::set<int> class_set;
  for (const auto& s : train_shapes) class_set.insert(s.labels.begin(), s.labels.end());
  for (const auto& s : test_shapes) class_set.insert(s.labels.begin(), s.labels.end());
  std::vector<int> class_ids(class_set.begin(), class_set.end());
  std::map<int, int> to_idx;
  for (std::size_t i = 0; i < class_ids.size(); ++i) to_idx[class_ids[i]] = static_cast<int>(i);
  const int k = static_cast<int>(class_ids.size());
  const std::size_t dim = train_shapes[0].features[0].size();

  // flatten the training points
  std::vector<const std::vector<double>*> x;
  std::vector<int> y;
  for (const auto& s : train_shapes) {
    for (std::size_t i = 0; i < s.features.size(); ++i) {
      x.push_back(&s.features[i]);
      y.push_back(to_idx.at(s.labels[i]));
    }
  }

  Softmax sm;
  sm.k = k;
  sm.w.assign(static_cast<std::size_t>(k), std::vector<double>(dim, 0.0));
  sm.b.assign(static_cast<std::size_t>(k), 0.0);
  const std::size_t n = x.size();
  std::vector<double> scores(static_cast<std::size_t>(k));
  std::vector<std::vector<double>> gw(static_cast<std::size_t>(k),
                                      std::vector<double>(dim));
  std::vector<double> gb(static_cast<std::size_t>(k));
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    for (auto& g : gw) std::fill(g.begin(), g.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        double s = sm.b[static_cast<std::size_t>(c)];
        for (std::size_t d = 0; d < dim; ++d) {
          s += sm.w[static_cast<std::size_t>(c)][d] * (*x[i])[d];
        }
        scores[static_cast<std::size_t>(c)] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (int c = 0; c < k; ++c) {
        scores[static_cast<std::size_t>(c)] = std::exp(scores[static_cast<std::size_t>(c)] - mx);
        z += scores[static_cast<std::size_t>(c)];
      }
      for (int c = 0; c < k; ++c) {
        const double prob = scores[static_cast<std::size_t>(c)] / z;
        const double delta = prob - (c == y[i] ? 1.0 : 0.0);
        auto& g = gw[static_cast<std::size_t>(c)];
        for (std::size_t d = 0; d < dim; ++d) g[d] += delta * (*x[i])[d];
        gb[static_cast<std::size_t>(c)] += delta;
      }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    for (int c = 0; c < k; ++c) {
      for (std::size_t d = 0; d < dim; ++d) {
        sm.w[static_cast<std::size_t>(c)][d] -= lr * gw[static_cast<std::size_t>(c)][d] * inv_n;
      }
      sm.b[static_cast<std::size_t>(c)] -= lr * gb[static_cast<std::size_t>(c)] * inv_n;
    }
  }

  // evaluate on the test shapes; IoU per shape per class, averaged per class
  SegmentationMetrics m;
  m.class_ids = class_ids;
  std::vector<double> iou_sum(static_cast<std::size_t>(k), 0.0);
  std::vector<std::size_t> iou_count(static_cast<std::size_t>(k), 0);
  std::vector<std::size_t> correct_per_class(static_cast<std::size_t>(k), 0);
  std::vector<std::size_t> total_per_class(static_cast<std::size_t>(k), 0);
  std::size_t correct = 0, total = 0;
  for (const auto& s : test_shapes) {
    std::vector<std::size_t> tp(static_cast<std::size_t>(k), 0),
        fp(static_cast<std::size_t>(k), 0), fn(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < s.features.size(); ++i) {
      const int truth = to_idx.at(s.labels[i]);
      const int pred = softmax_predict(sm, s.features[i]);
      ++total;
      ++total_per_class[static_cast<std::size_t>(truth)];
      if (pred == truth) {
        ++correct;
        ++correct_per_class[static_cast<std::size_t>(truth)];
        ++tp[static_cast<std::size_t>(truth)];
      } else {
        ++fp[static_cast<std::size_t>(pred)];
        ++fn[static_cast<std::size_t>(truth)];
      }
    }
    for (int c = 0; c < k; ++c) {
      const std::size_t uni = tp[static_cast<std::size_t>(c)] + fp[static_cast<std::size_t>(c)] +
                              fn[static_cast<std::size_t>(c)];
      if (uni == 0) continue;  // class absent from this shape and its predictions
      iou_sum[static_cast<std::size_t>(c)] +=
          static_cast<double>(tp[static_cast<std::size_t>(c)]) / static_cast<double>(uni);
      iou_count[static_cast<std::size_t>(c)] += 1;
    }
  }
  m.class_iou.resize(static_cast<std::size_t>(k), 0.0);
  m.class_acc.resize(static_cast<std::size_t>(k), 0.0);
  double iou_acc = 0.0, acc_acc = 0.0;
  for (int c = 0; c < k; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    m.class_iou[ci] = iou_count[ci] > 0 ? iou_sum[ci] / static_cast<double>(iou_count[ci]) : 0.0;
    m.class_acc[ci] = total_per_class[ci] > 0
                          ? static_cast<double>(correct_per_class[ci]) /
                                static_cast<double>(total_per_class[ci])
                          : 0.0;
    iou_acc += m.class_iou[ci];
    acc_acc += m.class_acc[ci];
  }
  m.mean_iou = iou_acc / static_cast<double>(k);
  m.mean_acc = acc_acc / static_cast<double>(k);
  m.overall_acc = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// Generation / interpolation / completion

PointCloud generate(ParamSet& params, const model::Dims& dims, std::uint64_t seed) {
  const model::Dims d = dims.resolved();
  return generate_from(params, d, diffcore::draw_standard_normal(d.latent, seed));
}

PointCloud generate_from(ParamSet& params, const model::Dims& dims,
                         const std::vector<double>& z) {
  return model::decode_latent(z, params, dims).cloud;
}

std::vector<PointCloud> interpolate(ParamSet& params, const model::Dims& dims,
                                    const std::vector<double>& z_a,
                                    const std::vector<double>& z_b, std::size_t steps) {
  if (steps < 2) throw UsageError("interpolate: need at least 2 steps");
  if (z_a.size() != z_b.size()) throw DataError("interpolate: latent size mismatch");
  std::vector<PointCloud> out;
  out.reserve(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    if (s == 0) {
      out.push_back(generate_from(params, dims, z_a));
      continue;
    }
    if (s == steps - 1) {
      out.push_back(generate_from(params, dims, z_b));
      continue;
    }
    const double t = static_cast<double>(s) / static_cast<double>(steps - 1);
    std::vector<double> z(z_a.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = (1.0 - t) * z_a[i] + t * z_b[i];
    out.push_back(generate_from(params, dims, z));
  }
  return out;
}

CompletionResult complete(const PreparedCloud& prepared_partial, ParamSet& params,
                          const model::Dims& dims) {
  const model::SampleFeatures& f = prepared_partial.features[0];
  const std::vector<double> h = model::aggregate(f.global_f, f.front_f, params, dims);
  const model::Reconstruction rec =
      model::reconstruct(h, params, dims, /*seed=*/0, /*variational=*/false);
  CompletionResult res;
  res.completed = rec.cloud;
  const double cost = transport::emd_exact(rec.cloud, prepared_partial.target).cost;
  res.emd_per_point = cost / static_cast<double>(rec.cloud.size());
  return res;
}

void write_embeddings_csv(const std::string& path, const std::vector<std::string>& names,
                          const std::vector<int>& labels,
                          const std::vector<ShapeEmbedding>& embeddings) {
  if (names.size() != embeddings.size() || labels.size() != embeddings.size()) {
    throw DataError("write_embeddings_csv: length mismatch");
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << "name,label";
  if (!embeddings.empty()) {
    for (std::size_t d = 0; d < embeddings[0].h.size(); ++d) out << ",h" << d;
  }
  out << '\n';
  char buf[40];
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    out << names[i] << ',' << labels[i];
    for (double v : embeddings[i].h) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw DataError("write failed for '" + path + "'");
}

}  // namespace mapvae::eval
