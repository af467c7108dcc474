// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mapvae/checkpoint.hpp"
#include "mapvae/geometry.hpp"
#include "mapvae/model.hpp"
#include "mapvae/rng.hpp"

namespace mapvae::pipeline {

using diffcore::Checkpoint;
using diffcore::ParamSet;
using geometry::PointCloud;

struct TrainConfig {
  double alpha = 0.01;
  double beta = 1000.0;
  int v_angles = 12;          // V
  int w_steps = 6;            // W
  std::size_t n_half = 128;   // N; clouds carry 2N points
  std::size_t latent = 16;    // Z
  std::size_t feat = 64;      // D_f
  std::size_t hidden = 64;    // D_h
  std::size_t knn_k = 10;
  std::string split_mode = "geodesic";
  std::string scheme = "uniform";
  double lr = 1e-3;
  std::size_t batch_size = 8;
  std::size_t steps = 2000;
  std::size_t pretrain_steps = 500;
  std::uint64_t seed = 1;
  bool variational = true;
  bool branch_r = true;               // false: "no R" ablation
  std::string pretrain_loss = "emd";  // emd | chamfer
  std::string dataset;                // directory or synth:... spec
  int threads = 0;                    // 0 = hardware concurrency
  std::string out_dir = "out";
  std::size_t checkpoint_every = 0;  // 0 = only final

  model::Dims dims() const;
  model::Hyper hyper() const;
  void validate() const;
  std::string to_text() const;
  static TrainConfig from_text(const std::string& text);
  static TrainConfig load_file(const std::string& path);

  // Table 7 configuration: alpha = 0, W = 12, non-variational decoding.
  TrainConfig completion_preset() const;
};

struct DatasetEntry {
  std::string name;
  int label = -1;
  PointCloud cloud;  // normalized, exactly 2N points
};
using Dataset = std::vector<DatasetEntry>;

// "synth:classes=a+b+c,per=30,jitter=0.01,seed=7" generates per-class shape
// variations; anything else is a directory of <class>/<file>.{xyz,ply,off}.
Dataset load_dataset(const std::string& spec, const TrainConfig& cfg);

// Resample to exactly `count` points: deterministic subsample without
// replacement, topped up with replacement when the cloud is smaller.
PointCloud resample_to(const PointCloud& cloud, std::size_t count, std::uint64_t seed);

// Splits plus frozen-encoder features for every start angle of one cloud.
struct PreparedCloud {
  DatasetEntry entry;
  std::vector<geometry::TrainingSample> samples;
  std::vector<model::SampleFeatures> features;  // parallel to samples
  PointCloud target;                            // reconstruction target
};

std::vector<geometry::TrainingSample> cloud_samples(const PointCloud& cloud,
                                                    const TrainConfig& cfg);
PreparedCloud prepare_cloud(const DatasetEntry& entry, const TrainConfig& cfg,
                            ParamSet& encoder_params,
                            const PointCloud* target_override = nullptr);

struct LossRow {
  std::uint64_t step = 0;
  model::LossBreakdown loss;
};

void write_loss_csv(const std::string& path, const std::vector<LossRow>& rows);

// Self-reconstruction pretraining of the global and local encoders. The
// returned set contains both encoders marked frozen plus nothing else.
ParamSet pretrain_encoders(const Dataset& dataset, const TrainConfig& cfg,
                           std::vector<LossRow>* log = nullptr);

struct TrainResult {
  ParamSet params;            // encoders + trained model blocks
  std::vector<LossRow> log;   // one row per step (batch means)
  std::uint64_t final_step = 0;
};

// MAP-VAE training over all V samples of every prepared cloud. `resume`
// continues bit-exactly from a checkpoint produced by this function.
TrainResult train(const std::vector<PreparedCloud>& prepared, const ParamSet& encoders,
                  const TrainConfig& cfg, const Checkpoint* resume = nullptr,
                  const std::string& checkpoint_path = "",
                  const std::string& loss_csv_path = "");

// Convenience: prepare all clouds of a dataset in parallel.
std::vector<PreparedCloud> prepare_dataset(const Dataset& dataset, const TrainConfig& cfg,
                                           ParamSet& encoder_params);

struct CompletionEntry {
  std::string name;
  int label = -1;
  PointCloud partial;   // resampled to 2N and normalized
  PointCloud complete;  // ground truth, 2N points, normalized
};

// Pair partial scans with ground-truth complete clouds; partials are
// resampled to 2N points. Throws when the lists disagree in length.
std::vector<CompletionEntry> make_completion_dataset(const std::vector<PointCloud>& partials,
                                                     const std::vector<PointCloud>& completes,
                                                     std::size_t n_half, std::uint64_t seed);

std::vector<PreparedCloud> prepare_completion(const std::vector<CompletionEntry>& entries,
                                              const TrainConfig& cfg,
                                              ParamSet& encoder_params);

// Deterministic training schedule: global position -> (cloud index, sample
// index). Exposed for resume logic and schedule tests.
class Schedule {
 public:
  Schedule(std::size_t n_clouds, int v_angles, std::uint64_t seed);
  std::pair<std::size_t, std::size_t> at(std::uint64_t global_pos);
  std::size_t epoch_len() const { return epoch_.size(); }

 private:
  void advance_to_epoch(std::uint64_t epoch);
  std::vector<std::pair<std::size_t, std::size_t>> epoch_;
  rng::Engine eng_;
  std::uint64_t current_epoch_ = 0;
};

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace mapvae::pipeline
