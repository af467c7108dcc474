// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "mapvae/diffcore.hpp"
#include "mapvae/geometry.hpp"

namespace mapvae::model {

using diffcore::ParamSet;
using diffcore::Tape;
using diffcore::Tensor;
using diffcore::VarId;
using geometry::PointCloud;
using geometry::TrainingSample;

// Architecture sizes. Decoder widths scale with the cloud size; zeros are
// filled in by resolve(). The paper-scale configuration (2N=2048) resolves to
// the 1024-2048-6144 trunk with 256 per-point channels.
struct Dims {
  std::size_t n_half = 128;  // N; clouds carry 2N points
  int v_angles = 12;         // V
  int w_steps = 6;           // W
  std::size_t feat = 64;     // D_f, low-level feature width
  std::size_t hidden = 64;   // D_h, GRU hidden width
  std::size_t latent = 16;   // Z
  std::size_t enc_h1 = 64;   // encoder per-point MLP widths
  std::size_t enc_h2 = 128;
  std::size_t dec_t1 = 0;  // decoder trunk widths; 0 -> cloud/2 and cloud
  std::size_t dec_t2 = 0;
  std::size_t dec_pp = 0;  // per-point channels C; 0 -> max(16, cloud/8)
  std::size_t pre_t1 = 0;  // pretraining decoder width; 0 -> cloud

  std::size_t cloud_points() const { return 2 * n_half; }
  Dims resolved() const;
};

struct Hyper {
  double alpha = 0.01;   // KL weight in C_R
  double beta = 1000.0;  // prediction weight in the total
  bool variational = true;
  bool branch_r = true;  // include C_R in the total; false is the "no R" ablation
};

// The per-branch costs of one sample. c_r = c_d + alpha*kl always holds;
// total = c_r + beta*c_p holds whenever branch R is enabled.
struct LossBreakdown {
  double c_d = 0.0;
  double kl = 0.0;
  double c_r = 0.0;
  double c_p = 0.0;
  double total = 0.0;
};

// --------------------------------------------------------------------------
// Parameter construction

// Permutation-invariant set encoder: shared per-point MLP, max pool, head.
// Global and local encoders share this architecture and differ only in the
// point count they consume.
void init_encoder_params(ParamSet& ps, const std::string& prefix, const Dims& d,
                         std::uint64_t seed);

// Decoder, aggregation GRU, variational head, deterministic projection and
// prediction GRU.
void init_model_params(ParamSet& ps, const Dims& d, std::uint64_t seed);

// Lightweight decoder used only for encoder pretraining autoencoders.
void init_pretrain_decoder(ParamSet& ps, const std::string& prefix, const Dims& d,
                           std::size_t out_points, std::uint64_t seed);

void set_encoders_frozen(ParamSet& ps, bool frozen);
bool encoders_frozen(const ParamSet& ps);

// --------------------------------------------------------------------------
// Tape-level building blocks

VarId encoder_forward(Tape& t, ParamSet& ps, const std::string& prefix, VarId points);
VarId pretrain_decoder_forward(Tape& t, ParamSet& ps, const std::string& prefix,
                               VarId feature, std::size_t out_points);

// Aggregation branch A: consume the global feature then each front feature.
VarId aggregate_forward(Tape& t, ParamSet& ps, VarId global_feat,
                        const std::vector<VarId>& front_feats);

struct DecodeVars {
  VarId cloud;          // 2N x 3
  VarId point_features; // 2N x C, the second-last decoder stage
};
// Decode a latent row vector into a cloud. `training_bn` selects batch-vs-
// running statistics in the per-point normalization stage.
DecodeVars decoder_forward(Tape& t, ParamSet& ps, const Dims& d, VarId z,
                           bool training_bn, Tensor* bn_capture_mean = nullptr,
                           Tensor* bn_capture_var = nullptr);

// Prediction branch P: start token, then feed back each predicted feature.
std::vector<VarId> predict_forward(Tape& t, ParamSet& ps, VarId h, int w_steps);

// --------------------------------------------------------------------------
// Plain-value operations

std::vector<double> encode_global(const PointCloud& cloud, ParamSet& ps, const Dims& d);
std::vector<double> encode_local(const PointCloud& half, ParamSet& ps, const Dims& d);

std::vector<double> aggregate(const std::vector<double>& global_feat,
                              const std::vector<std::vector<double>>& front_feats,
                              ParamSet& ps, const Dims& d);

struct Reconstruction {
  PointCloud cloud;
  std::vector<std::vector<double>> point_features;  // 2N x C
  std::vector<double> mu, sigma;                    // empty when non-variational
};
// Branch R from an angle-specific feature. variational=false decodes a
// deterministic projection of h instead of a sampled latent.
Reconstruction reconstruct(const std::vector<double>& h, ParamSet& ps, const Dims& d,
                           std::uint64_t seed, bool variational);

// Decode an externally chosen latent vector (generation / interpolation).
Reconstruction decode_latent(const std::vector<double>& z, ParamSet& ps, const Dims& d);

std::vector<std::vector<double>> predict_backs(const std::vector<double>& h,
                                               ParamSet& ps, const Dims& d, int w_steps);

// c_d = exact EMD, kl from (mu, sigma), c_r = c_d + alpha*kl.
std::tuple<double, double, double> loss_reconstruction(const PointCloud& recon,
                                                       const PointCloud& target,
                                                       std::span<const double> mu,
                                                       std::span<const double> sigma,
                                                       double alpha);

// c_p = mean over the W steps of the squared feature error.
double loss_prediction(const std::vector<std::vector<double>>& predicted,
                       const std::vector<std::vector<double>>& ground_truth);

// --------------------------------------------------------------------------
// Full objective

// Frozen-encoder feature cache for one sample.
struct SampleFeatures {
  std::vector<double> global_f;
  std::vector<std::vector<double>> front_f;
  std::vector<std::vector<double>> back_f;
};
SampleFeatures compute_features(const TrainingSample& sample, ParamSet& ps, const Dims& d);

struct LossOptions {
  Hyper hyper;
  std::uint64_t noise_seed = 0;
  bool with_grad = false;
  // Precomputed frozen-encoder features; when absent the encoders run
  // in-tape (their trainable flag decides whether gradients flow).
  const SampleFeatures* features = nullptr;
  // Reconstruction target override (completion mode); defaults to sample.full.
  const PointCloud* recon_target = nullptr;
  // Batch-norm capture buffers for deterministic parallel training.
  Tensor* bn_capture_mean = nullptr;
  Tensor* bn_capture_var = nullptr;
};

struct LossOutput {
  LossBreakdown loss;
  std::uint64_t structure_hash = 0;
  bool tie = false;
};

// One full A/R/P pass; accumulates gradients into ps when with_grad.
LossOutput run_loss(const TrainingSample& sample, ParamSet& ps, const Dims& d,
                    const LossOptions& opts);

// Convenience wrapper matching the spec surface: no gradients.
LossBreakdown loss_total(const TrainingSample& sample, ParamSet& ps, const Dims& d,
                         const Hyper& hyper, std::uint64_t seed);

// Merge per-sample batch-norm captures into the running statistics, in
// sample order. Used by the trainer after a parallel batch.
void merge_bn_captures(ParamSet& ps, const Dims& d,
                       const std::vector<const Tensor*>& means,
                       const std::vector<const Tensor*>& vars);

}  // namespace mapvae::model
