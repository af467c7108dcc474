// SPDX-License-Identifier: Apache-2.0

#include "mapvae/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "mapvae/errors.hpp"
#include "mapvae/rng.hpp"
#include "mapvae/transport.hpp"

namespace mapvae::model {

namespace {

Tensor normal_init(std::size_t rows, std::size_t cols, double stddev, std::uint64_t seed) {
  Tensor t(rows, cols);
  rng::Engine eng(seed);
  for (double& x : t.v) x = stddev * rng::normal(eng);
  return t;
}

Tensor he_init(std::size_t fan_in, std::size_t fan_out, std::uint64_t seed) {
  return normal_init(fan_in, fan_out, std::sqrt(2.0 / static_cast<double>(fan_in)), seed);
}

Tensor xavier_init(std::size_t fan_in, std::size_t fan_out, std::uint64_t seed) {
  return normal_init(fan_in, fan_out,
                     std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)), seed);
}

std::uint64_t block_seed(std::uint64_t seed, const std::string& name) {
  return rng::stream_seed(seed, rng::hash_str(name));
}

void add_gru_params(ParamSet& ps, const std::string& prefix, std::size_t d_in,
                    std::size_t d_h, std::uint64_t seed) {
  for (const char* g : {"wz", "wr", "wc"}) {
    ps.add(prefix + g, xavier_init(d_in, d_h, block_seed(seed, prefix + g)));
  }
  for (const char* g : {"uz", "ur", "uc"}) {
    ps.add(prefix + g, xavier_init(d_h, d_h, block_seed(seed, prefix + g)));
  }
  for (const char* g : {"bz", "br", "bc"}) {
    ps.add(prefix + g, Tensor(1, d_h));
  }
}

diffcore::GruVars bind_gru(Tape& t, ParamSet& ps, const std::string& prefix) {
  return {t.param(ps.at(prefix + "wz")), t.param(ps.at(prefix + "uz")),
          t.param(ps.at(prefix + "bz")), t.param(ps.at(prefix + "wr")),
          t.param(ps.at(prefix + "ur")), t.param(ps.at(prefix + "br")),
          t.param(ps.at(prefix + "wc")), t.param(ps.at(prefix + "uc")),
          t.param(ps.at(prefix + "bc"))};
}

Tensor points_tensor(const PointCloud& cloud) {
  Tensor t(cloud.size(), 3);
  std::memcpy(t.data(), cloud.flat(), t.size() * sizeof(double));
  return t;
}

PointCloud tensor_points(const Tensor& t) {
  PointCloud c;
  c.points.resize(t.rows);
  std::memcpy(c.points.data(), t.data(), t.size() * sizeof(double));
  return c;
}

std::vector<double> row_values(const Tape& t, VarId id) {
  return t.val(id).v;
}

}  // namespace

Dims Dims::resolved() const {
  Dims d = *this;
  const std::size_t cloud = d.cloud_points();
  if (d.dec_t1 == 0) d.dec_t1 = std::max<std::size_t>(8, cloud / 2);
  if (d.dec_t2 == 0) d.dec_t2 = std::max<std::size_t>(16, cloud);
  if (d.dec_pp == 0) d.dec_pp = std::max<std::size_t>(16, cloud / 8);
  if (d.pre_t1 == 0) d.pre_t1 = std::max<std::size_t>(16, cloud);
  return d;
}

void init_encoder_params(ParamSet& ps, const std::string& prefix, const Dims& dims,
                         std::uint64_t seed) {
  const Dims d = dims.resolved();
  ps.add(prefix + "w1", he_init(3, d.enc_h1, block_seed(seed, prefix + "w1")));
  ps.add(prefix + "b1", Tensor(1, d.enc_h1));
  ps.add(prefix + "w2", he_init(d.enc_h1, d.enc_h2, block_seed(seed, prefix + "w2")));
  ps.add(prefix + "b2", Tensor(1, d.enc_h2));
  ps.add(prefix + "wh", xavier_init(d.enc_h2, d.feat, block_seed(seed, prefix + "wh")));
  ps.add(prefix + "bh", Tensor(1, d.feat));
}

void init_model_params(ParamSet& ps, const Dims& dims, std::uint64_t seed) {
  const Dims d = dims.resolved();
  add_gru_params(ps, "agg.", d.feat, d.hidden, seed);

  ps.add("var.mu_w", xavier_init(d.hidden, d.latent, block_seed(seed, "var.mu_w")));
  ps.add("var.mu_b", Tensor(1, d.latent));
  ps.add("var.lv_w", xavier_init(d.hidden, d.latent, block_seed(seed, "var.lv_w")));
  ps.add("var.lv_b", Tensor(1, d.latent));
  ps.add("proj.w", xavier_init(d.hidden, d.latent, block_seed(seed, "proj.w")));
  ps.add("proj.b", Tensor(1, d.latent));

  const std::size_t out = 3 * d.cloud_points();
  ps.add("dec.fc1_w", he_init(d.latent, d.dec_t1, block_seed(seed, "dec.fc1_w")));
  ps.add("dec.fc1_b", Tensor(1, d.dec_t1));
  ps.add("dec.fc2_w", he_init(d.dec_t1, d.dec_t2, block_seed(seed, "dec.fc2_w")));
  ps.add("dec.fc2_b", Tensor(1, d.dec_t2));
  ps.add("dec.fc3_w", xavier_init(d.dec_t2, out, block_seed(seed, "dec.fc3_w")));
  ps.add("dec.fc3_b", Tensor(1, out));
  ps.add("dec.pp1_w", he_init(3, d.dec_pp, block_seed(seed, "dec.pp1_w")));
  ps.add("dec.pp1_b", Tensor(1, d.dec_pp));
  ps.add("dec.bn1_gamma", Tensor(1, d.dec_pp, 1.0));
  ps.add("dec.bn1_beta", Tensor(1, d.dec_pp));
  ps.add("dec.bn1_rmean", Tensor(1, d.dec_pp), false);
  ps.add("dec.bn1_rvar", Tensor(1, d.dec_pp, 1.0), false);
  ps.add("dec.pp2_w", xavier_init(d.dec_pp, 3, block_seed(seed, "dec.pp2_w")));
  ps.add("dec.pp2_b", Tensor(1, 3));

  add_gru_params(ps, "pred.", d.feat, d.hidden, seed);
  ps.add("pred.init_w", xavier_init(d.hidden, d.hidden, block_seed(seed, "pred.init_w")));
  ps.add("pred.init_b", Tensor(1, d.hidden));
  ps.add("pred.start", normal_init(1, d.feat, 0.1, block_seed(seed, "pred.start")));
  ps.add("pred.out_w", xavier_init(d.hidden, d.feat, block_seed(seed, "pred.out_w")));
  ps.add("pred.out_b", Tensor(1, d.feat));
}

void init_pretrain_decoder(ParamSet& ps, const std::string& prefix, const Dims& dims,
                           std::size_t out_points, std::uint64_t seed) {
  const Dims d = dims.resolved();
  const std::size_t t1 = std::max<std::size_t>(16, d.pre_t1 * out_points / d.cloud_points());
  ps.add(prefix + "fc1_w", he_init(d.feat, t1, block_seed(seed, prefix + "fc1_w")));
  ps.add(prefix + "fc1_b", Tensor(1, t1));
  ps.add(prefix + "fc2_w",
         xavier_init(t1, 3 * out_points, block_seed(seed, prefix + "fc2_w")));
  ps.add(prefix + "fc2_b", Tensor(1, 3 * out_points));
}

void set_encoders_frozen(ParamSet& ps, bool frozen) {
  for (auto& b : ps.blocks) {
    if (b.name.rfind("enc_global.", 0) == 0 || b.name.rfind("enc_local.", 0) == 0) {
      b.trainable = !frozen;
    }
  }
}

bool encoders_frozen(const ParamSet& ps) {
  const diffcore::ParamBlock* b = ps.find("enc_global.w1");
  return b != nullptr && !b->trainable;
}

VarId encoder_forward(Tape& t, ParamSet& ps, const std::string& prefix, VarId points) {
  const VarId h1 = t.relu(t.affine(points, t.param(ps.at(prefix + "w1")),
                                   t.param(ps.at(prefix + "b1"))));
  const VarId h2 = t.relu(t.affine(h1, t.param(ps.at(prefix + "w2")),
                                   t.param(ps.at(prefix + "b2"))));
  const VarId pooled = t.set_max_pool(h2);
  return t.affine(pooled, t.param(ps.at(prefix + "wh")), t.param(ps.at(prefix + "bh")));
}

VarId pretrain_decoder_forward(Tape& t, ParamSet& ps, const std::string& prefix,
                               VarId feature, std::size_t out_points) {
  const VarId h = t.relu(t.affine(feature, t.param(ps.at(prefix + "fc1_w")),
                                  t.param(ps.at(prefix + "fc1_b"))));
  const VarId flat = t.affine(h, t.param(ps.at(prefix + "fc2_w")),
                              t.param(ps.at(prefix + "fc2_b")));
  return t.reshape(flat, out_points, 3);
}

VarId aggregate_forward(Tape& t, ParamSet& ps, VarId global_feat,
                        const std::vector<VarId>& front_feats) {
  const diffcore::GruVars gru = bind_gru(t, ps, "agg.");
  const std::size_t d_h = t.val(gru.uz).rows;
  VarId h = t.input(Tensor(1, d_h));
  h = diffcore::gru_step(t, global_feat, h, gru);
  for (const VarId f : front_feats) h = diffcore::gru_step(t, f, h, gru);
  return h;
}

DecodeVars decoder_forward(Tape& t, ParamSet& ps, const Dims& dims, VarId z,
                           bool training_bn, Tensor* bn_capture_mean,
                           Tensor* bn_capture_var) {
  const Dims d = dims.resolved();
  const VarId h1 = t.relu(t.affine(z, t.param(ps.at("dec.fc1_w")),
                                   t.param(ps.at("dec.fc1_b"))));
  const VarId h2 = t.relu(t.affine(h1, t.param(ps.at("dec.fc2_w")),
                                   t.param(ps.at("dec.fc2_b"))));
  const VarId flat = t.affine(h2, t.param(ps.at("dec.fc3_w")),
                              t.param(ps.at("dec.fc3_b")));
  const VarId coarse = t.reshape(flat, d.cloud_points(), 3);

  diffcore::BatchNormState bn;
  bn.running_mean = &ps.at("dec.bn1_rmean").value;
  bn.running_var = &ps.at("dec.bn1_rvar").value;
  bn.capture_mean = bn_capture_mean;
  bn.capture_var = bn_capture_var;
  const VarId pp_lin = t.affine(coarse, t.param(ps.at("dec.pp1_w")),
                                t.param(ps.at("dec.pp1_b")));
  const VarId pp = t.relu(t.batch_norm(pp_lin, t.param(ps.at("dec.bn1_gamma")),
                                       t.param(ps.at("dec.bn1_beta")), bn, training_bn));
  const VarId cloud = t.affine(pp, t.param(ps.at("dec.pp2_w")),
                               t.param(ps.at("dec.pp2_b")));
  return {cloud, pp};
}

std::vector<VarId> predict_forward(Tape& t, ParamSet& ps, VarId h, int w_steps) {
  const diffcore::GruVars gru = bind_gru(t, ps, "pred.");
  VarId hidden = t.affine(h, t.param(ps.at("pred.init_w")),
                          t.param(ps.at("pred.init_b")));
  VarId x = t.param(ps.at("pred.start"));
  std::vector<VarId> outputs;
  outputs.reserve(static_cast<std::size_t>(w_steps));
  for (int w = 0; w < w_steps; ++w) {
    hidden = diffcore::gru_step(t, x, hidden, gru);
    const VarId f = t.affine(hidden, t.param(ps.at("pred.out_w")),
                             t.param(ps.at("pred.out_b")));
    outputs.push_back(f);
    x = f;  // feed the prediction back as the next input
  }
  return outputs;
}

std::vector<double> encode_global(const PointCloud& cloud, ParamSet& ps, const Dims& d) {
  if (cloud.size() != d.cloud_points()) {
    throw DataError("encode_global: expected " + std::to_string(d.cloud_points()) +
                    " points, got " + std::to_string(cloud.size()));
  }
  Tape t;
  return row_values(t, encoder_forward(t, ps, "enc_global.", t.input(points_tensor(cloud))));
}

std::vector<double> encode_local(const PointCloud& half, ParamSet& ps, const Dims& d) {
  if (half.size() != d.n_half) {
    throw DataError("encode_local: expected " + std::to_string(d.n_half) +
                    " points, got " + std::to_string(half.size()));
  }
  Tape t;
  return row_values(t, encoder_forward(t, ps, "enc_local.", t.input(points_tensor(half))));
}

std::vector<double> aggregate(const std::vector<double>& global_feat,
                              const std::vector<std::vector<double>>& front_feats,
                              ParamSet& ps, const Dims& d) {
  if (static_cast<int>(front_feats.size()) != d.w_steps) {
    throw DataError("aggregate: expected " + std::to_string(d.w_steps) +
                    " front features, got " + std::to_string(front_feats.size()));
  }
  Tape t;
  const VarId g = t.input(Tensor::row(global_feat));
  std::vector<VarId> fronts;
  fronts.reserve(front_feats.size());
  for (const auto& f : front_feats) fronts.push_back(t.input(Tensor::row(f)));
  return row_values(t, aggregate_forward(t, ps, g, fronts));
}

namespace {

Reconstruction decode_common(Tape& t, ParamSet& ps, const Dims& d, VarId z) {
  const DecodeVars dec = decoder_forward(t, ps, d, z, /*training_bn=*/false);
  Reconstruction r;
  r.cloud = tensor_points(t.val(dec.cloud));
  const Tensor& pf = t.val(dec.point_features);
  r.point_features.resize(pf.rows);
  for (std::size_t i = 0; i < pf.rows; ++i) {
    r.point_features[i].assign(pf.v.begin() + static_cast<std::ptrdiff_t>(i * pf.cols),
                               pf.v.begin() + static_cast<std::ptrdiff_t>((i + 1) * pf.cols));
  }
  return r;
}

}  // namespace

Reconstruction reconstruct(const std::vector<double>& h, ParamSet& ps, const Dims& dims,
                           std::uint64_t seed, bool variational) {
  const Dims d = dims.resolved();
  if (h.size() != d.hidden) throw DataError("reconstruct: bad feature width");
  Tape t;
  const VarId hv = t.input(Tensor::row(h));
  VarId z;
  Reconstruction out;
  if (variational) {
    const VarId mu = t.affine(hv, t.param(ps.at("var.mu_w")), t.param(ps.at("var.mu_b")));
    const VarId lv = t.affine(hv, t.param(ps.at("var.lv_w")), t.param(ps.at("var.lv_b")));
    const auto eps = diffcore::draw_standard_normal(d.latent, seed);
    z = t.reparameterize(mu, lv, eps);
    out.mu = t.val(mu).v;
    out.sigma.resize(d.latent);
    for (std::size_t i = 0; i < d.latent; ++i) {
      out.sigma[i] = std::exp(0.5 * t.val(lv).v[i]);
    }
  } else {
    z = t.affine(hv, t.param(ps.at("proj.w")), t.param(ps.at("proj.b")));
  }
  Reconstruction dec = decode_common(t, ps, d, z);
  dec.mu = std::move(out.mu);
  dec.sigma = std::move(out.sigma);
  return dec;
}

Reconstruction decode_latent(const std::vector<double>& z, ParamSet& ps, const Dims& dims) {
  const Dims d = dims.resolved();
  if (z.size() != d.latent) {
    throw DataError("decode_latent: expected Z = " + std::to_string(d.latent) +
                    ", got " + std::to_string(z.size()));
  }
  Tape t;
  return decode_common(t, ps, d, t.input(Tensor::row(z)));
}

std::vector<std::vector<double>> predict_backs(const std::vector<double>& h,
                                               ParamSet& ps, const Dims& d, int w_steps) {
  Tape t;
  const auto ids = predict_forward(t, ps, t.input(Tensor::row(h)), w_steps);
  std::vector<std::vector<double>> out;
  out.reserve(ids.size());
  for (const VarId id : ids) out.push_back(t.val(id).v);
  return out;
}

std::tuple<double, double, double> loss_reconstruction(const PointCloud& recon,
                                                       const PointCloud& target,
                                                       std::span<const double> mu,
                                                       std::span<const double> sigma,
                                                       double alpha) {
  const double c_d = transport::emd_exact(recon, target).cost;
  const double kl = mu.empty() ? 0.0 : diffcore::kl_diag_gaussian(mu, sigma);
  return {c_d, kl, c_d + alpha * kl};
}

double loss_prediction(const std::vector<std::vector<double>>& predicted,
                       const std::vector<std::vector<double>>& ground_truth) {
  if (predicted.size() != ground_truth.size() || predicted.empty()) {
    throw DataError("loss_prediction: sequence length mismatch");
  }
  double acc = 0.0;
  for (std::size_t w = 0; w < predicted.size(); ++w) {
    if (predicted[w].size() != ground_truth[w].size()) {
      throw DataError("loss_prediction: feature width mismatch");
    }
    for (std::size_t i = 0; i < predicted[w].size(); ++i) {
      const double dlt = predicted[w][i] - ground_truth[w][i];
      acc += dlt * dlt;
    }
  }
  return acc / static_cast<double>(predicted.size());
}

SampleFeatures compute_features(const TrainingSample& sample, ParamSet& ps,
                                const Dims& d) {
  SampleFeatures f;
  f.global_f = encode_global(sample.full, ps, d);
  for (const auto& front : sample.fronts) f.front_f.push_back(encode_local(front, ps, d));
  for (const auto& back : sample.backs) f.back_f.push_back(encode_local(back, ps, d));
  return f;
}

LossOutput run_loss(const TrainingSample& sample, ParamSet& ps, const Dims& dims,
                    const LossOptions& opts) {
  const Dims d = dims.resolved();
  const std::size_t w_count = sample.fronts.size();
  if (w_count == 0) throw DataError("run_loss: sample has no half pairs");
  const PointCloud& target = opts.recon_target != nullptr ? *opts.recon_target : sample.full;
  if (target.size() != d.cloud_points()) {
    throw DataError("run_loss: reconstruction target has wrong point count");
  }

  Tape t;
  VarId global_feat;
  std::vector<VarId> front_feats(w_count);
  std::vector<std::vector<double>> back_targets;
  if (opts.features != nullptr) {
    global_feat = t.input(Tensor::row(opts.features->global_f));
    for (std::size_t w = 0; w < w_count; ++w) {
      front_feats[w] = t.input(Tensor::row(opts.features->front_f[w]));
    }
    back_targets = opts.features->back_f;
  } else {
    global_feat = encoder_forward(t, ps, "enc_global.",
                                  t.input(points_tensor(sample.full)));
    for (std::size_t w = 0; w < w_count; ++w) {
      front_feats[w] = encoder_forward(t, ps, "enc_local.",
                                       t.input(points_tensor(sample.fronts[w])));
    }
    // prediction targets come from the local encoder without gradient
    for (const auto& back : sample.backs) {
      back_targets.push_back(encode_local(back, ps, d));
    }
  }

  const VarId h = aggregate_forward(t, ps, global_feat, front_feats);

  // branch R
  VarId z;
  VarId kl_node = -1;
  if (opts.hyper.variational) {
    const VarId mu = t.affine(h, t.param(ps.at("var.mu_w")), t.param(ps.at("var.mu_b")));
    const VarId lv = t.affine(h, t.param(ps.at("var.lv_w")), t.param(ps.at("var.lv_b")));
    z = t.reparameterize(mu, lv, diffcore::draw_standard_normal(d.latent, opts.noise_seed));
    kl_node = t.kl_diag_from_logvar(mu, lv);
  } else {
    z = t.affine(h, t.param(ps.at("proj.w")), t.param(ps.at("proj.b")));
  }
  const DecodeVars dec = decoder_forward(t, ps, d, z, /*training_bn=*/true,
                                         opts.bn_capture_mean, opts.bn_capture_var);
  if (!t.val(dec.cloud).all_finite()) {
    throw NumericError("non-finite reconstructed cloud in term c_d");
  }
  const VarId c_d = t.emd_to(dec.cloud, target);
  const VarId c_r = opts.hyper.variational
                        ? t.add(c_d, t.scale(kl_node, opts.hyper.alpha))
                        : c_d;

  // branch P
  const std::vector<VarId> preds = predict_forward(t, ps, h, static_cast<int>(w_count));
  VarId cp_sum = -1;
  for (std::size_t w = 0; w < w_count; ++w) {
    const VarId sq = t.sqnorm(t.sub(preds[w], t.input(Tensor::row(back_targets[w]))));
    cp_sum = w == 0 ? sq : t.add(cp_sum, sq);
  }
  const VarId c_p = t.scale(cp_sum, 1.0 / static_cast<double>(w_count));

  const VarId total = opts.hyper.branch_r
                          ? t.add(c_r, t.scale(c_p, opts.hyper.beta))
                          : t.scale(c_p, opts.hyper.beta);

  LossOutput out;
  out.loss.c_d = t.val(c_d).v[0];
  out.loss.kl = opts.hyper.variational ? t.val(kl_node).v[0] : 0.0;
  out.loss.c_r = t.val(c_r).v[0];
  out.loss.c_p = t.val(c_p).v[0];
  out.loss.total = t.val(total).v[0];
  out.structure_hash = t.structure_hash();
  out.tie = t.saw_exact_tie();

  if (!std::isfinite(out.loss.total)) {
    std::string term = "total";
    if (!std::isfinite(out.loss.c_d)) term = "c_d";
    else if (!std::isfinite(out.loss.kl)) term = "kl";
    else if (!std::isfinite(out.loss.c_p)) term = "c_p";
    throw NumericError("non-finite loss in term " + term);
  }

  if (opts.with_grad) {
    t.backward(total);
    t.flush_param_grads();
  }
  return out;
}

LossBreakdown loss_total(const TrainingSample& sample, ParamSet& ps, const Dims& d,
                         const Hyper& hyper, std::uint64_t seed) {
  LossOptions opts;
  opts.hyper = hyper;
  opts.noise_seed = seed;
  opts.with_grad = false;
  return run_loss(sample, ps, d, opts).loss;
}

void merge_bn_captures(ParamSet& ps, const Dims& dims,
                       const std::vector<const Tensor*>& means,
                       const std::vector<const Tensor*>& vars) {
  if (means.empty()) return;
  const Dims d = dims.resolved();
  Tensor& rmean = ps.at("dec.bn1_rmean").value;
  Tensor& rvar = ps.at("dec.bn1_rvar").value;
  const double momentum = 0.1;
  for (std::size_t j = 0; j < d.dec_pp; ++j) {
    double m = 0.0, v = 0.0;
    for (std::size_t s = 0; s < means.size(); ++s) {
      m += means[s]->v[j];
      v += vars[s]->v[j];
    }
    m /= static_cast<double>(means.size());
    v /= static_cast<double>(vars.size());
    rmean.v[j] = (1.0 - momentum) * rmean.v[j] + momentum * m;
    rvar.v[j] = (1.0 - momentum) * rvar.v[j] + momentum * v;
  }
}

}  // namespace mapvae::model
