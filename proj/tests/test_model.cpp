// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mapvae/errors.hpp"
#include "mapvae/model.hpp"
#include "mapvae/rng.hpp"
#include "mapvae/transport.hpp"

using namespace mapvae;
using namespace mapvae::model;

namespace {

// The micro configuration used across the gradient-check suite:
// 2N=16, W=2, D_f=8, D_h=8, Z=4.
Dims micro_dims() {
  Dims d;
  d.n_half = 8;
  d.v_angles = 4;
  d.w_steps = 2;
  d.feat = 8;
  d.hidden = 8;
  d.latent = 4;
  d.enc_h1 = 8;
  d.enc_h2 = 8;
  return d.resolved();
}

ParamSet micro_params(std::uint64_t seed) {
  ParamSet ps;
  const Dims d = micro_dims();
  init_encoder_params(ps, "enc_global.", d, seed);
  init_encoder_params(ps, "enc_local.", d, seed + 1);
  init_model_params(ps, d, seed + 2);
  return ps;
}

geometry::PointCloud random_cloud(std::size_t n, rng::Engine& eng) {
  geometry::PointCloud c;
  for (std::size_t i = 0; i < n; ++i) {
    c.points.push_back({rng::uniform(eng, -1, 1), rng::uniform(eng, -1, 1),
                        rng::uniform(eng, -1, 1)});
  }
  return c;
}

geometry::TrainingSample micro_sample(std::uint64_t seed) {
  rng::Engine eng(seed);
  const Dims d = micro_dims();
  geometry::TrainingSample s;
  s.full = random_cloud(d.cloud_points(), eng);
  s.start_angle = 1;
  for (int w = 0; w < d.w_steps; ++w) {
    s.fronts.push_back(random_cloud(d.n_half, eng));
    s.backs.push_back(random_cloud(d.n_half, eng));
    s.angles.push_back(w + 1);
  }
  return s;
}

}  // namespace

TEST_CASE("paper-scale dims resolve to the published decoder widths") {
  Dims d;
  d.n_half = 1024;
  const Dims r = d.resolved();
  CHECK(r.dec_t1 == 1024);
  CHECK(r.dec_t2 == 2048);
  CHECK(3 * r.cloud_points() == 6144);
  CHECK(r.dec_pp == 256);
}

TEST_CASE("encoders are permutation invariant") {
  rng::Engine eng(7);
  const Dims d = micro_dims();
  ParamSet ps = micro_params(11);
  geometry::PointCloud cloud = random_cloud(d.cloud_points(), eng);
  const auto f1 = encode_global(cloud, ps, d);

  geometry::PointCloud perm = cloud;
  rng::shuffle(perm.points, eng);
  const auto f2 = encode_global(perm, ps, d);
  REQUIRE(f1.size() == d.feat);
  for (std::size_t i = 0; i < f1.size(); ++i) {
    CHECK(std::abs(f1[i] - f2[i]) <= 1e-9);
  }

  CHECK_THROWS_AS(encode_global(random_cloud(7, eng), ps, d), DataError);
}

TEST_CASE("zero-weight head gives a zero feature") {
  rng::Engine eng(8);
  const Dims d = micro_dims();
  ParamSet ps = micro_params(12);
  auto& wh = ps.at("enc_global.wh").value;
  std::fill(wh.v.begin(), wh.v.end(), 0.0);
  std::fill(ps.at("enc_global.bh").value.v.begin(), ps.at("enc_global.bh").value.v.end(), 0.0);
  const auto f = encode_global(random_cloud(d.cloud_points(), eng), ps, d);
  for (double x : f) CHECK(x == 0.0);
}

TEST_CASE("aggregate: zero GRU params give a zero angle feature") {
  const Dims d = micro_dims();
  ParamSet ps = micro_params(13);
  for (auto& b : ps.blocks) {
    if (b.name.rfind("agg.", 0) == 0) std::fill(b.value.v.begin(), b.value.v.end(), 0.0);
  }
  rng::Engine eng(9);
  std::vector<double> f(d.feat);
  for (double& x : f) x = rng::uniform(eng, -1, 1);
  // W=1 sequence: h starts at zero, every gate update contracts zero to zero
  const auto h = aggregate(f, {f}, ps, Dims{.n_half = 8, .w_steps = 1, .feat = 8, .hidden = 8});
  for (double x : h) CHECK(x == 0.0);
}

TEST_CASE("aggregate is order sensitive and deterministic") {
  const Dims d = micro_dims();
  ParamSet ps = micro_params(14);
  rng::Engine eng(10);
  std::vector<std::vector<double>> feats;
  for (int w = 0; w < d.w_steps; ++w) {
    std::vector<double> f(d.feat);
    for (double& x : f) x = rng::uniform(eng, -1, 1);
    feats.push_back(f);
  }
  std::vector<double> g(d.feat);
  for (double& x : g) x = rng::uniform(eng, -1, 1);

  const auto h1 = aggregate(g, feats, ps, d);
  const auto h2 = aggregate(g, feats, ps, d);
  CHECK(h1 == h2);

  std::vector<std::vector<double>> rev(feats.rbegin(), feats.rend());
  const auto hr = aggregate(g, rev, ps, d);
  double diff = 0.0;
  for (std::size_t i = 0; i < h1.size(); ++i) diff += std::abs(h1[i] - hr[i]);
  CHECK(diff > 1e-9);
}

TEST_CASE("reconstruct shape, determinism and the eps=0 identity") {
  const Dims d = micro_dims();
  ParamSet ps = micro_params(15);
  rng::Engine eng(11);
  std::vector<double> h(d.hidden);
  for (double& x : h) x = rng::uniform(eng, -1, 1);

  const Reconstruction det1 = reconstruct(h, ps, d, 5, false);
  const Reconstruction det2 = reconstruct(h, ps, d, 99, false);
  REQUIRE(det1.cloud.size() == d.cloud_points());
  CHECK(det1.cloud.points == det2.cloud.points);  // seed ignored without sampling
  CHECK(det1.mu.empty());
  REQUIRE(det1.point_features.size() == d.cloud_points());
  CHECK(det1.point_features[0].size() == d.dec_pp);

  // variational with eps forced to zero equals decoding mu
  const Reconstruction var = reconstruct(h, ps, d, 5, true);
  REQUIRE(var.mu.size() == d.latent);
  for (double s : var.sigma) CHECK(s > 0.0);
  const Reconstruction from_mu = decode_latent(var.mu, ps, d);
  // reproduce z = mu + eps*sigma with the same seed to confirm the hook
  const auto eps = diffcore::draw_standard_normal(d.latent, 5);
  std::vector<double> z(d.latent);
  for (std::size_t i = 0; i < d.latent; ++i) z[i] = var.mu[i] + eps[i] * var.sigma[i];
  const Reconstruction from_z = decode_latent(z, ps, d);
  for (std::size_t i = 0; i < var.cloud.size(); ++i) {
    CHECK(geometry::dist(var.cloud.points[i], from_z.cloud.points[i]) <= 1e-9);
  }
  // and eps=0 would collapse to mu: decode_latent(mu) is that limit
  CHECK(from_mu.cloud.size() == d.cloud_points());
}

TEST_CASE("predict_backs: zero params give zero outputs, count is always W") {
  const Dims d = micro_dims();
  ParamSet ps = micro_params(16);
  for (auto& b : ps.blocks) {
    if (b.name.rfind("pred.", 0) == 0) std::fill(b.value.v.begin(), b.value.v.end(), 0.0);
  }
  rng::Engine eng(12);
  std::vector<double> h(d.hidden);
  for (double& x : h) x = rng::uniform(eng, -1, 1);
  const auto preds = predict_backs(h, ps, d, 5);
  REQUIRE(preds.size() == 5);
  for (const auto& p : preds) {
    REQUIRE(p.size() == d.feat);
    for (double x : p) CHECK(x == 0.0);
  }
}

TEST_CASE("loss_reconstruction identities") {
  rng::Engine eng(13);
  const geometry::PointCloud target = random_cloud(16, eng);
  const std::vector<double> mu0(4, 0.0), sig1(4, 1.0);
  auto [cd0, kl0, cr0] = loss_reconstruction(target, target, mu0, sig1, 0.01);
  CHECK(cd0 == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(kl0 == doctest::Approx(0.0));
  CHECK(cr0 == doctest::Approx(0.0));

  const geometry::PointCloud recon = random_cloud(16, eng);
  const std::vector<double> mu{0.5, -0.5, 0.1, 0.2}, sig{1.2, 0.8, 1.0, 0.9};
  auto [cd, kl, cr] = loss_reconstruction(recon, target, mu, sig, 0.0);
  CHECK(cr == cd);  // alpha = 0 removes the KL term
  auto [cd2, kl2, cr2] = loss_reconstruction(recon, target, mu, sig, 0.01);
  CHECK(cr2 == doctest::Approx(cd2 + 0.01 * kl2).epsilon(1e-12));
  CHECK(kl2 > 0.0);
}

TEST_CASE("loss_prediction hand cases") {
  std::vector<std::vector<double>> gt{{0, 0, 0, 0, 0, 0, 0, 0}};
  std::vector<std::vector<double>> pred{{3, 4, 0, 0, 0, 0, 0, 0}};
  CHECK(loss_prediction(pred, gt) == doctest::Approx(25.0));
  CHECK(loss_prediction(gt, gt) == doctest::Approx(0.0));

  std::vector<std::vector<double>> pred2{{6, 8, 0, 0, 0, 0, 0, 0}};
  CHECK(loss_prediction(pred2, gt) == doctest::Approx(100.0));  // quadratic scaling

  CHECK_THROWS_AS(loss_prediction(pred, {}), DataError);
}

TEST_CASE("loss breakdown identities and ablation modes") {
  const Dims d = micro_dims();
  ParamSet ps = micro_params(17);
  set_encoders_frozen(ps, true);
  const auto sample = micro_sample(21);

  Hyper full;
  full.alpha = 0.01;
  full.beta = 1000.0;
  const LossBreakdown lb = loss_total(sample, ps, d, full, 7);
  CHECK(lb.c_r == doctest::Approx(lb.c_d + full.alpha * lb.kl).epsilon(1e-12));
  CHECK(lb.total == doctest::Approx(lb.c_r + full.beta * lb.c_p).epsilon(1e-12));
  CHECK(lb.c_d >= 0.0);
  CHECK(lb.kl >= 0.0);
  CHECK(lb.c_p >= 0.0);
  CHECK(lb.total >= 0.0);

  Hyper no_p = full;
  no_p.beta = 0.0;
  const LossBreakdown lbp = loss_total(sample, ps, d, no_p, 7);
  CHECK(lbp.total == doctest::Approx(lbp.c_r).epsilon(1e-12));

  Hyper no_r = full;
  no_r.branch_r = false;
  const LossBreakdown lbr = loss_total(sample, ps, d, no_r, 7);
  CHECK(lbr.total == doctest::Approx(full.beta * lbr.c_p).epsilon(1e-12));

  Hyper no_kl = full;
  no_kl.alpha = 0.0;
  no_kl.variational = false;
  const LossBreakdown lbk = loss_total(sample, ps, d, no_kl, 7);
  CHECK(lbk.kl == 0.0);
  CHECK(lbk.c_r == doctest::Approx(lbk.c_d).epsilon(1e-12));
}

TEST_CASE("frozen encoders receive zero gradient through the full loss") {
  const Dims d = micro_dims();
  ParamSet ps = micro_params(18);
  set_encoders_frozen(ps, true);
  const auto sample = micro_sample(22);

  LossOptions opts;
  opts.hyper = Hyper{};
  opts.noise_seed = 3;
  opts.with_grad = true;
  ps.zero_grads();
  run_loss(sample, ps, d, opts);

  for (const auto& b : ps.blocks) {
    if (b.name.rfind("enc_", 0) == 0) {
      for (double g : b.grad.v) CHECK(g == 0.0);
    }
  }
  // something else trained
  double total = 0.0;
  for (double g : ps.at("dec.fc1_w").grad.v) total += std::abs(g);
  CHECK(total > 0.0);
}

TEST_CASE("beta=0 stops gradient flow into the prediction head") {
  const Dims d = micro_dims();
  ParamSet ps = micro_params(19);
  set_encoders_frozen(ps, true);
  const auto sample = micro_sample(23);

  LossOptions opts;
  opts.hyper.beta = 0.0;
  opts.with_grad = true;
  opts.noise_seed = 5;
  ps.zero_grads();
  run_loss(sample, ps, d, opts);
  for (double g : ps.at("pred.out_w").grad.v) CHECK(g == 0.0);
  for (double g : ps.at("pred.start").grad.v) CHECK(g == 0.0);
}

TEST_CASE("composed loss_total passes the gradient check on the micro model") {
  const Dims d = micro_dims();
  ParamSet ps = micro_params(20);
  set_encoders_frozen(ps, true);
  const auto sample = micro_sample(24);
  const auto features = compute_features(sample, ps, d);

  Hyper hyper;
  hyper.alpha = 0.01;
  hyper.beta = 10.0;  // keep both branches visible at the micro scale

  auto eval = [&](bool with_grad) -> diffcore::EvalResult {
    LossOptions opts;
    opts.hyper = hyper;
    opts.noise_seed = 40;
    opts.with_grad = with_grad;
    opts.features = &features;
    const LossOutput out = run_loss(sample, ps, d, opts);
    return {out.loss.total, out.structure_hash, out.tie};
  };
  const auto report = grad_check(eval, ps, 1e-5);
  CHECK(report.total_checked > 500);
  for (const auto& e : report.entries) {
    INFO(e.block, " rel err ", e.max_rel_err, " checked ", e.checked, " excluded ",
         e.excluded);
    CHECK(e.max_rel_err <= 1e-3);
  }
}

TEST_CASE("reconstruction stays finite for random inputs") {
  const Dims d = micro_dims();
  ParamSet ps = micro_params(25);
  rng::Engine eng(31);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> h(d.hidden);
    for (double& x : h) x = rng::uniform(eng, -3, 3);
    const Reconstruction r = reconstruct(h, ps, d, static_cast<std::uint64_t>(trial), true);
    for (const auto& p : r.cloud.points) {
      CHECK(std::isfinite(p[0]));
      CHECK(std::isfinite(p[1]));
      CHECK(std::isfinite(p[2]));
    }
  }
}
