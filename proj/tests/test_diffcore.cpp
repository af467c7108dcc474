// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mapvae/diffcore.hpp"
#include "mapvae/errors.hpp"
#include "mapvae/rng.hpp"

using namespace mapvae;
using namespace mapvae::diffcore;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, rng::Engine& eng, double scale = 1.0) {
  Tensor t(r, c);
  for (double& x : t.v) x = scale * rng::uniform(eng, -1.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("affine forward identities") {
  ParamSet ps;
  Tensor eye(3, 3);
  for (int i = 0; i < 3; ++i) eye.at(static_cast<std::size_t>(i), static_cast<std::size_t>(i)) = 1.0;
  ps.add("w", eye);
  ps.add("b", Tensor(1, 3));

  rng::Engine eng(1);
  const Tensor x = random_tensor(4, 3, eng);
  Tape t;
  const VarId xv = t.input(x);
  const VarId y = t.affine(xv, t.param(ps.at("w")), t.param(ps.at("b")));
  CHECK(t.val(y).v == x.v);  // identity W, zero b

  ParamSet ps2;
  ps2.add("w", Tensor(3, 2));
  Tensor b(1, 2);
  b.v = {0.5, -1.5};
  ps2.add("b", b);
  Tape t2;
  const VarId y2 = t2.affine(t2.input(x), t2.param(ps2.at("w")), t2.param(ps2.at("b")));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(t2.val(y2).at(i, 0) == 0.5);  // zero W -> bias broadcast
    CHECK(t2.val(y2).at(i, 1) == -1.5);
  }

  Tape t3;
  CHECK_THROWS_AS(t3.matmul(t3.input(random_tensor(2, 3, eng)),
                            t3.input(random_tensor(2, 3, eng))),
                  DataError);
}

TEST_CASE("affine gradient matches finite differences") {
  rng::Engine eng(2);
  ParamSet ps;
  ps.add("w", random_tensor(4, 3, eng));
  ps.add("b", random_tensor(1, 3, eng));
  const Tensor x = random_tensor(5, 4, eng);
  const Tensor tgt = random_tensor(5, 3, eng);

  auto eval = [&](bool with_grad) {
    Tape t;
    const VarId y = t.affine(t.input(x), t.param(ps.at("w")), t.param(ps.at("b")));
    const VarId loss = t.sqnorm(t.sub(y, t.input(tgt)));
    EvalResult r{t.val(loss).v[0], t.structure_hash(), t.saw_exact_tie()};
    if (with_grad) {
      t.backward(loss);
      t.flush_param_grads();
    }
    return r;
  };
  const auto report = grad_check(eval, ps, 1e-5);
  CHECK(report.pass(1e-6));
}

TEST_CASE("set_max_pool hand cases") {
  Tape t;
  Tensor x(2, 2);
  x.v = {1, 0, 0, 2};
  const VarId y = t.set_max_pool(t.input(x));
  CHECK(t.val(y).v == std::vector<double>{1, 2});

  Tape t1;
  Tensor one(1, 3);
  one.v = {3, -1, 4};
  CHECK(t1.val(t1.set_max_pool(t1.input(one))).v == one.v);  // n=1 identity

  // permutation invariance
  Tape t2;
  Tensor xp(2, 2);
  xp.v = {0, 2, 1, 0};
  CHECK(t2.val(t2.set_max_pool(t2.input(xp))).v == std::vector<double>{1, 2});
}

TEST_CASE("set_max_pool routes gradient to the argmax and flags ties") {
  Tape t;
  Tensor x(3, 2);
  x.v = {1, 5, 4, 5, 4, 2};  // col 0 max at row 1; col 1 tie rows 0 and 1
  const VarId xv = t.input(x, true);
  const VarId y = t.set_max_pool(xv);
  const VarId loss = t.sum_all(y);
  t.backward(loss);
  CHECK(t.saw_exact_tie());
  const Tensor& g = t.grad_of(xv);
  CHECK(g.at(1, 0) == 1.0);
  CHECK(g.at(0, 1) == 1.0);  // tie goes to the lowest row index
  CHECK(g.at(1, 1) == 0.0);
}

TEST_CASE("gru_step with all-zero parameters halves the hidden state") {
  rng::Engine eng(3);
  ParamSet ps;
  const std::size_t di = 3, dh = 4;
  for (const char* n : {"wz", "wr", "wc"}) ps.add(n, Tensor(di, dh));
  for (const char* n : {"uz", "ur", "uc"}) ps.add(n, Tensor(dh, dh));
  for (const char* n : {"bz", "br", "bc"}) ps.add(n, Tensor(1, dh));

  Tape t;
  GruVars gv{t.param(ps.at("wz")), t.param(ps.at("uz")), t.param(ps.at("bz")),
             t.param(ps.at("wr")), t.param(ps.at("ur")), t.param(ps.at("br")),
             t.param(ps.at("wc")), t.param(ps.at("uc")), t.param(ps.at("bc"))};
  const Tensor h0 = random_tensor(1, dh, eng);
  const VarId h1 = gru_step(t, t.input(random_tensor(1, di, eng)), t.input(h0), gv);
  for (std::size_t j = 0; j < dh; ++j) {
    CHECK(t.val(h1).at(0, j) == doctest::Approx(0.5 * h0.at(0, j)).epsilon(1e-12));
  }

  // zero hidden, zero input, zero params -> zero output
  Tape t2;
  GruVars gv2{t2.param(ps.at("wz")), t2.param(ps.at("uz")), t2.param(ps.at("bz")),
              t2.param(ps.at("wr")), t2.param(ps.at("ur")), t2.param(ps.at("br")),
              t2.param(ps.at("wc")), t2.param(ps.at("uc")), t2.param(ps.at("bc"))};
  const VarId h2 = gru_step(t2, t2.input(Tensor(1, di)), t2.input(Tensor(1, dh)), gv2);
  for (double v : t2.val(h2).v) CHECK(v == 0.0);
}

TEST_CASE("gru_step parameter gradients match finite differences") {
  rng::Engine eng(4);
  const std::size_t di = 3, dh = 4;
  ParamSet ps;
  for (const char* n : {"wz", "wr", "wc"}) ps.add(n, random_tensor(di, dh, eng, 0.7));
  for (const char* n : {"uz", "ur", "uc"}) ps.add(n, random_tensor(dh, dh, eng, 0.7));
  for (const char* n : {"bz", "br", "bc"}) ps.add(n, random_tensor(1, dh, eng, 0.3));
  const Tensor x0 = random_tensor(1, di, eng);
  const Tensor x1 = random_tensor(1, di, eng);
  const Tensor tgt = random_tensor(1, dh, eng);

  auto eval = [&](bool with_grad) {
    Tape t;
    GruVars gv{t.param(ps.at("wz")), t.param(ps.at("uz")), t.param(ps.at("bz")),
               t.param(ps.at("wr")), t.param(ps.at("ur")), t.param(ps.at("br")),
               t.param(ps.at("wc")), t.param(ps.at("uc")), t.param(ps.at("bc"))};
    VarId h = t.input(Tensor(1, dh));
    h = gru_step(t, t.input(x0), h, gv);
    h = gru_step(t, t.input(x1), h, gv);  // two steps exercise the recurrence
    const VarId loss = t.sqnorm(t.sub(h, t.input(tgt)));
    EvalResult r{t.val(loss).v[0], t.structure_hash(), t.saw_exact_tie()};
    if (with_grad) {
      t.backward(loss);
      t.flush_param_grads();
    }
    return r;
  };
  const auto report = grad_check(eval, ps, 1e-4);
  CHECK(report.pass(1e-4));
}

TEST_CASE("kl closed form values") {
  const std::vector<double> mu0(5, 0.0), sig1(5, 1.0);
  CHECK(kl_diag_gaussian(mu0, sig1) == doctest::Approx(0.0));

  const std::vector<double> mu1{1.0}, s1{1.0};
  CHECK(kl_diag_gaussian(mu1, s1) == doctest::Approx(0.5));

  CHECK_THROWS_AS(kl_diag_gaussian(mu1, std::vector<double>{-1.0}), DataError);
}

TEST_CASE("kl vs monte-carlo oracle within 1 percent") {
  rng::Engine eng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t z = 1 + rng::below(eng, 4);
    std::vector<double> mu(z), sigma(z);
    for (std::size_t i = 0; i < z; ++i) {
      mu[i] = rng::uniform(eng, -1.5, 1.5);
      sigma[i] = rng::uniform(eng, 0.5, 2.0);
    }
    const double closed = kl_diag_gaussian(mu, sigma);
    CHECK(closed >= 0.0);

    // MC estimate of E_q[log q(x) - log p(x)]
    rng::Engine mc(rng::stream_seed(99, static_cast<std::uint64_t>(trial)));
    const std::size_t samples = 1000000;
    double acc = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
      for (std::size_t i = 0; i < z; ++i) {
        const double x = mu[i] + sigma[i] * rng::normal(mc);
        const double lq = -0.5 * ((x - mu[i]) / sigma[i]) * ((x - mu[i]) / sigma[i]) -
                          std::log(sigma[i]);
        const double lp = -0.5 * x * x;
        acc += lq - lp;
      }
    }
    const double mc_est = acc / static_cast<double>(samples);
    CHECK(std::abs(mc_est - closed) <= 0.01 * std::max(1.0, closed));
  }
}

TEST_CASE("kl tape node matches finite differences") {
  rng::Engine eng(6);
  ParamSet ps;
  ps.add("mu", random_tensor(1, 6, eng));
  ps.add("lv", random_tensor(1, 6, eng, 0.5));
  auto eval = [&](bool with_grad) {
    Tape t;
    const VarId kl = t.kl_diag_from_logvar(t.param(ps.at("mu")), t.param(ps.at("lv")));
    EvalResult r{t.val(kl).v[0], t.structure_hash(), t.saw_exact_tie()};
    if (with_grad) {
      t.backward(kl);
      t.flush_param_grads();
    }
    return r;
  };
  CHECK(grad_check(eval, ps, 1e-5).pass(1e-6));
}

TEST_CASE("reparameterization identities") {
  std::vector<double> mu{0.3, -0.7}, sigma{0.5, 2.0};
  // eps forced to zero -> z = mu
  LatentGaussian lg;
  lg.mu = mu;
  lg.sigma = sigma;
  lg.eps = {0.0, 0.0};
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(mu[i] + lg.eps[i] * sigma[i] == mu[i]);
  }

  // sigma -> 0+ collapses to mu
  const std::vector<double> tiny_sigma{1e-300, 1e-300};
  const LatentGaussian tiny = reparameterize_values(mu, tiny_sigma, 7);
  CHECK(tiny.z[0] == doctest::Approx(mu[0]));
  CHECK(tiny.z[1] == doctest::Approx(mu[1]));

  // mu=0 sigma=1 -> z = eps exactly
  const std::vector<double> zmu{0.0, 0.0}, osig{1.0, 1.0};
  const LatentGaussian unit = reparameterize_values(zmu, osig, 8);
  CHECK(unit.z == unit.eps);

  // z = mu + eps*sigma holds to 1e-12
  const LatentGaussian gen = reparameterize_values(mu, sigma, 9);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(std::abs(gen.z[i] - (mu[i] + gen.eps[i] * sigma[i])) <= 1e-12);
  }
}

TEST_CASE("reparameterization sample moments over many seeds") {
  const std::size_t z = 4, n = 100000;
  std::vector<double> sum(z, 0.0), sumsq(z, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    const auto eps = draw_standard_normal(z, rng::stream_seed(123, s));
    for (std::size_t i = 0; i < z; ++i) {
      sum[i] += eps[i];
      sumsq[i] += eps[i] * eps[i];
    }
  }
  for (std::size_t i = 0; i < z; ++i) {
    const double mean = sum[i] / static_cast<double>(n);
    const double var = sumsq[i] / static_cast<double>(n) - mean * mean;
    CHECK(std::abs(mean) <= 0.02);
    CHECK(std::abs(var - 1.0) <= 0.02);
  }
}

TEST_CASE("reparameterize tape gradients match finite differences") {
  rng::Engine eng(10);
  ParamSet ps;
  ps.add("mu", random_tensor(1, 5, eng));
  ps.add("lv", random_tensor(1, 5, eng, 0.4));
  const auto eps = draw_standard_normal(5, 77);
  const Tensor tgt = random_tensor(1, 5, eng);
  auto eval = [&](bool with_grad) {
    Tape t;
    const VarId zv = t.reparameterize(t.param(ps.at("mu")), t.param(ps.at("lv")), eps);
    const VarId loss = t.sqnorm(t.sub(zv, t.input(tgt)));
    EvalResult r{t.val(loss).v[0], t.structure_hash(), t.saw_exact_tie()};
    if (with_grad) {
      t.backward(loss);
      t.flush_param_grads();
    }
    return r;
  };
  CHECK(grad_check(eval, ps, 1e-5).pass(1e-6));
}

TEST_CASE("batch_norm normalizes per channel in training mode") {
  rng::Engine eng(11);
  ParamSet ps;
  const std::size_t n = 64, c = 5;
  Tensor gamma(1, c, 1.0), beta(1, c, 0.0);
  ps.add("gamma", gamma);
  ps.add("beta", beta);
  ps.add("rmean", Tensor(1, c), false);
  ps.add("rvar", Tensor(1, c, 1.0), false);
  BatchNormState st{&ps.at("rmean").value, &ps.at("rvar").value, 0.1, 1e-10};

  const Tensor x = random_tensor(n, c, eng, 2.0);
  Tape t;
  const VarId y = t.batch_norm(t.input(x), t.param(ps.at("gamma")),
                               t.param(ps.at("beta")), st, true);
  for (std::size_t j = 0; j < c; ++j) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += t.val(y).at(i, j);
    m /= n;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = t.val(y).at(i, j) - m;
      v += d * d;
    }
    v /= n;
    CHECK(std::abs(m) <= 1e-6);
    CHECK(std::abs(v - 1.0) <= 1e-6);
  }

  // zero-variance channel stays finite
  Tensor xz(4, 1, 3.14);
  Tape t2;
  ParamSet ps2;
  ps2.add("g", Tensor(1, 1, 1.0));
  ps2.add("b", Tensor(1, 1, 0.0));
  ps2.add("rm", Tensor(1, 1), false);
  ps2.add("rv", Tensor(1, 1, 1.0), false);
  BatchNormState st2{&ps2.at("rm").value, &ps2.at("rv").value, 0.1, 1e-10};
  const VarId yz = t2.batch_norm(t2.input(xz), t2.param(ps2.at("g")),
                                 t2.param(ps2.at("b")), st2, true);
  for (double v : t2.val(yz).v) CHECK(std::isfinite(v));

  // batch of one in training mode is rejected
  Tape t3;
  CHECK_THROWS_AS(t3.batch_norm(t3.input(Tensor(1, 1, 1.0)), t3.param(ps2.at("g")),
                                t3.param(ps2.at("b")), st2, true),
                  UsageError);
}

TEST_CASE("batch_norm on an already standardized batch is near identity") {
  rng::Engine eng(12);
  const std::size_t n = 512, c = 3;
  Tensor x = random_tensor(n, c, eng);
  // standardize exactly
  for (std::size_t j = 0; j < c; ++j) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += x.at(i, j);
    m /= n;
    for (std::size_t i = 0; i < n; ++i) v += (x.at(i, j) - m) * (x.at(i, j) - m);
    v /= n;
    for (std::size_t i = 0; i < n; ++i) x.at(i, j) = (x.at(i, j) - m) / std::sqrt(v);
  }
  ParamSet ps;
  ps.add("g", Tensor(1, c, 1.0));
  ps.add("b", Tensor(1, c, 0.0));
  ps.add("rm", Tensor(1, c), false);
  ps.add("rv", Tensor(1, c, 1.0), false);
  BatchNormState st{&ps.at("rm").value, &ps.at("rv").value, 0.1, 1e-10};
  Tape t;
  const VarId y = t.batch_norm(t.input(x), t.param(ps.at("g")), t.param(ps.at("b")), st, true);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(std::abs(t.val(y).v[i] - x.v[i]) <= 1e-6);
  }
}

TEST_CASE("batch_norm gradients match finite differences") {
  rng::Engine eng(13);
  ParamSet ps;
  const std::size_t n = 6, c = 3;
  ps.add("x", random_tensor(n, c, eng));
  ps.add("gamma", random_tensor(1, c, eng, 0.8));
  ps.add("beta", random_tensor(1, c, eng, 0.3));
  ps.add("rm", Tensor(1, c), false);
  ps.add("rv", Tensor(1, c, 1.0), false);
  const Tensor tgt = random_tensor(n, c, eng);

  for (bool training : {true, false}) {
    auto eval = [&, training](bool with_grad) {
      // keep running stats fixed so repeated evaluations are pure
      ParamSet scratch;
      scratch.add("rm", ps.at("rm").value, false);
      scratch.add("rv", ps.at("rv").value, false);
      BatchNormState st{&scratch.at("rm").value, &scratch.at("rv").value, 0.1, 1e-10};
      Tape t;
      const VarId y = t.batch_norm(t.param(ps.at("x")), t.param(ps.at("gamma")),
                                   t.param(ps.at("beta")), st, training);
      const VarId loss = t.sqnorm(t.sub(y, t.input(tgt)));
      EvalResult r{t.val(loss).v[0], t.structure_hash(), t.saw_exact_tie()};
      if (with_grad) {
        t.backward(loss);
        t.flush_param_grads();
      }
      return r;
    };
    const auto report = grad_check(eval, ps, 1e-5);
    CHECK(report.pass(1e-5));
  }
}

TEST_CASE("adam basics") {
  ParamSet ps;
  ps.add("x", Tensor(1, 1, 1.0));
  const AdamConfig cfg{0.1, 0.9, 0.999, 1e-8};

  // zero gradient leaves the parameter unchanged (bookkeeping still ticks)
  ps.zero_grads();
  adam_step(ps, cfg);
  CHECK(ps.at("x").value.v[0] == 1.0);
  CHECK(ps.adam_t == 1);

  // descent direction on f(x) = x^2
  ps.at("x").grad.v[0] = 2.0 * ps.at("x").value.v[0];
  adam_step(ps, cfg);
  CHECK(ps.at("x").value.v[0] < 1.0);

  // determinism: identical runs give bit-identical parameters
  auto run = [&]() {
    ParamSet q;
    q.add("x", Tensor(1, 1, 1.0));
    for (int i = 0; i < 25; ++i) {
      q.zero_grads();
      q.at("x").grad.v[0] = 2.0 * q.at("x").value.v[0];
      adam_step(q, cfg);
    }
    return q.at("x").value.v[0];
  };
  CHECK(run() == run());
}

TEST_CASE("grad_check on a smooth quadratic is tight") {
  rng::Engine eng(14);
  ParamSet ps;
  ps.add("x", random_tensor(1, 8, eng));
  const Tensor a = random_tensor(8, 8, eng);
  auto eval = [&](bool with_grad) {
    Tape t;
    const VarId xv = t.param(ps.at("x"));
    const VarId y = t.matmul(xv, t.input(a));
    const VarId loss = t.sqnorm(y);
    EvalResult r{t.val(loss).v[0], t.structure_hash(), t.saw_exact_tie()};
    if (with_grad) {
      t.backward(loss);
      t.flush_param_grads();
    }
    return r;
  };
  const auto report = grad_check(eval, ps, 1e-4);
  CHECK(report.pass(1e-8));
}

TEST_CASE("emd tape node gradient at stable matchings") {
  rng::Engine eng(15);
  geometry::PointCloud target;
  for (int i = 0; i < 12; ++i) {
    target.points.push_back({rng::uniform(eng, -1, 1), rng::uniform(eng, -1, 1),
                             rng::uniform(eng, -1, 1)});
  }
  ParamSet ps;
  ps.add("pts", random_tensor(12, 3, eng));
  auto eval = [&](bool with_grad) {
    Tape t;
    const VarId pts = t.param(ps.at("pts"));
    const VarId loss = t.emd_to(pts, target);
    EvalResult r{t.val(loss).v[0], t.structure_hash(), t.saw_exact_tie()};
    if (with_grad) {
      t.backward(loss);
      t.flush_param_grads();
    }
    return r;
  };
  const auto report = grad_check(eval, ps, 1e-5);
  CHECK(report.total_checked > 12);  // most probes are smooth
  CHECK(report.worst <= 1e-3);
}

TEST_CASE("chamfer tape node gradient at stable neighbor sets") {
  rng::Engine eng(16);
  geometry::PointCloud target;
  for (int i = 0; i < 10; ++i) {
    target.points.push_back({rng::uniform(eng, -1, 1), rng::uniform(eng, -1, 1),
                             rng::uniform(eng, -1, 1)});
  }
  ParamSet ps;
  ps.add("pts", random_tensor(10, 3, eng));
  auto eval = [&](bool with_grad) {
    Tape t;
    const VarId loss = t.chamfer_to(t.param(ps.at("pts")), target);
    EvalResult r{t.val(loss).v[0], t.structure_hash(), t.saw_exact_tie()};
    if (with_grad) {
      t.backward(loss);
      t.flush_param_grads();
    }
    return r;
  };
  const auto report = grad_check(eval, ps, 1e-5);
  CHECK(report.total_checked > 10);
  CHECK(report.worst <= 1e-3);
}

TEST_CASE("frozen parameters receive no gradient") {
  rng::Engine eng(17);
  ParamSet ps;
  ps.add("w", random_tensor(3, 3, eng));
  ParamBlock& frozen = ps.add("frozen_w", random_tensor(3, 3, eng));
  frozen.trainable = false;
  const Tensor x = random_tensor(2, 3, eng);

  Tape t;
  const VarId h = t.matmul(t.input(x), t.param(ps.at("frozen_w")));
  const VarId y = t.matmul(h, t.param(ps.at("w")));
  const VarId loss = t.sqnorm(y);
  t.backward(loss);
  t.flush_param_grads();
  for (double g : ps.at("frozen_w").grad.v) CHECK(g == 0.0);
  double total = 0.0;
  for (double g : ps.at("w").grad.v) total += std::abs(g);
  CHECK(total > 0.0);
}
