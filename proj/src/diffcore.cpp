// SPDX-License-Identifier: Apache-2.0

#include "mapvae/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "mapvae/errors.hpp"
#include "mapvae/kernels.hpp"
#include "mapvae/rng.hpp"
#include "mapvae/transport.hpp"

namespace mapvae::diffcore {

using geometry::operator-;

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw DataError(msg);
}

#ifndef NDEBUG
void debug_check_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite value after ") + what);
}
#define MAPVAE_CHECK_FINITE(t, what) debug_check_finite(t, what)
#else
#define MAPVAE_CHECK_FINITE(t, what) ((void)0)
#endif

}  // namespace

Tensor Tensor::row(std::vector<double> data) {
  Tensor t;
  t.rows = 1;
  t.cols = data.size();
  t.v = std::move(data);
  return t;
}

bool Tensor::all_finite() const {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

void ParamBlock::ensure_slots() {
  if (!grad.same_shape(value)) grad = Tensor(value.rows, value.cols);
  if (!adam_m.same_shape(value)) adam_m = Tensor(value.rows, value.cols);
  if (!adam_v.same_shape(value)) adam_v = Tensor(value.rows, value.cols);
}

ParamBlock& ParamSet::add(const std::string& name, Tensor value, bool trainable) {
  if (find(name) != nullptr) throw UsageError("duplicate parameter block '" + name + "'");
  ParamBlock b;
  b.name = name;
  b.value = std::move(value);
  b.trainable = trainable;
  b.ensure_slots();
  blocks.push_back(std::move(b));
  return blocks.back();
}

ParamBlock* ParamSet::find(const std::string& name) {
  for (auto& b : blocks) {
    if (b.name == name) return &b;
  }
  return nullptr;
}

const ParamBlock* ParamSet::find(const std::string& name) const {
  for (const auto& b : blocks) {
    if (b.name == name) return &b;
  }
  return nullptr;
}

ParamBlock& ParamSet::at(const std::string& name) {
  ParamBlock* b = find(name);
  if (b == nullptr) throw UsageError("unknown parameter block '" + name + "'");
  return *b;
}

const ParamBlock& ParamSet::at(const std::string& name) const {
  const ParamBlock* b = find(name);
  if (b == nullptr) throw UsageError("unknown parameter block '" + name + "'");
  return *b;
}

void ParamSet::zero_grads() {
  for (auto& b : blocks) std::fill(b.grad.v.begin(), b.grad.v.end(), 0.0);
}

std::size_t ParamSet::trainable_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks) {
    if (b.trainable) n += b.value.size();
  }
  return n;
}

void adam_step(ParamSet& params, const AdamConfig& cfg) {
  params.adam_t += 1;
  const double t = static_cast<double>(params.adam_t);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& b : params.blocks) {
    if (!b.trainable) continue;
    b.ensure_slots();
    for (std::size_t i = 0; i < b.value.size(); ++i) {
      const double g = b.grad.v[i];
      b.adam_m.v[i] = cfg.beta1 * b.adam_m.v[i] + (1.0 - cfg.beta1) * g;
      b.adam_v.v[i] = cfg.beta2 * b.adam_v.v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = b.adam_m.v[i] / bc1;
      const double vhat = b.adam_v.v[i] / bc2;
      b.value.v[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Tape

VarId Tape::push(Tensor value, bool track, std::function<void(Tape&)> back) {
  MAPVAE_CHECK_FINITE(value, "tape node");
  Node n;
  n.value = std::move(value);
  n.track = track;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<VarId>(nodes_.size() - 1);
}

void Tape::mix_structure(std::uint64_t h) {
  structure_hash_ = rng::combine(structure_hash_, h);
}

VarId Tape::input(Tensor value, bool track_grad) {
  return push(std::move(value), track_grad, nullptr);
}

VarId Tape::param(ParamBlock& block) {
  const VarId id = push(block.value, block.trainable, nullptr);
  if (block.trainable) bindings_.push_back({id, &block});
  return id;
}

VarId Tape::matmul(VarId a, VarId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(ta.cols == tb.rows, "matmul: inner dimensions disagree");
  Tensor out(ta.rows, tb.cols);
  kernels::ops().matmul(ta.data(), tb.data(), out.data(), ta.rows, ta.cols, tb.cols);
  const bool track = node(a).track || node(b).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, a, b](Tape& t) {
      const Tensor& g = t.node(id).grad;           // [m x n]
      const Tensor& ta2 = t.val(a);                // [m x k]
      const Tensor& tb2 = t.val(b);                // [k x n]
      if (t.node(a).track) {
        // dA += g * B^T
        kernels::ops().matmul_a_bt(g.data(), tb2.data(), t.node(a).grad.data(),
                                   ta2.rows, tb2.cols, ta2.cols);
      }
      if (t.node(b).track) {
        // dB += A^T * g
        kernels::ops().matmul_at_b(ta2.data(), g.data(), t.node(b).grad.data(),
                                   ta2.rows, ta2.cols, tb2.cols);
      }
    };
  }
  return id;
}

VarId Tape::add_rowvec(VarId x, VarId b) {
  const Tensor& tx = val(x);
  const Tensor& tb = val(b);
  require(tb.rows == 1 && tb.cols == tx.cols, "add_rowvec: bias shape mismatch");
  Tensor out = tx;
  for (std::size_t i = 0; i < tx.rows; ++i) {
    for (std::size_t j = 0; j < tx.cols; ++j) out.at(i, j) += tb.at(0, j);
  }
  const bool track = node(x).track || node(b).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, x, b](Tape& t) {
      const Tensor& g = t.node(id).grad;
      if (t.node(x).track) {
        Tensor& gx = t.node(x).grad;
        for (std::size_t i = 0; i < g.size(); ++i) gx.v[i] += g.v[i];
      }
      if (t.node(b).track) {
        Tensor& gb = t.node(b).grad;
        for (std::size_t i = 0; i < g.rows; ++i) {
          for (std::size_t j = 0; j < g.cols; ++j) gb.at(0, j) += g.at(i, j);
        }
      }
    };
  }
  return id;
}

VarId Tape::add(VarId a, VarId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(ta.same_shape(tb), "add: shape mismatch");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.size(); ++i) out.v[i] += tb.v[i];
  const bool track = node(a).track || node(b).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, a, b](Tape& t) {
      const Tensor& g = t.node(id).grad;
      if (t.node(a).track) {
        for (std::size_t i = 0; i < g.size(); ++i) t.node(a).grad.v[i] += g.v[i];
      }
      if (t.node(b).track) {
        for (std::size_t i = 0; i < g.size(); ++i) t.node(b).grad.v[i] += g.v[i];
      }
    };
  }
  return id;
}

VarId Tape::sub(VarId a, VarId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(ta.same_shape(tb), "sub: shape mismatch");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.size(); ++i) out.v[i] -= tb.v[i];
  const bool track = node(a).track || node(b).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, a, b](Tape& t) {
      const Tensor& g = t.node(id).grad;
      if (t.node(a).track) {
        for (std::size_t i = 0; i < g.size(); ++i) t.node(a).grad.v[i] += g.v[i];
      }
      if (t.node(b).track) {
        for (std::size_t i = 0; i < g.size(); ++i) t.node(b).grad.v[i] -= g.v[i];
      }
    };
  }
  return id;
}

VarId Tape::mul(VarId a, VarId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(ta.same_shape(tb), "mul: shape mismatch");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.size(); ++i) out.v[i] *= tb.v[i];
  const bool track = node(a).track || node(b).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, a, b](Tape& t) {
      const Tensor& g = t.node(id).grad;
      if (t.node(a).track) {
        const Tensor& vb = t.val(b);
        for (std::size_t i = 0; i < g.size(); ++i) t.node(a).grad.v[i] += g.v[i] * vb.v[i];
      }
      if (t.node(b).track) {
        const Tensor& va = t.val(a);
        for (std::size_t i = 0; i < g.size(); ++i) t.node(b).grad.v[i] += g.v[i] * va.v[i];
      }
    };
  }
  return id;
}

VarId Tape::scale(VarId a, double s) {
  Tensor out = val(a);
  for (double& x : out.v) x *= s;
  const bool track = node(a).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, a, s](Tape& t) {
      const Tensor& g = t.node(id).grad;
      for (std::size_t i = 0; i < g.size(); ++i) t.node(a).grad.v[i] += s * g.v[i];
    };
  }
  return id;
}

VarId Tape::relu(VarId a) {
  const Tensor& ta = val(a);
  Tensor out = ta;
  std::uint64_t pattern = 0xabcdef01u;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool pos = out.v[i] > 0.0;
    pattern = pattern * 2 + (pos ? 1 : 0);
    if ((i & 63) == 63) {
      mix_structure(pattern);
      pattern = 0xabcdef01u;
    }
    if (!pos) out.v[i] = 0.0;
  }
  mix_structure(pattern);
  const bool track = node(a).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, a](Tape& t) {
      const Tensor& g = t.node(id).grad;
      const Tensor& va = t.val(a);
      Tensor& ga = t.node(a).grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (va.v[i] > 0.0) ga.v[i] += g.v[i];
      }
    };
  }
  return id;
}

VarId Tape::sigmoid(VarId a) {
  Tensor out = val(a);
  for (double& x : out.v) x = 1.0 / (1.0 + std::exp(-x));
  const bool track = node(a).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, a](Tape& t) {
      const Tensor& g = t.node(id).grad;
      const Tensor& y = t.val(id);
      Tensor& ga = t.node(a).grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga.v[i] += g.v[i] * y.v[i] * (1.0 - y.v[i]);
      }
    };
  }
  return id;
}

VarId Tape::tanh_act(VarId a) {
  Tensor out = val(a);
  for (double& x : out.v) x = std::tanh(x);
  const bool track = node(a).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, a](Tape& t) {
      const Tensor& g = t.node(id).grad;
      const Tensor& y = t.val(id);
      Tensor& ga = t.node(a).grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga.v[i] += g.v[i] * (1.0 - y.v[i] * y.v[i]);
      }
    };
  }
  return id;
}

VarId Tape::one_minus(VarId a) {
  Tensor out = val(a);
  for (double& x : out.v) x = 1.0 - x;
  const bool track = node(a).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, a](Tape& t) {
      const Tensor& g = t.node(id).grad;
      for (std::size_t i = 0; i < g.size(); ++i) t.node(a).grad.v[i] -= g.v[i];
    };
  }
  return id;
}

VarId Tape::reshape(VarId a, std::size_t rows, std::size_t cols) {
  const Tensor& ta = val(a);
  require(ta.size() == rows * cols, "reshape: element count mismatch");
  Tensor out;
  out.rows = rows;
  out.cols = cols;
  out.v = ta.v;
  const bool track = node(a).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, a](Tape& t) {
      const Tensor& g = t.node(id).grad;
      Tensor& ga = t.node(a).grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i];
    };
  }
  return id;
}

VarId Tape::set_max_pool(VarId a) {
  const Tensor& ta = val(a);
  require(ta.rows >= 1, "set_max_pool: empty input");
  Tensor out(1, ta.cols);
  std::vector<std::size_t> arg(ta.cols);
  kernels::ops().colwise_max(ta.data(), ta.rows, ta.cols, out.data(), arg.data());
  // flag exact ties (a second row achieving the max) as nonsmooth
  for (std::size_t j = 0; j < ta.cols && !tie_; ++j) {
    for (std::size_t i = 0; i < ta.rows; ++i) {
      if (i != arg[j] && ta.at(i, j) == out.at(0, j)) {
        tie_ = true;
        break;
      }
    }
  }
  std::uint64_t h = 0x11d7;
  for (std::size_t j = 0; j < ta.cols; ++j) h = rng::combine(h, arg[j]);
  mix_structure(h);
  const bool track = node(a).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, a, arg](Tape& t) {
      const Tensor& g = t.node(id).grad;
      Tensor& ga = t.node(a).grad;
      for (std::size_t j = 0; j < g.cols; ++j) {
        ga.at(arg[j], j) += g.at(0, j);
      }
    };
  }
  return id;
}

VarId Tape::sum_all(VarId a) {
  const Tensor& ta = val(a);
  Tensor out(1, 1);
  for (double x : ta.v) out.v[0] += x;
  const bool track = node(a).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, a](Tape& t) {
      const double g = t.node(id).grad.v[0];
      for (double& x : t.node(a).grad.v) x += g;
    };
  }
  return id;
}

VarId Tape::sqnorm(VarId a) {
  const Tensor& ta = val(a);
  Tensor out(1, 1);
  out.v[0] = kernels::ops().dot(ta.data(), ta.data(), ta.size());
  const bool track = node(a).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, a](Tape& t) {
      const double g = t.node(id).grad.v[0];
      const Tensor& va = t.val(a);
      Tensor& ga = t.node(a).grad;
      for (std::size_t i = 0; i < va.size(); ++i) ga.v[i] += 2.0 * g * va.v[i];
    };
  }
  return id;
}

VarId Tape::kl_diag_from_logvar(VarId mu, VarId logvar) {
  const Tensor& tm = val(mu);
  const Tensor& tl = val(logvar);
  require(tm.same_shape(tl), "kl: mu/logvar shape mismatch");
  Tensor out(1, 1);
  double s = 0.0;
  for (std::size_t i = 0; i < tm.size(); ++i) {
    s += tm.v[i] * tm.v[i] + std::exp(tl.v[i]) - 1.0 - tl.v[i];
  }
  out.v[0] = 0.5 * s;
  const bool track = node(mu).track || node(logvar).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, mu, logvar](Tape& t) {
      const double g = t.node(id).grad.v[0];
      const Tensor& vm = t.val(mu);
      const Tensor& vl = t.val(logvar);
      if (t.node(mu).track) {
        Tensor& gm = t.node(mu).grad;
        for (std::size_t i = 0; i < vm.size(); ++i) gm.v[i] += g * vm.v[i];
      }
      if (t.node(logvar).track) {
        Tensor& gl = t.node(logvar).grad;
        for (std::size_t i = 0; i < vl.size(); ++i) {
          gl.v[i] += g * 0.5 * (std::exp(vl.v[i]) - 1.0);
        }
      }
    };
  }
  return id;
}

VarId Tape::reparameterize(VarId mu, VarId logvar, std::vector<double> eps) {
  const Tensor& tm = val(mu);
  const Tensor& tl = val(logvar);
  require(tm.same_shape(tl), "reparameterize: mu/logvar shape mismatch");
  require(eps.size() == tm.size(), "reparameterize: eps size mismatch");
  Tensor out = tm;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.v[i] += eps[i] * std::exp(0.5 * tl.v[i]);
  }
  const bool track = node(mu).track || node(logvar).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, mu, logvar, eps = std::move(eps)](Tape& t) {
      const Tensor& g = t.node(id).grad;
      const Tensor& vl = t.val(logvar);
      if (t.node(mu).track) {
        Tensor& gm = t.node(mu).grad;
        for (std::size_t i = 0; i < g.size(); ++i) gm.v[i] += g.v[i];
      }
      if (t.node(logvar).track) {
        Tensor& gl = t.node(logvar).grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
          gl.v[i] += g.v[i] * 0.5 * eps[i] * std::exp(0.5 * vl.v[i]);
        }
      }
    };
  }
  return id;
}

VarId Tape::batch_norm(VarId x, VarId gamma, VarId beta, BatchNormState state,
                       bool training) {
  const Tensor& tx = val(x);
  const Tensor& tg = val(gamma);
  const Tensor& tb = val(beta);
  const std::size_t n = tx.rows, c = tx.cols;
  require(tg.rows == 1 && tg.cols == c && tb.rows == 1 && tb.cols == c,
          "batch_norm: scale/shift shape mismatch");
  require(state.running_mean != nullptr && state.running_var != nullptr &&
              state.running_mean->size() == c && state.running_var->size() == c,
          "batch_norm: running stats unavailable");
  if (training && n < 2) {
    throw UsageError("batch_norm: training mode needs a batch of at least 2 rows");
  }

  Tensor out(n, c);
  std::vector<double> mean(c), inv_std(c);
  // xhat kept for the backward pass
  auto xhat = std::make_shared<Tensor>(n, c);
  if (training) {
    for (std::size_t j = 0; j < c; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += tx.at(i, j);
      m /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = tx.at(i, j) - m;
        var += d * d;
      }
      var /= static_cast<double>(n);
      mean[j] = m;
      inv_std[j] = 1.0 / std::sqrt(var + state.eps);
      if (state.capture_mean != nullptr && state.capture_var != nullptr) {
        state.capture_mean->v[j] = m;
        state.capture_var->v[j] = var;
      } else {
        state.running_mean->v[j] =
            (1.0 - state.momentum) * state.running_mean->v[j] + state.momentum * m;
        state.running_var->v[j] =
            (1.0 - state.momentum) * state.running_var->v[j] + state.momentum * var;
      }
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      mean[j] = state.running_mean->v[j];
      inv_std[j] = 1.0 / std::sqrt(state.running_var->v[j] + state.eps);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double xh = (tx.at(i, j) - mean[j]) * inv_std[j];
      xhat->at(i, j) = xh;
      out.at(i, j) = tg.at(0, j) * xh + tb.at(0, j);
    }
  }

  const bool track = node(x).track || node(gamma).track || node(beta).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, x, gamma, beta, xhat, inv_std, training, n, c](Tape& t) {
      const Tensor& g = t.node(id).grad;
      const Tensor& vg = t.val(gamma);
      if (t.node(beta).track) {
        Tensor& gb = t.node(beta).grad;
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < c; ++j) gb.at(0, j) += g.at(i, j);
        }
      }
      if (t.node(gamma).track) {
        Tensor& gg = t.node(gamma).grad;
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < c; ++j) gg.at(0, j) += g.at(i, j) * xhat->at(i, j);
        }
      }
      if (t.node(x).track) {
        Tensor& gx = t.node(x).grad;
        if (training) {
          // dx = inv_std/n * (n*dxh - sum(dxh) - xhat * sum(dxh*xhat))
          for (std::size_t j = 0; j < c; ++j) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
              const double dxh = g.at(i, j) * vg.at(0, j);
              s1 += dxh;
              s2 += dxh * xhat->at(i, j);
            }
            const double nn = static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
              const double dxh = g.at(i, j) * vg.at(0, j);
              gx.at(i, j) += inv_std[j] / nn * (nn * dxh - s1 - xhat->at(i, j) * s2);
            }
          }
        } else {
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
              gx.at(i, j) += g.at(i, j) * vg.at(0, j) * inv_std[j];
            }
          }
        }
      }
    };
  }
  return id;
}

VarId Tape::emd_to(VarId recon, const geometry::PointCloud& target) {
  const Tensor& tr = val(recon);
  require(tr.cols == 3, "emd_to: reconstruction must be n x 3");
  require(tr.rows == target.size(), "emd_to: point count mismatch with target");
  geometry::PointCloud rc;
  rc.points.resize(tr.rows);
  std::memcpy(rc.points.data(), tr.data(), tr.size() * sizeof(double));

  const transport::TransportResult res = transport::emd_exact(rc, target);
  const auto subgrad = std::make_shared<std::vector<geometry::Vec3>>(
      transport::emd_subgradient(rc, target, res.matching));

  std::uint64_t h = 0xe3d;
  for (std::size_t p : res.matching.perm) h = rng::combine(h, p);
  mix_structure(h);

  Tensor out(1, 1);
  out.v[0] = res.cost;
  const bool track = node(recon).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, recon, subgrad](Tape& t) {
      const double g = t.node(id).grad.v[0];
      Tensor& gr = t.node(recon).grad;
      for (std::size_t i = 0; i < subgrad->size(); ++i) {
        for (std::size_t k = 0; k < 3; ++k) gr.at(i, k) += g * (*subgrad)[i][k];
      }
    };
  }
  return id;
}

VarId Tape::chamfer_to(VarId recon, const geometry::PointCloud& target) {
  const Tensor& tr = val(recon);
  require(tr.cols == 3, "chamfer_to: reconstruction must be n x 3");
  require(target.size() > 0, "chamfer_to: empty target");
  geometry::PointCloud rc;
  rc.points.resize(tr.rows);
  std::memcpy(rc.points.data(), tr.data(), tr.size() * sizeof(double));

  const auto nn_rt = transport::nearest_indices(rc, target);
  const auto nn_tr = transport::nearest_indices(target, rc);
  const double na = static_cast<double>(rc.size());
  const double nb = static_cast<double>(target.size());

  double value = 0.0;
  auto grad = std::make_shared<std::vector<geometry::Vec3>>(rc.size(),
                                                            geometry::Vec3{0, 0, 0});
  std::uint64_t h = 0xcafe;
  for (std::size_t i = 0; i < rc.size(); ++i) {
    const geometry::Vec3 d = rc.points[i] - target.points[nn_rt[i]];
    value += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / na;
    for (std::size_t k = 0; k < 3; ++k) (*grad)[i][k] += 2.0 * d[k] / na;
    h = rng::combine(h, nn_rt[i]);
  }
  for (std::size_t j = 0; j < target.size(); ++j) {
    const geometry::Vec3 d = rc.points[nn_tr[j]] - target.points[j];
    value += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / nb;
    for (std::size_t k = 0; k < 3; ++k) (*grad)[nn_tr[j]][k] += 2.0 * d[k] / nb;
    h = rng::combine(h, nn_tr[j]);
  }
  mix_structure(h);

  Tensor out(1, 1);
  out.v[0] = value;
  const bool track = node(recon).track;
  const VarId id = push(std::move(out), track, nullptr);
  if (track) {
    node(id).back = [id, recon, grad](Tape& t) {
      const double g = t.node(id).grad.v[0];
      Tensor& gr = t.node(recon).grad;
      for (std::size_t i = 0; i < grad->size(); ++i) {
        for (std::size_t k = 0; k < 3; ++k) gr.at(i, k) += g * (*grad)[i][k];
      }
    };
  }
  return id;
}

void Tape::backward(VarId root) {
  require(val(root).size() == 1, "backward: root must be scalar");
  for (auto& n : nodes_) {
    n.grad = Tensor(n.value.rows, n.value.cols);
  }
  node(root).grad.v[0] = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (n.back && n.track) n.back(*this);
  }
}

void Tape::flush_param_grads() {
  for (auto& [id, block] : bindings_) {
    const Tensor& g = grad_of(id);
    if (g.size() != block->grad.size()) continue;  // backward was not run
    for (std::size_t i = 0; i < g.size(); ++i) block->grad.v[i] += g.v[i];
  }
}

// ---------------------------------------------------------------------------

VarId gru_step(Tape& t, VarId x, VarId h, const GruVars& p) {
  const VarId z = t.sigmoid(t.add(t.affine(x, p.wz, p.bz), t.matmul(h, p.uz)));
  const VarId r = t.sigmoid(t.add(t.affine(x, p.wr, p.br), t.matmul(h, p.ur)));
  const VarId cand = t.tanh_act(t.add(t.affine(x, p.wc, p.bc), t.matmul(t.mul(r, h), p.uc)));
  return t.add(t.mul(t.one_minus(z), h), t.mul(z, cand));
}

double kl_diag_gaussian(std::span<const double> mu, std::span<const double> sigma) {
  if (mu.size() != sigma.size()) throw DataError("kl_diag_gaussian: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!(sigma[i] > 0.0)) throw DataError("kl_diag_gaussian: sigma must be positive");
    s += mu[i] * mu[i] + sigma[i] * sigma[i] - 1.0 - 2.0 * std::log(sigma[i]);
  }
  return 0.5 * s;
}

std::vector<double> draw_standard_normal(std::size_t n, std::uint64_t seed) {
  rng::Engine eng(seed);
  std::vector<double> out(n);
  for (double& x : out) x = rng::normal(eng);
  return out;
}

LatentGaussian reparameterize_values(std::span<const double> mu,
                                     std::span<const double> sigma, std::uint64_t seed) {
  if (mu.size() != sigma.size()) throw DataError("reparameterize: size mismatch");
  LatentGaussian lg;
  lg.mu.assign(mu.begin(), mu.end());
  lg.sigma.assign(sigma.begin(), sigma.end());
  lg.eps = draw_standard_normal(mu.size(), seed);
  lg.z.resize(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!(sigma[i] > 0.0)) throw DataError("reparameterize: sigma must be positive");
    lg.z[i] = mu[i] + lg.eps[i] * sigma[i];
  }
  return lg;
}

GradCheckReport grad_check(const std::function<EvalResult(bool with_grad)>& eval,
                           ParamSet& params, double fd_step,
                           std::size_t max_coords_per_block) {
  params.zero_grads();
  const EvalResult center = eval(true);
  (void)center;

  // snapshot analytic gradients
  std::vector<std::vector<double>> analytic;
  for (const auto& b : params.blocks) analytic.push_back(b.grad.v);

  GradCheckReport report;
  for (std::size_t bi = 0; bi < params.blocks.size(); ++bi) {
    ParamBlock& b = params.blocks[bi];
    if (!b.trainable) continue;
    GradCheckReport::Entry e;
    e.block = b.name;
    const std::size_t count = max_coords_per_block == 0
                                  ? b.value.size()
                                  : std::min(b.value.size(), max_coords_per_block);
    for (std::size_t i = 0; i < count; ++i) {
      const double theta = b.value.v[i];
      const double h = fd_step * std::max(1.0, std::abs(theta));
      b.value.v[i] = theta + h;
      const EvalResult up = eval(false);
      b.value.v[i] = theta - h;
      const EvalResult dn = eval(false);
      b.value.v[i] = theta;
      if (up.structure_hash != dn.structure_hash || up.tie || dn.tie) {
        ++e.excluded;  // probe crossed a kink; not a smooth point
        continue;
      }
      const double fd = (up.loss - dn.loss) / (2.0 * h);
      const double got = analytic[bi][i];
      const double rel = std::abs(fd - got) / std::max({std::abs(fd), std::abs(got), 1e-6});
      e.max_rel_err = std::max(e.max_rel_err, rel);
      ++e.checked;
    }
    report.worst = std::max(report.worst, e.max_rel_err);
    report.total_checked += e.checked;
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace mapvae::diffcore
