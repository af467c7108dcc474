// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mapvae/geometry.hpp"

namespace mapvae::diffcore {

// Dense row-major matrix; vectors are 1 x n.
struct Tensor {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}
  static Tensor row(std::vector<double> data);

  std::size_t size() const { return rows * cols; }
  double& at(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
  double* data() { return v.data(); }
  const double* data() const { return v.data(); }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  bool all_finite() const;
};

// Named parameter block with gradient and Adam slots.
struct ParamBlock {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor adam_m, adam_v;
  bool trainable = true;

  void ensure_slots();
};

struct ParamSet {
  std::vector<ParamBlock> blocks;
  std::int64_t adam_t = 0;

  ParamBlock& add(const std::string& name, Tensor value, bool trainable = true);
  ParamBlock* find(const std::string& name);
  const ParamBlock* find(const std::string& name) const;
  ParamBlock& at(const std::string& name);
  const ParamBlock& at(const std::string& name) const;
  void zero_grads();
  std::size_t trainable_count() const;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One deterministic Adam update from the accumulated grads; increments the
// shared step counter and leaves grads untouched (caller zeroes them).
void adam_step(ParamSet& params, const AdamConfig& cfg);

// Running statistics for one batch_norm site. Lives in ParamSet as a pair of
// non-trainable blocks so it checkpoints with everything else.
struct BatchNormState {
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
  double momentum = 0.1;
  double eps = 1e-10;
  // When set, training mode writes the batch statistics here instead of
  // updating the running buffers, so a parallel trainer can merge the
  // captures in a fixed order afterwards.
  Tensor* capture_mean = nullptr;
  Tensor* capture_var = nullptr;
};

using VarId = std::int32_t;

// Reverse-mode tape. Build the forward pass through the factory methods, call
// backward(root) once, then flush_param_grads() to accumulate into the bound
// ParamBlocks. The tape also fingerprints every discrete choice made during
// the forward pass (argmaxes, matchings, activation patterns) so a gradient
// checker can reject finite-difference probes that cross a kink.
class Tape {
 public:
  VarId input(Tensor value, bool track_grad = false);
  VarId param(ParamBlock& block);

  const Tensor& val(VarId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Tensor& grad_of(VarId id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  VarId matmul(VarId a, VarId b);
  VarId add_rowvec(VarId x, VarId b);  // b broadcast over the rows of x
  VarId affine(VarId x, VarId w, VarId b) { return add_rowvec(matmul(x, w), b); }
  VarId add(VarId a, VarId b);
  VarId sub(VarId a, VarId b);
  VarId mul(VarId a, VarId b);
  VarId scale(VarId a, double s);
  VarId relu(VarId a);
  VarId sigmoid(VarId a);
  VarId tanh_act(VarId a);
  VarId one_minus(VarId a);
  VarId reshape(VarId a, std::size_t rows, std::size_t cols);
  VarId set_max_pool(VarId a);  // n x d -> 1 x d, ties to the lowest row
  VarId sum_all(VarId a);       // 1 x 1
  VarId sqnorm(VarId a);        // 1 x 1 sum of squares
  VarId kl_diag_from_logvar(VarId mu, VarId logvar);  // 1 x 1
  VarId reparameterize(VarId mu, VarId logvar, std::vector<double> eps);
  VarId batch_norm(VarId x, VarId gamma, VarId beta, BatchNormState state, bool training);
  // Earth mover's distance to a fixed target; gradient flows through the
  // frozen optimal matching of this forward pass.
  VarId emd_to(VarId recon, const geometry::PointCloud& target);
  // Chamfer distance to a fixed target with frozen nearest-neighbor indices.
  VarId chamfer_to(VarId recon, const geometry::PointCloud& target);

  void backward(VarId root);
  void flush_param_grads();

  std::uint64_t structure_hash() const { return structure_hash_; }
  bool saw_exact_tie() const { return tie_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool track = false;
    std::function<void(Tape&)> back;  // empty for leaves
  };

  VarId push(Tensor value, bool track, std::function<void(Tape&)> back);
  Node& node(VarId id) { return nodes_[static_cast<std::size_t>(id)]; }
  void mix_structure(std::uint64_t h);

  std::vector<Node> nodes_;
  std::vector<std::pair<VarId, ParamBlock*>> bindings_;
  std::uint64_t structure_hash_ = 0x9e3779b97f4a7c15ull;
  bool tie_ = false;
};

// GRU cell parameters bound on one tape.
struct GruVars {
  VarId wz, uz, bz;
  VarId wr, ur, br;
  VarId wc, uc, bc;
};

// Standard gate equations: z = sig(xWz + hUz + bz), r = sig(xWr + hUr + br),
// c = tanh(xWc + (r*h)Uc + bc), h' = (1-z)*h + z*c.
VarId gru_step(Tape& tape, VarId x, VarId h, const GruVars& p);

// Closed-form KL(N(mu, diag sigma^2) || N(0, I)); sigma holds standard
// deviations and must be positive.
double kl_diag_gaussian(std::span<const double> mu, std::span<const double> sigma);

struct LatentGaussian {
  std::vector<double> mu, sigma, eps, z;
};

// Plain (non-tape) reparameterization: draws eps ~ N(0, I) from the seed and
// forms z = mu + eps * sigma.
LatentGaussian reparameterize_values(std::span<const double> mu,
                                     std::span<const double> sigma, std::uint64_t seed);

std::vector<double> draw_standard_normal(std::size_t n, std::uint64_t seed);

// One forward evaluation for the gradient checker.
struct EvalResult {
  double loss = 0.0;
  std::uint64_t structure_hash = 0;
  bool tie = false;
};

struct GradCheckReport {
  struct Entry {
    std::string block;
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    std::size_t excluded = 0;
  };
  std::vector<Entry> entries;
  double worst = 0.0;
  std::size_t total_checked = 0;

  bool pass(double tol) const { return total_checked > 0 && worst <= tol; }
};

// Compare reverse-mode gradients against central finite differences with
// step fd_step * max(1, |theta|). Probes whose two evaluations disagree on
// the discrete structure (or that hit an exact tie) are excluded as
// nonsmooth. `eval` must recompute the loss from the current params; when
// with_grad is true it must also leave gradients accumulated in `params`.
GradCheckReport grad_check(const std::function<EvalResult(bool with_grad)>& eval,
                           ParamSet& params, double fd_step = 1e-4,
                           std::size_t max_coords_per_block = 0);

}  // namespace mapvae::diffcore
