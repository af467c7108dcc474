// SPDX-License-Identifier: Apache-2.0
//
// Scalar reference kernels. These define the semantics that the SIMD
// variants are tested against.

#include <cmath>
#include <limits>

#include "mapvae/kernels.hpp"

namespace mapvae::kernels {
namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void matmul_scalar(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      const double av = a[i * k + l];
      const double* brow = b + l * n;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_at_b_scalar(const double* a, const double* b, double* c, std::size_t m,
                        std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      const double av = a[i * k + l];
      const double* brow = b + i * n;
      double* crow = c + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_a_bt_scalar(const double* a, const double* b, double* c, std::size_t m,
                        std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      c[i * n + j] += dot_scalar(a + i * k, b + j * k, k);
    }
  }
}

void sqdist3_scalar(const double* a, std::size_t na, const double* b, std::size_t nb,
                    double* out) {
  for (std::size_t i = 0; i < na; ++i) {
    const double ax = a[3 * i], ay = a[3 * i + 1], az = a[3 * i + 2];
    double* row = out + i * nb;
    for (std::size_t j = 0; j < nb; ++j) {
      const double dx = ax - b[3 * j];
      const double dy = ay - b[3 * j + 1];
      const double dz = az - b[3 * j + 2];
      row[j] = dx * dx + dy * dy + dz * dz;
    }
  }
}

void dist3_scalar(const double* a, std::size_t na, const double* b, std::size_t nb,
                  double* out) {
  sqdist3_scalar(a, na, b, nb, out);
  for (std::size_t i = 0; i < na * nb; ++i) out[i] = std::sqrt(out[i]);
}

void colwise_max_scalar(const double* x, std::size_t n, std::size_t d, double* maxv,
                        std::size_t* argmax) {
  for (std::size_t j = 0; j < d; ++j) {
    maxv[j] = x[j];
    argmax[j] = 0;
  }
  for (std::size_t i = 1; i < n; ++i) {
    const double* row = x + i * d;
    for (std::size_t j = 0; j < d; ++j) {
      if (row[j] > maxv[j]) {  // strict: ties keep the lowest row index
        maxv[j] = row[j];
        argmax[j] = i;
      }
    }
  }
}

void jv_relax_scalar(const double* cost_row, double u_row, const double* v,
                     const unsigned char* used, double* minv, std::int64_t* way,
                     std::int64_t j0, std::size_t n, double* delta_out,
                     std::int64_t* j1_out) {
  double delta = std::numeric_limits<double>::infinity();
  std::int64_t j1 = -1;
  for (std::size_t j = 1; j <= n; ++j) {
    if (used[j]) continue;
    const double cur = cost_row[j - 1] - u_row - v[j];
    if (cur < minv[j]) {
      minv[j] = cur;
      way[j] = j0;
    }
    if (minv[j] < delta) {
      delta = minv[j];
      j1 = static_cast<std::int64_t>(j);
    }
  }
  *delta_out = delta;
  *j1_out = j1;
}

void jv_apply_delta_scalar(double* v, double* minv, const unsigned char* used,
                           double delta, std::size_t n) {
  for (std::size_t j = 0; j <= n; ++j) {
    if (used[j]) {
      v[j] -= delta;
    } else {
      minv[j] -= delta;
    }
  }
}

}  // namespace

namespace detail {
const Ops scalar_ops = {
    dot_scalar,        axpy_scalar,    matmul_scalar,
    matmul_at_b_scalar, matmul_a_bt_scalar, sqdist3_scalar,
    dist3_scalar,      colwise_max_scalar, jv_relax_scalar,
    jv_apply_delta_scalar,
};
}  // namespace detail

}  // namespace mapvae::kernels
