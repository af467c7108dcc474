// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

// Data-parallel inner loops used throughout the library. Every kernel has a
// scalar reference implementation and may have SIMD variants; the active
// variant is chosen once at startup from cpuid (override with set_backend or
// the MAPVAE_BACKEND environment variable: "scalar" or "avx2").
//
// SIMD variants must match the scalar reference in all discrete outputs
// (argmin/argmax indices, tie-breaking by lowest index) and agree on floating
// point results to reduction-order rounding; tests/test_kernels.cpp holds the
// equivalence suite.
namespace mapvae::kernels {

enum class Backend { scalar, avx2 };

struct Ops {
  // dot(a, b) over n entries.
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x over n entries.
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // c[m x n] += a[m x k] * b[k x n], all row-major.
  void (*matmul)(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n);
  // c[k x n] += a^T * b with a[m x k], b[m x n].
  void (*matmul_at_b)(const double* a, const double* b, double* c, std::size_t m,
                      std::size_t k, std::size_t n);
  // c[m x n] += a * b^T with a[m x k], b[n x k].
  void (*matmul_a_bt)(const double* a, const double* b, double* c, std::size_t m,
                      std::size_t k, std::size_t n);
  // out[i*nb + j] = squared Euclidean distance between 3-d points a_i and b_j.
  void (*sqdist3)(const double* a, std::size_t na, const double* b, std::size_t nb,
                  double* out);
  // Same with the square root applied.
  void (*dist3)(const double* a, std::size_t na, const double* b, std::size_t nb,
                double* out);
  // Column-wise max of x[n x d]; ties resolved to the lowest row index.
  void (*colwise_max)(const double* x, std::size_t n, std::size_t d, double* maxv,
                      std::size_t* argmax);
  // Fused relax + min scan of the assignment solver (see transport.cpp).
  // For j in [1, n] with !used[j]:
  //   cur = cost_row[j-1] - u_row - v[j]
  //   if cur < minv[j]: minv[j] = cur, way[j] = j0
  // Returns min of minv[j] over unused j as *delta_out, lowest such j as *j1_out.
  void (*jv_relax)(const double* cost_row, double u_row, const double* v,
                   const unsigned char* used, double* minv, std::int64_t* way,
                   std::int64_t j0, std::size_t n, double* delta_out,
                   std::int64_t* j1_out);
  // For j in [0, n]: used[j] ? v[j] -= delta : minv[j] -= delta.
  void (*jv_apply_delta)(double* v, double* minv, const unsigned char* used,
                         double delta, std::size_t n);
};

const Ops& ops();
Backend active_backend();
const char* backend_name(Backend b);
// Force a backend; throws std::runtime_error if unsupported on this CPU.
void set_backend(Backend b);
bool avx2_supported();

namespace detail {
extern const Ops scalar_ops;
extern const Ops avx2_ops;  // entries may alias scalar when built without AVX2
bool avx2_compiled();
}  // namespace detail

}  // namespace mapvae::kernels
