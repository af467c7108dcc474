// SPDX-License-Identifier: Apache-2.0
//
// AVX2+FMA kernel variants. Discrete outputs (argmax/argmin indices and their
// tie-breaking) reproduce the scalar reference exactly; floating point sums
// differ only by reduction order. This TU is compiled with -mavx2 -mfma on
// x86-64 and is entered only after a runtime cpuid check.

#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "mapvae/kernels.hpp"

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>

namespace mapvae::kernels {
namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc);
  }
  double s = hsum(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d av = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i),
                                            _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// c[i,:] += sum_l a[i,l] * b[l,:], vectorized along rows of b / c.
void row_saxpy(const double* brow, double av, double* crow, std::size_t n) {
  const __m256d avv = _mm256_set1_pd(av);
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    _mm256_storeu_pd(crow + j, _mm256_fmadd_pd(avv, _mm256_loadu_pd(brow + j),
                                               _mm256_loadu_pd(crow + j)));
  }
  for (; j < n; ++j) crow[j] += av * brow[j];
}

void matmul_avx2(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      row_saxpy(b + l * n, a[i * k + l], c + i * n, n);
    }
  }
}

void matmul_at_b_avx2(const double* a, const double* b, double* c, std::size_t m,
                      std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      row_saxpy(b + i * n, a[i * k + l], c + l * n, n);
    }
  }
}

void matmul_a_bt_avx2(const double* a, const double* b, double* c, std::size_t m,
                      std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      c[i * n + j] += dot_avx2(a + i * k, b + j * k, k);
    }
  }
}

// Deinterleaved scratch for the 3-d distance kernels.
struct Soa3 {
  std::vector<double> x, y, z;
  void fill(const double* pts, std::size_t n) {
    x.resize(n);
    y.resize(n);
    z.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = pts[3 * i];
      y[i] = pts[3 * i + 1];
      z[i] = pts[3 * i + 2];
    }
  }
};

void sqdist3_avx2(const double* a, std::size_t na, const double* b, std::size_t nb,
                  double* out) {
  thread_local Soa3 soa;
  soa.fill(b, nb);
  for (std::size_t i = 0; i < na; ++i) {
    const __m256d ax = _mm256_set1_pd(a[3 * i]);
    const __m256d ay = _mm256_set1_pd(a[3 * i + 1]);
    const __m256d az = _mm256_set1_pd(a[3 * i + 2]);
    double* row = out + i * nb;
    std::size_t j = 0;
    for (; j + 4 <= nb; j += 4) {
      const __m256d dx = _mm256_sub_pd(ax, _mm256_loadu_pd(soa.x.data() + j));
      const __m256d dy = _mm256_sub_pd(ay, _mm256_loadu_pd(soa.y.data() + j));
      const __m256d dz = _mm256_sub_pd(az, _mm256_loadu_pd(soa.z.data() + j));
      __m256d d = _mm256_mul_pd(dx, dx);
      d = _mm256_fmadd_pd(dy, dy, d);
      d = _mm256_fmadd_pd(dz, dz, d);
      _mm256_storeu_pd(row + j, d);
    }
    for (; j < nb; ++j) {
      const double dx = a[3 * i] - b[3 * j];
      const double dy = a[3 * i + 1] - b[3 * j + 1];
      const double dz = a[3 * i + 2] - b[3 * j + 2];
      row[j] = dx * dx + dy * dy + dz * dz;
    }
  }
}

void dist3_avx2(const double* a, std::size_t na, const double* b, std::size_t nb,
                double* out) {
  sqdist3_avx2(a, na, b, nb, out);
  std::size_t i = 0;
  const std::size_t total = na * nb;
  for (; i + 4 <= total; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_sqrt_pd(_mm256_loadu_pd(out + i)));
  }
  for (; i < total; ++i) out[i] = std::sqrt(out[i]);
}

void colwise_max_avx2(const double* x, std::size_t n, std::size_t d, double* maxv,
                      std::size_t* argmax) {
  std::size_t j = 0;
  for (; j + 4 <= d; j += 4) {
    __m256d best = _mm256_loadu_pd(x + j);
    __m256d besti = _mm256_setzero_pd();
    for (std::size_t i = 1; i < n; ++i) {
      const __m256d row = _mm256_loadu_pd(x + i * d + j);
      const __m256d gt = _mm256_cmp_pd(row, best, _CMP_GT_OQ);  // strict
      best = _mm256_blendv_pd(best, row, gt);
      besti = _mm256_blendv_pd(besti, _mm256_set1_pd(static_cast<double>(i)), gt);
    }
    double bv[4], bi[4];
    _mm256_storeu_pd(bv, best);
    _mm256_storeu_pd(bi, besti);
    for (int l = 0; l < 4; ++l) {
      maxv[j + l] = bv[l];
      argmax[j + l] = static_cast<std::size_t>(bi[l]);
    }
  }
  for (; j < d; ++j) {
    double best = x[j];
    std::size_t bi = 0;
    for (std::size_t i = 1; i < n; ++i) {
      if (x[i * d + j] > best) {
        best = x[i * d + j];
        bi = i;
      }
    }
    maxv[j] = best;
    argmax[j] = bi;
  }
}

inline __m256d used_mask(const unsigned char* used, std::size_t j) {
  // 4 bytes -> 4 doubles, then >0.5 comparison yields the lane mask.
  std::uint32_t w;
  std::memcpy(&w, used + j, 4);
  const __m128i bytes = _mm_cvtsi32_si128(static_cast<int>(w));
  const __m128i ints = _mm_cvtepu8_epi32(bytes);
  return _mm256_cmp_pd(_mm256_cvtepi32_pd(ints), _mm256_set1_pd(0.5), _CMP_GT_OQ);
}

void jv_relax_avx2(const double* cost_row, double u_row, const double* v,
                   const unsigned char* used, double* minv, std::int64_t* way,
                   std::int64_t j0, std::size_t n, double* delta_out,
                   std::int64_t* j1_out) {
  const double inf = std::numeric_limits<double>::infinity();
  const __m256d uv = _mm256_set1_pd(u_row);
  const __m256d infv = _mm256_set1_pd(inf);
  const __m256i j0v = _mm256_set1_epi64x(j0);
  __m256d run_min = infv;
  __m256d run_idx = _mm256_set1_pd(-1.0);
  std::size_t j = 1;
  for (; j + 4 <= n + 1; j += 4) {
    const __m256d um = used_mask(used, j);
    const __m256d cur = _mm256_sub_pd(
        _mm256_sub_pd(_mm256_loadu_pd(cost_row + j - 1), uv), _mm256_loadu_pd(v + j));
    const __m256d mv = _mm256_loadu_pd(minv + j);
    // relax: unused lanes with cur < minv
    const __m256d upd = _mm256_andnot_pd(um, _mm256_cmp_pd(cur, mv, _CMP_LT_OQ));
    const __m256d newmv = _mm256_blendv_pd(mv, cur, upd);
    _mm256_storeu_pd(minv + j, newmv);
    _mm256_maskstore_epi64(reinterpret_cast<long long*>(way + j),
                           _mm256_castpd_si256(upd), j0v);
    // min scan over unused lanes of the relaxed values
    const __m256d cand = _mm256_blendv_pd(newmv, infv, um);
    const __m256d lt = _mm256_cmp_pd(cand, run_min, _CMP_LT_OQ);
    run_min = _mm256_blendv_pd(run_min, cand, lt);
    const __m256d jv = _mm256_setr_pd(static_cast<double>(j), static_cast<double>(j + 1),
                                      static_cast<double>(j + 2), static_cast<double>(j + 3));
    run_idx = _mm256_blendv_pd(run_idx, jv, lt);
  }
  double mins[4], idxs[4];
  _mm256_storeu_pd(mins, run_min);
  _mm256_storeu_pd(idxs, run_idx);
  double delta = inf;
  std::int64_t j1 = -1;
  for (int l = 0; l < 4; ++l) {
    // each lane kept the lowest index for its own ties; across lanes prefer
    // the lower column index on exact ties to match the scalar scan order
    if (mins[l] < delta ||
        (mins[l] == delta && idxs[l] >= 0.0 && static_cast<std::int64_t>(idxs[l]) < j1)) {
      delta = mins[l];
      j1 = static_cast<std::int64_t>(idxs[l]);
    }
  }
  for (; j <= n; ++j) {
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

void jv_apply_delta_avx2(double* v, double* minv, const unsigned char* used,
                         double delta, std::size_t n) {
  const __m256d dv = _mm256_set1_pd(delta);
  std::size_t j = 0;
  for (; j + 4 <= n + 1; j += 4) {
    const __m256d um = used_mask(used, j);
    const __m256d vv = _mm256_loadu_pd(v + j);
    const __m256d mv = _mm256_loadu_pd(minv + j);
    _mm256_storeu_pd(v + j, _mm256_blendv_pd(vv, _mm256_sub_pd(vv, dv), um));
    _mm256_storeu_pd(minv + j, _mm256_blendv_pd(_mm256_sub_pd(mv, dv), mv, um));
  }
  for (; j <= n; ++j) {
    if (used[j]) {
      v[j] -= delta;
    } else {
      minv[j] -= delta;
    }
  }
}

}  // namespace

namespace detail {
const Ops avx2_ops = {
    dot_avx2,        axpy_avx2,    matmul_avx2,
    matmul_at_b_avx2, matmul_a_bt_avx2, sqdist3_avx2,
    dist3_avx2,      colwise_max_avx2, jv_relax_avx2,
    jv_apply_delta_avx2,
};
bool avx2_compiled() { return true; }
}  // namespace detail

}  // namespace mapvae::kernels

#else  // no AVX2 at compile time: alias the scalar reference

namespace mapvae::kernels::detail {
const Ops avx2_ops = scalar_ops;
bool avx2_compiled() { return false; }
}  // namespace mapvae::kernels::detail

#endif
