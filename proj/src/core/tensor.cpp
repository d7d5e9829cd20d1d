#include "core/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace al {

int worker_count() {
  static int cached = [] {
    int hw = int(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("ANCHORLENS_THREADS")) {
      char* end = nullptr;
      long cap = std::strtol(env, &end, 10);
      if (end != env && cap >= 1 && cap < hw) hw = int(cap);
    }
    return hw;
  }();
  return cached;
}

void parallel_for(size_t n, const std::function<void(size_t, size_t)>& f) {
  if (n == 0) return;
  int w = worker_count();
  size_t chunks = std::min<size_t>(size_t(w), n);
  if (chunks <= 1) {
    f(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(chunks - 1);
  size_t per = n / chunks, extra = n % chunks, begin = 0;
  for (size_t c = 0; c < chunks; ++c) {
    size_t len = per + (c < extra ? 1 : 0);
    size_t end = begin + len;
    if (c + 1 == chunks) {
      f(begin, end);
    } else {
      pool.emplace_back([&f, begin, end] { f(begin, end); });
    }
    begin = end;
  }
  for (auto& t : pool) t.join();
}

#if defined(__AVX512F__)

namespace {

inline __mmask8 lane_mask(int w) { return __mmask8((1u << w) - 1u); }

// One register tile of a saxpy-style product: R output rows by up to 16
// columns, reduction length kdim. Element r of the multiplier column at
// reduction index q lives at Abase[r*a_r_stride + q*a_q_stride], which covers
// both C = A*B (rows of A) and C += A^T*B (columns of A) with one body.
template <int R, bool FULL>
inline void gemm_tile(const double* Abase, size_t a_r_stride, size_t a_q_stride, int kdim,
                      const double* B, size_t ldb, double* C, size_t ldc, bool acc, __mmask8 q0,
                      __mmask8 q1) {
  __m512d c0[R], c1[R];
  for (int r = 0; r < R; ++r) {
    if (acc) {
      c0[r] = FULL ? _mm512_loadu_pd(C + r * ldc) : _mm512_maskz_loadu_pd(q0, C + r * ldc);
      c1[r] = FULL ? _mm512_loadu_pd(C + r * ldc + 8) : _mm512_maskz_loadu_pd(q1, C + r * ldc + 8);
    } else {
      c0[r] = _mm512_setzero_pd();
      c1[r] = _mm512_setzero_pd();
    }
  }
  for (int q = 0; q < kdim; ++q) {
    const double* bq = B + size_t(q) * ldb;
    __m512d b0 = FULL ? _mm512_loadu_pd(bq) : _mm512_maskz_loadu_pd(q0, bq);
    __m512d b1 = FULL ? _mm512_loadu_pd(bq + 8) : _mm512_maskz_loadu_pd(q1, bq + 8);
    for (int r = 0; r < R; ++r) {
      __m512d a = _mm512_set1_pd(Abase[size_t(r) * a_r_stride + size_t(q) * a_q_stride]);
      c0[r] = _mm512_fmadd_pd(a, b0, c0[r]);
      c1[r] = _mm512_fmadd_pd(a, b1, c1[r]);
    }
  }
  for (int r = 0; r < R; ++r) {
    if (FULL) {
      _mm512_storeu_pd(C + r * ldc, c0[r]);
      _mm512_storeu_pd(C + r * ldc + 8, c1[r]);
    } else {
      _mm512_mask_storeu_pd(C + r * ldc, q0, c0[r]);
      _mm512_mask_storeu_pd(C + r * ldc + 8, q1, c1[r]);
    }
  }
}

template <bool FULL>
inline void gemm_panel(const double* Abase, size_t a_r_stride, size_t a_q_stride, int nrows,
                       int kdim, const double* B, size_t ldb, double* C, size_t ldc, bool acc,
                       __mmask8 q0, __mmask8 q1) {
  int r0 = 0;
  for (; r0 + 4 <= nrows; r0 += 4)
    gemm_tile<4, FULL>(Abase + size_t(r0) * a_r_stride, a_r_stride, a_q_stride, kdim, B, ldb,
                       C + size_t(r0) * ldc, ldc, acc, q0, q1);
  switch (nrows - r0) {
    case 3:
      gemm_tile<3, FULL>(Abase + size_t(r0) * a_r_stride, a_r_stride, a_q_stride, kdim, B, ldb,
                         C + size_t(r0) * ldc, ldc, acc, q0, q1);
      break;
    case 2:
      gemm_tile<2, FULL>(Abase + size_t(r0) * a_r_stride, a_r_stride, a_q_stride, kdim, B, ldb,
                         C + size_t(r0) * ldc, ldc, acc, q0, q1);
      break;
    case 1:
      gemm_tile<1, FULL>(Abase + size_t(r0) * a_r_stride, a_r_stride, a_q_stride, kdim, B, ldb,
                         C + size_t(r0) * ldc, ldc, acc, q0, q1);
      break;
    default: break;
  }
}

// Output rows indexed by rows of A (stride a_r_stride over the reduction view),
// columns sliced into 16-wide panels with a masked tail.
inline void gemm_driver(const double* Abase, size_t a_r_stride, size_t a_q_stride, int nrows,
                        int kdim, const double* B, int m, double* C, bool acc) {
  int j0 = 0;
  for (; j0 + 16 <= m; j0 += 16)
    gemm_panel<true>(Abase, a_r_stride, a_q_stride, nrows, kdim, B + j0, size_t(m), C + j0,
                     size_t(m), acc, 0xFF, 0xFF);
  if (j0 < m) {
    int jw = m - j0;
    __mmask8 q0 = lane_mask(std::min(jw, 8));
    __mmask8 q1 = jw > 8 ? lane_mask(jw - 8) : __mmask8(0);
    gemm_panel<false>(Abase, a_r_stride, a_q_stride, nrows, kdim, B + j0, size_t(m), C + j0,
                      size_t(m), acc, q0, q1);
  }
}

inline double reduce_add(__m512d v) { return _mm512_reduce_add_pd(v); }

// R-row by S-row tile of dot products for C = A * B^T.
template <int R, int S>
inline void nt_tile(const double* A, size_t lda, const double* B, size_t ldb, int k, double* C,
                    size_t ldc, bool acc) {
  __m512d sum[R][S];
  for (int r = 0; r < R; ++r)
    for (int s = 0; s < S; ++s) sum[r][s] = _mm512_setzero_pd();
  int q = 0;
  for (; q + 8 <= k; q += 8) {
    __m512d av[R], bv[S];
    for (int r = 0; r < R; ++r) av[r] = _mm512_loadu_pd(A + size_t(r) * lda + q);
    for (int s = 0; s < S; ++s) bv[s] = _mm512_loadu_pd(B + size_t(s) * ldb + q);
    for (int r = 0; r < R; ++r)
      for (int s = 0; s < S; ++s) sum[r][s] = _mm512_fmadd_pd(av[r], bv[s], sum[r][s]);
  }
  if (q < k) {
    __mmask8 tail = lane_mask(k - q);
    __m512d av[R], bv[S];
    for (int r = 0; r < R; ++r) av[r] = _mm512_maskz_loadu_pd(tail, A + size_t(r) * lda + q);
    for (int s = 0; s < S; ++s) bv[s] = _mm512_maskz_loadu_pd(tail, B + size_t(s) * ldb + q);
    for (int r = 0; r < R; ++r)
      for (int s = 0; s < S; ++s) sum[r][s] = _mm512_fmadd_pd(av[r], bv[s], sum[r][s]);
  }
  for (int r = 0; r < R; ++r)
    for (int s = 0; s < S; ++s) {
      double v = reduce_add(sum[r][s]);
      double* c = C + size_t(r) * ldc + s;
      *c = acc ? *c + v : v;
    }
}

template <int R>
inline void nt_rows(const double* A, size_t lda, const double* B, size_t ldb, int k, int m,
                    double* C, size_t ldc, bool acc) {
  int j0 = 0;
  for (; j0 + 4 <= m; j0 += 4)
    nt_tile<R, 4>(A, lda, B + size_t(j0) * ldb, ldb, k, C + j0, ldc, acc);
  switch (m - j0) {
    case 3: nt_tile<R, 3>(A, lda, B + size_t(j0) * ldb, ldb, k, C + j0, ldc, acc); break;
    case 2: nt_tile<R, 2>(A, lda, B + size_t(j0) * ldb, ldb, k, C + j0, ldc, acc); break;
    case 1: nt_tile<R, 1>(A, lda, B + size_t(j0) * ldb, ldb, k, C + j0, ldc, acc); break;
    default: break;
  }
}

}  // namespace

void matmul(const double* A, int n, int k, const double* B, int m, double* C, bool acc) {
  gemm_driver(A, size_t(k), 1, n, k, B, m, C, acc);
}

void matmul_nt(const double* A, int n, int k, const double* B, int m, double* C, bool acc) {
  int i0 = 0;
  for (; i0 + 4 <= n; i0 += 4)
    nt_rows<4>(A + size_t(i0) * k, size_t(k), B, size_t(k), k, m, C + size_t(i0) * m, size_t(m),
               acc);
  switch (n - i0) {
    case 3:
      nt_rows<3>(A + size_t(i0) * k, size_t(k), B, size_t(k), k, m, C + size_t(i0) * m, size_t(m),
                 acc);
      break;
    case 2:
      nt_rows<2>(A + size_t(i0) * k, size_t(k), B, size_t(k), k, m, C + size_t(i0) * m, size_t(m),
                 acc);
      break;
    case 1:
      nt_rows<1>(A + size_t(i0) * k, size_t(k), B, size_t(k), k, m, C + size_t(i0) * m, size_t(m),
                 acc);
      break;
    default: break;
  }
}

void matmul_tn_acc(const double* A, int n, int k, const double* B, int m, double* C) {
  // C(k x m) += A^T * B: output rows are columns of A, reduction runs over n.
  gemm_driver(A, 1, size_t(k), k, n, B, m, C, /*acc=*/true);
}

#else  // portable fallback

void matmul(const double* A, int n, int k, const double* B, int m, double* C, bool acc) {
  // i-k-j order: streams rows of B, lets the compiler vectorize the j loop.
  for (int i = 0; i < n; ++i) {
    double* __restrict ci = C + size_t(i) * m;
    if (!acc) std::fill(ci, ci + m, 0.0);
    const double* ai = A + size_t(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      double a = ai[kk];
      const double* __restrict bk = B + size_t(kk) * m;
      for (int j = 0; j < m; ++j) ci[j] += a * bk[j];
    }
  }
}

void matmul_nt(const double* A, int n, int k, const double* B, int m, double* C, bool acc) {
  for (int i = 0; i < n; ++i) {
    const double* ai = A + size_t(i) * k;
    double* ci = C + size_t(i) * m;
    for (int j = 0; j < m; ++j) {
      double s = dot(ai, B + size_t(j) * k, k);
      ci[j] = acc ? ci[j] + s : s;
    }
  }
}

void matmul_tn_acc(const double* A, int n, int k, const double* B, int m, double* C) {
  // C(k x m) += A^T * B, accumulated row by row of A/B.
  for (int i = 0; i < n; ++i) {
    const double* ai = A + size_t(i) * k;
    const double* bi = B + size_t(i) * m;
    for (int kk = 0; kk < k; ++kk) {
      double a = ai[kk];
      double* __restrict ck = C + size_t(kk) * m;
      for (int j = 0; j < m; ++j) ck[j] += a * bi[j];
    }
  }
}

#endif

void softmax_row(double* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    sum += x[i];
  }
  double inv = 1.0 / sum;
  for (int i = 0; i < n; ++i) x[i] *= inv;
}

double logsumexp(const double* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  if (!std::isfinite(mx)) return mx;  // all -inf stays -inf
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += std::exp(x[i] - mx);
  return mx + std::log(sum);
}

double dot(const double* a, const double* b, int n) {
#if defined(__AVX512F__)
  __m512d s0 = _mm512_setzero_pd(), s1 = _mm512_setzero_pd();
  int i = 0;
  for (; i + 16 <= n; i += 16) {
    s0 = _mm512_fmadd_pd(_mm512_loadu_pd(a + i), _mm512_loadu_pd(b + i), s0);
    s1 = _mm512_fmadd_pd(_mm512_loadu_pd(a + i + 8), _mm512_loadu_pd(b + i + 8), s1);
  }
  if (i + 8 <= n) {
    s0 = _mm512_fmadd_pd(_mm512_loadu_pd(a + i), _mm512_loadu_pd(b + i), s0);
    i += 8;
  }
  if (i < n) {
    __mmask8 tail = __mmask8((1u << (n - i)) - 1u);
    s1 = _mm512_fmadd_pd(_mm512_maskz_loadu_pd(tail, a + i), _mm512_maskz_loadu_pd(tail, b + i),
                         s1);
  }
  return _mm512_reduce_add_pd(s0) + _mm512_reduce_add_pd(s1);
#else
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
#endif
}

void axpy(double alpha, const double* x, double* y, int n) {
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

double frobenius_norm(const double* x, size_t n) {
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += x[i] * x[i];
  return std::sqrt(s);
}

}  // namespace al
