#pragma once

#include <cmath>
#include <cstddef>

// Numeric inner loops. Two lanes:
//   remem::kernels::ref  - naive serial reference, kept as the ground truth
//                          the tests compare against
//   remem::kernels       - OpenMP lane used by the engine; parallelism is only
//                          over independent output rows / (batch, head) pairs
//                          and every output element is accumulated in the same
//                          order as the reference, so both lanes round
//                          identically and results are bit-equal at any
//                          thread count.
// bench_kernels times the two lanes against each other.

namespace remem::kernels {

int max_threads();
void set_max_threads(int n);

namespace detail {

// one (batch, head) block of the attention products; block pointers are
// pre-offset to (i*t)*ld + h*dh, token rows are ld apart, scores t x t
// contiguous
template <class T>
void attn_scores_pair(std::size_t t, std::size_t dh, std::size_t ld, const T* q, const T* k, T* s,
                      T scale) {
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t c = 0; c < t; ++c) {
      T acc = T(0);
      const T* qr = q + r * ld;
      const T* kc = k + c * ld;
      for (std::size_t e = 0; e < dh; ++e) acc += qr[e] * kc[e];
      s[r * t + c] = acc * scale;
    }
}

template <class T>
void attn_scores_bwd_pair(std::size_t t, std::size_t dh, std::size_t ld, const T* q, const T* k,
                          const T* ds, T* dq, T* dk, T scale) {
  if (dq)
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t e = 0; e < dh; ++e) {
        T acc = T(0);
        for (std::size_t c = 0; c < t; ++c) acc += ds[r * t + c] * k[c * ld + e];
        dq[r * ld + e] += acc * scale;
      }
  if (dk)
    for (std::size_t c = 0; c < t; ++c)
      for (std::size_t e = 0; e < dh; ++e) {
        T acc = T(0);
        for (std::size_t r = 0; r < t; ++r) acc += ds[r * t + c] * q[r * ld + e];
        dk[c * ld + e] += acc * scale;
      }
}

template <class T>
void attn_context_pair(std::size_t t, std::size_t dh, std::size_t ld, const T* p, const T* v,
                       T* out) {
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t e = 0; e < dh; ++e) {
      T acc = T(0);
      for (std::size_t c = 0; c < t; ++c) acc += p[r * t + c] * v[c * ld + e];
      out[r * ld + e] = acc;
    }
}

template <class T>
void attn_context_bwd_pair(std::size_t t, std::size_t dh, std::size_t ld, const T* p, const T* v,
                           const T* dout, T* dp, T* dv) {
  if (dp)
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t c = 0; c < t; ++c) {
        T acc = T(0);
        for (std::size_t e = 0; e < dh; ++e) acc += dout[r * ld + e] * v[c * ld + e];
        dp[r * t + c] += acc;
      }
  if (dv)
    for (std::size_t c = 0; c < t; ++c)
      for (std::size_t e = 0; e < dh; ++e) {
        T acc = T(0);
        for (std::size_t r = 0; r < t; ++r) acc += p[r * t + c] * dout[r * ld + e];
        dv[c * ld + e] += acc;
      }
}

template <class T>
void softmax_row(std::size_t n, const T* xr, T* yr, T inv_temp) {
  T mx = xr[0];
  for (std::size_t j = 1; j < n; ++j) mx = xr[j] > mx ? xr[j] : mx;
  T sum = T(0);
  for (std::size_t j = 0; j < n; ++j) {
    yr[j] = std::exp((xr[j] - mx) * inv_temp);
    sum += yr[j];
  }
  T inv = T(1) / sum;
  for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
}

template <class T>
void softmax_row_bwd(std::size_t n, const T* yr, const T* dyr, T* dxr, T inv_temp) {
  T dot = T(0);
  for (std::size_t j = 0; j < n; ++j) dot += yr[j] * dyr[j];
  for (std::size_t j = 0; j < n; ++j) dxr[j] += inv_temp * yr[j] * (dyr[j] - dot);
}

template <class T>
void layernorm_row(std::size_t d, const T* xr, const T* gain, const T* bias, T eps, T* yr,
                   T* mean, T* rstd) {
  T mu = T(0);
  for (std::size_t j = 0; j < d; ++j) mu += xr[j];
  mu /= T(d);
  T var = T(0);
  for (std::size_t j = 0; j < d; ++j) {
    T dv = xr[j] - mu;
    var += dv * dv;
  }
  var /= T(d);
  T rs = T(1) / std::sqrt(var + eps);
  *mean = mu;
  *rstd = rs;
  for (std::size_t j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * rs * gain[j] + bias[j];
}

template <class T>
void layernorm_row_bwd_x(std::size_t d, const T* xr, const T* gain, T mean, T rstd, const T* dyr,
                         T* dxr) {
  T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
  for (std::size_t j = 0; j < d; ++j) {
    T xhat = (xr[j] - mean) * rstd;
    T dxhat = dyr[j] * gain[j];
    sum_dxhat += dxhat;
    sum_dxhat_xhat += dxhat * xhat;
  }
  T inv_d = T(1) / T(d);
  for (std::size_t j = 0; j < d; ++j) {
    T xhat = (xr[j] - mean) * rstd;
    T dxhat = dyr[j] * gain[j];
    dxr[j] += rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
  }
}

}  // namespace detail

namespace ref {

// C[m x n] (+)= A[m x k] * B[k x n]
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = accumulate ? c[i * n + j] : T(0);
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
}

// C[m x n] (+)= A[m x k] * B[n x k]^T
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = accumulate ? c[i * n + j] : T(0);
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      c[i * n + j] = acc;
    }
}

// C[m x n] (+)= A[k x m]^T * B[k x n]
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = accumulate ? c[i * n + j] : T(0);
      for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[p * n + j];
      c[i * n + j] = acc;
    }
}

template <class T>
void softmax_rows(std::size_t rows, std::size_t n, const T* x, T* y, T inv_temp) {
  for (std::size_t r = 0; r < rows; ++r) detail::softmax_row(n, x + r * n, y + r * n, inv_temp);
}

template <class T>
void softmax_rows_bwd(std::size_t rows, std::size_t n, const T* y, const T* dy, T* dx,
                      T inv_temp) {
  for (std::size_t r = 0; r < rows; ++r)
    detail::softmax_row_bwd(n, y + r * n, dy + r * n, dx + r * n, inv_temp);
}

template <class T>
void layernorm_rows(std::size_t rows, std::size_t d, const T* x, const T* gain, const T* bias,
                    T eps, T* y, T* mean, T* rstd) {
  for (std::size_t r = 0; r < rows; ++r)
    detail::layernorm_row(d, x + r * d, gain, bias, eps, y + r * d, mean + r, rstd + r);
}

template <class T>
void layernorm_rows_bwd_x(std::size_t rows, std::size_t d, const T* x, const T* gain,
                          const T* mean, const T* rstd, const T* dy, T* dx) {
  for (std::size_t r = 0; r < rows; ++r)
    detail::layernorm_row_bwd_x(d, x + r * d, gain, mean[r], rstd[r], dy + r * d, dx + r * d);
}

template <class T>
void layernorm_rows_bwd_affine(std::size_t rows, std::size_t d, const T* x, const T* mean,
                               const T* rstd, const T* dy, T* dgain, T* dbias) {
  for (std::size_t j = 0; j < d; ++j) {
    T dg = T(0), db = T(0);
    for (std::size_t r = 0; r < rows; ++r) {
      T xhat = (x[r * d + j] - mean[r]) * rstd[r];
      dg += dy[r * d + j] * xhat;
      db += dy[r * d + j];
    }
    dgain[j] += dg;
    dbias[j] += db;
  }
}

template <class T>
void attn_scores(std::size_t b, std::size_t heads, std::size_t t, std::size_t dh, const T* q,
                 const T* k, T* s, T scale) {
  std::size_t d = heads * dh;
  for (std::size_t pair = 0; pair < b * heads; ++pair) {
    std::size_t i = pair / heads, h = pair % heads;
    detail::attn_scores_pair(t, dh, d, q + i * t * d + h * dh, k + i * t * d + h * dh,
                             s + pair * t * t, scale);
  }
}

template <class T>
void attn_scores_bwd(std::size_t b, std::size_t heads, std::size_t t, std::size_t dh, const T* q,
                     const T* k, const T* ds, T* dq, T* dk, T scale) {
  std::size_t d = heads * dh;
  for (std::size_t pair = 0; pair < b * heads; ++pair) {
    std::size_t i = pair / heads, h = pair % heads;
    detail::attn_scores_bwd_pair(t, dh, d, q + i * t * d + h * dh, k + i * t * d + h * dh,
                                 ds + pair * t * t, dq ? dq + i * t * d + h * dh : nullptr,
                                 dk ? dk + i * t * d + h * dh : nullptr, scale);
  }
}

template <class T>
void attn_context(std::size_t b, std::size_t heads, std::size_t t, std::size_t dh, const T* p,
                  const T* v, T* out) {
  std::size_t d = heads * dh;
  for (std::size_t pair = 0; pair < b * heads; ++pair) {
    std::size_t i = pair / heads, h = pair % heads;
    detail::attn_context_pair(t, dh, d, p + pair * t * t, v + i * t * d + h * dh,
                              out + i * t * d + h * dh);
  }
}

template <class T>
void attn_context_bwd(std::size_t b, std::size_t heads, std::size_t t, std::size_t dh, const T* p,
                      const T* v, const T* dout, T* dp, T* dv) {
  std::size_t d = heads * dh;
  for (std::size_t pair = 0; pair < b * heads; ++pair) {
    std::size_t i = pair / heads, h = pair % heads;
    detail::attn_context_bwd_pair(t, dh, d, p + pair * t * t, v + i * t * d + h * dh,
                                  dout + i * t * d + h * dh, dp ? dp + pair * t * t : nullptr,
                                  dv ? dv + i * t * d + h * dh : nullptr);
  }
}

template <class T>
void colsum_acc(std::size_t rows, std::size_t n, const T* x, T* out) {
  for (std::size_t j = 0; j < n; ++j) {
    T acc = T(0);
    for (std::size_t r = 0; r < rows; ++r) acc += x[r * n + j];
    out[j] += acc;
  }
}

}  // namespace ref

// production lane: identical per-element arithmetic, OpenMP over independent
// output partitions

template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
#pragma omp parallel for schedule(static) num_threads(max_threads()) \
    if (max_threads() > 1 && m > 1)
  for (std::size_t i = 0; i < m; ++i) {
    T* cr = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) cr[j] = T(0);
    const T* ar = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      T av = ar[p];
      const T* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
#pragma omp parallel for schedule(static) num_threads(max_threads()) \
    if (max_threads() > 1 && m > 1)
  for (std::size_t i = 0; i < m; ++i) {
    const T* ar = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* br = b + j * k;
      T acc = accumulate ? c[i * n + j] : T(0);
      for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
      c[i * n + j] = acc;
    }
  }
}

template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
#pragma omp parallel for schedule(static) num_threads(max_threads()) \
    if (max_threads() > 1 && m > 1)
  for (std::size_t i = 0; i < m; ++i) {
    T* cr = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) cr[j] = T(0);
    for (std::size_t p = 0; p < k; ++p) {
      T av = a[p * m + i];
      const T* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

template <class T>
void softmax_rows(std::size_t rows, std::size_t n, const T* x, T* y, T inv_temp) {
#pragma omp parallel for schedule(static) num_threads(max_threads()) \
    if (max_threads() > 1 && rows > 1)
  for (std::size_t r = 0; r < rows; ++r) detail::softmax_row(n, x + r * n, y + r * n, inv_temp);
}

template <class T>
void softmax_rows_bwd(std::size_t rows, std::size_t n, const T* y, const T* dy, T* dx,
                      T inv_temp) {
#pragma omp parallel for schedule(static) num_threads(max_threads()) \
    if (max_threads() > 1 && rows > 1)
  for (std::size_t r = 0; r < rows; ++r)
    detail::softmax_row_bwd(n, y + r * n, dy + r * n, dx + r * n, inv_temp);
}

template <class T>
void layernorm_rows(std::size_t rows, std::size_t d, const T* x, const T* gain, const T* bias,
                    T eps, T* y, T* mean, T* rstd) {
#pragma omp parallel for schedule(static) num_threads(max_threads()) \
    if (max_threads() > 1 && rows > 1)
  for (std::size_t r = 0; r < rows; ++r)
    detail::layernorm_row(d, x + r * d, gain, bias, eps, y + r * d, mean + r, rstd + r);
}

template <class T>
void layernorm_rows_bwd_x(std::size_t rows, std::size_t d, const T* x, const T* gain,
                          const T* mean, const T* rstd, const T* dy, T* dx) {
#pragma omp parallel for schedule(static) num_threads(max_threads()) \
    if (max_threads() > 1 && rows > 1)
  for (std::size_t r = 0; r < rows; ++r)
    detail::layernorm_row_bwd_x(d, x + r * d, gain, mean[r], rstd[r], dy + r * d, dx + r * d);
}

template <class T>
void layernorm_rows_bwd_affine(std::size_t rows, std::size_t d, const T* x, const T* mean,
                               const T* rstd, const T* dy, T* dgain, T* dbias) {
#pragma omp parallel for schedule(static) num_threads(max_threads()) \
    if (max_threads() > 1 && d > 1)
  for (std::size_t j = 0; j < d; ++j) {
    T dg = T(0), db = T(0);
    for (std::size_t r = 0; r < rows; ++r) {
      T xhat = (x[r * d + j] - mean[r]) * rstd[r];
      dg += dy[r * d + j] * xhat;
      db += dy[r * d + j];
    }
    dgain[j] += dg;
    dbias[j] += db;
  }
}

template <class T>
void attn_scores(std::size_t b, std::size_t heads, std::size_t t, std::size_t dh, const T* q,
                 const T* k, T* s, T scale) {
  std::size_t d = heads * dh;
#pragma omp parallel for schedule(static) num_threads(max_threads()) \
    if (max_threads() > 1 && b * heads > 1)
  for (std::size_t pair = 0; pair < b * heads; ++pair) {
    std::size_t i = pair / heads, h = pair % heads;
    detail::attn_scores_pair(t, dh, d, q + i * t * d + h * dh, k + i * t * d + h * dh,
                             s + pair * t * t, scale);
  }
}

template <class T>
void attn_scores_bwd(std::size_t b, std::size_t heads, std::size_t t, std::size_t dh, const T* q,
                     const T* k, const T* ds, T* dq, T* dk, T scale) {
  std::size_t d = heads * dh;
  // each pair touches its own row strip and head columns of dq/dk, so pairs
  // are write-disjoint
#pragma omp parallel for schedule(static) num_threads(max_threads()) \
    if (max_threads() > 1 && b * heads > 1)
  for (std::size_t pair = 0; pair < b * heads; ++pair) {
    std::size_t i = pair / heads, h = pair % heads;
    detail::attn_scores_bwd_pair(t, dh, d, q + i * t * d + h * dh, k + i * t * d + h * dh,
                                 ds + pair * t * t, dq ? dq + i * t * d + h * dh : nullptr,
                                 dk ? dk + i * t * d + h * dh : nullptr, scale);
  }
}

template <class T>
void attn_context(std::size_t b, std::size_t heads, std::size_t t, std::size_t dh, const T* p,
                  const T* v, T* out) {
  std::size_t d = heads * dh;
#pragma omp parallel for schedule(static) num_threads(max_threads()) \
    if (max_threads() > 1 && b * heads > 1)
  for (std::size_t pair = 0; pair < b * heads; ++pair) {
    std::size_t i = pair / heads, h = pair % heads;
    detail::attn_context_pair(t, dh, d, p + pair * t * t, v + i * t * d + h * dh,
                              out + i * t * d + h * dh);
  }
}

template <class T>
void attn_context_bwd(std::size_t b, std::size_t heads, std::size_t t, std::size_t dh, const T* p,
                      const T* v, const T* dout, T* dp, T* dv) {
  std::size_t d = heads * dh;
#pragma omp parallel for schedule(static) num_threads(max_threads()) \
    if (max_threads() > 1 && b * heads > 1)
  for (std::size_t pair = 0; pair < b * heads; ++pair) {
    std::size_t i = pair / heads, h = pair % heads;
    detail::attn_context_bwd_pair(t, dh, d, p + pair * t * t, v + i * t * d + h * dh,
                                  dout + i * t * d + h * dh, dp ? dp + pair * t * t : nullptr,
                                  dv ? dv + i * t * d + h * dh : nullptr);
  }
}

template <class T>
void colsum_acc(std::size_t rows, std::size_t n, const T* x, T* out) {
#pragma omp parallel for schedule(static) num_threads(max_threads()) \
    if (max_threads() > 1 && n > 1)
  for (std::size_t j = 0; j < n; ++j) {
    T acc = T(0);
    for (std::size_t r = 0; r < rows; ++r) acc += x[r * n + j];
    out[j] += acc;
  }
}

}  // namespace remem::kernels
