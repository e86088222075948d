#pragma once

// Low-level compute loops shared by the tensor ops. Every kernel exists twice:
// kernels::serial is the reference, kernels::par adds OpenMP over independent
// output rows. Per-row reduction order is identical in both, so results are
// bitwise equal at any thread count. The unqualified dispatchers pick one based
// on the thread cap and problem size.

#include <cmath>
#include <cstdint>
#include <limits>

#include "psvit/threading.hpp"

namespace psvit::kernels {

inline bool use_parallel(std::int64_t rows, std::int64_t work_per_row) {
    return thread_cap() > 1 && rows >= 2 && rows * work_per_row >= 16384;
}

namespace detail {

template <class T>
inline T dot(const T* a, const T* b, std::int64_t n) {
    T s = 0;
    for (std::int64_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <class T>
inline void axpy(T alpha, const T* x, T* y, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// C[m,n] += A[m,k] * B[k,n]; one output row per iteration, k ascending.
template <class T>
inline void matmul_nn_row(std::int64_t i, std::int64_t k, std::int64_t n, const T* a, const T* b,
                          T* c) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) axpy(arow[p], b + p * n, crow, n);
}

// C[m,n] += A[m,k] * B[n,k]^T
template <class T>
inline void matmul_nt_row(std::int64_t i, std::int64_t k, std::int64_t n, const T* a, const T* b,
                          T* c) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::int64_t j = 0; j < n; ++j) crow[j] += dot(arow, b + j * k, k);
}

// C[m,n] += A[k,m]^T * B[k,n]
template <class T>
inline void matmul_tn_row(std::int64_t i, std::int64_t k, std::int64_t m, std::int64_t n,
                          const T* a, const T* b, T* c) {
    T* crow = c + i * n;
    for (std::int64_t p = 0; p < k; ++p) axpy(a[p * m + i], b + p * n, crow, n);
}

template <class T>
inline void softmax_row(const T* x, T* y, std::int64_t n) {
    T mx = x[0];
    for (std::int64_t j = 1; j < n; ++j)
        if (x[j] > mx) mx = x[j];
    T sum = 0;
    for (std::int64_t j = 0; j < n; ++j) {
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
    }
    T inv = T(1) / sum;
    for (std::int64_t j = 0; j < n; ++j) y[j] *= inv;
}

// dx += y * (dy - sum(y*dy))
template <class T>
inline void softmax_bwd_row(const T* y, const T* dy, T* dx, std::int64_t n) {
    T acc = 0;
    for (std::int64_t j = 0; j < n; ++j) acc += y[j] * dy[j];
    for (std::int64_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - acc);
}

// y = (x - mean) * inv_std * gain + bias; stores mean and inv_std for backward.
template <class T>
inline void layernorm_row(const T* x, const T* gain, const T* bias, T* y, T* mean_out, T* inv_std,
                          std::int64_t n, T eps) {
    T mean = 0;
    for (std::int64_t j = 0; j < n; ++j) mean += x[j];
    mean /= T(n);
    T var = 0;
    for (std::int64_t j = 0; j < n; ++j) {
        T d = x[j] - mean;
        var += d * d;
    }
    var /= T(n);
    T istd = T(1) / std::sqrt(var + eps);
    *mean_out = mean;
    *inv_std = istd;
    for (std::int64_t j = 0; j < n; ++j) y[j] = (x[j] - mean) * istd * gain[j] + bias[j];
}

template <class T>
inline void layernorm_bwd_row(const T* x, const T* gain, const T* dy, T mean, T inv_std, T* dx,
                              std::int64_t n) {
    T m1 = 0, m2 = 0;
    for (std::int64_t j = 0; j < n; ++j) {
        T xhat = (x[j] - mean) * inv_std;
        T g = dy[j] * gain[j];
        m1 += g;
        m2 += g * xhat;
    }
    m1 /= T(n);
    m2 /= T(n);
    for (std::int64_t j = 0; j < n; ++j) {
        T xhat = (x[j] - mean) * inv_std;
        T g = dy[j] * gain[j];
        dx[j] += inv_std * (g - m1 - xhat * m2);
    }
}

// Masked softmax attention for one query row. Scores are staged in the weight
// row itself so no scratch is needed. Masked entries are skipped outright and
// end up exactly zero. A fully masked row yields zero weights and zero output.
template <class T>
inline void attn_fwd_row(std::int64_t nk, std::int64_t d, const T* qrow, const T* kmat,
                         const T* vmat, const std::uint8_t* mrow, T scale, T* wrow, T* orow) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::int64_t j = 0; j < nk; ++j) {
        if (mrow && !mrow[j]) {
            wrow[j] = 0;
            continue;
        }
        T s = scale * dot(qrow, kmat + j * d, d);
        wrow[j] = s;
        if (s > mx) mx = s;
    }
    for (std::int64_t j = 0; j < d; ++j) orow[j] = 0;
    if (mx == -std::numeric_limits<T>::infinity()) {
        for (std::int64_t j = 0; j < nk; ++j) wrow[j] = 0;
        return;
    }
    T sum = 0;
    for (std::int64_t j = 0; j < nk; ++j) {
        if (mrow && !mrow[j]) continue;
        T e = std::exp(wrow[j] - mx);
        wrow[j] = e;
        sum += e;
    }
    T inv = T(1) / sum;
    for (std::int64_t j = 0; j < nk; ++j) {
        if (mrow && !mrow[j]) continue;
        wrow[j] *= inv;
        axpy(wrow[j], vmat + j * d, orow, d);
    }
}

// Stage 1 of attention backward: per query row, compute ds (softmax-jacobian
// applied to dscores) and accumulate dq.
template <class T>
inline void attn_bwd_q_row(std::int64_t nk, std::int64_t d, const T* kmat, const T* vmat,
                           const T* wrow, const std::uint8_t* mrow, T scale, const T* dorow,
                           T* dsrow, T* dqrow) {
    T rowdot = 0;
    for (std::int64_t j = 0; j < nk; ++j) {
        if (mrow && !mrow[j]) {
            dsrow[j] = 0;
            continue;
        }
        T da = dot(dorow, vmat + j * d, d);
        dsrow[j] = da;
        rowdot += wrow[j] * da;
    }
    for (std::int64_t j = 0; j < nk; ++j) {
        if (mrow && !mrow[j]) continue;
        T ds = wrow[j] * (dsrow[j] - rowdot);
        dsrow[j] = ds;
        axpy(scale * ds, kmat + j * d, dqrow, d);
    }
}

// Stage 2: per key row, accumulate dk and dv over queries (ascending).
template <class T>
inline void attn_bwd_kv_row(std::int64_t nq, std::int64_t nk, std::int64_t d, std::int64_t j,
                            const T* qmat, const T* wmat, const T* dsmat,
                            const std::uint8_t* mask_rows, const T* domat, T scale, T* dkrow,
                            T* dvrow) {
    for (std::int64_t qi = 0; qi < nq; ++qi) {
        if (mask_rows && !mask_rows[qi * nk + j]) continue;
        T w = wmat[qi * nk + j];
        T ds = dsmat[qi * nk + j];
        if (w != 0) axpy(w, domat + qi * d, dvrow, d);
        if (ds != 0) axpy(scale * ds, qmat + qi * d, dkrow, d);
    }
}

// Valid 1-d correlation along rows: y[i,j] = sum_t x[i,j+t] * k[t].
template <class T>
inline void conv1d_row(const T* xrow, const T* kern, T* yrow, std::int64_t w, std::int64_t kw) {
    std::int64_t ow = w - kw + 1;
    for (std::int64_t j = 0; j < ow; ++j) yrow[j] = dot(xrow + j, kern, kw);
}

template <class T>
inline void conv1d_bwd_row(const T* dyrow, const T* kern, T* dxrow, std::int64_t w,
                           std::int64_t kw) {
    std::int64_t ow = w - kw + 1;
    for (std::int64_t c = 0; c < w; ++c) {
        std::int64_t jlo = c - kw + 1;
        if (jlo < 0) jlo = 0;
        std::int64_t jhi = c < ow - 1 ? c : ow - 1;
        T s = 0;
        for (std::int64_t j = jlo; j <= jhi; ++j) s += dyrow[j] * kern[c - j];
        dxrow[c] += s;
    }
}

}  // namespace detail

// ---------------------------------------------------------------- serial ----

namespace serial {

template <class T>
void matmul_nn(std::int64_t m, std::int64_t k, std::int64_t n, const T* a, const T* b, T* c) {
    for (std::int64_t i = 0; i < m; ++i) detail::matmul_nn_row(i, k, n, a, b, c);
}

template <class T>
void matmul_nt(std::int64_t m, std::int64_t k, std::int64_t n, const T* a, const T* b, T* c) {
    for (std::int64_t i = 0; i < m; ++i) detail::matmul_nt_row(i, k, n, a, b, c);
}

template <class T>
void matmul_tn(std::int64_t k, std::int64_t m, std::int64_t n, const T* a, const T* b, T* c) {
    for (std::int64_t i = 0; i < m; ++i) detail::matmul_tn_row(i, k, m, n, a, b, c);
}

template <class T>
void softmax_rows(std::int64_t rows, std::int64_t n, const T* x, T* y) {
    for (std::int64_t i = 0; i < rows; ++i) detail::softmax_row(x + i * n, y + i * n, n);
}

template <class T>
void softmax_bwd_rows(std::int64_t rows, std::int64_t n, const T* y, const T* dy, T* dx) {
    for (std::int64_t i = 0; i < rows; ++i)
        detail::softmax_bwd_row(y + i * n, dy + i * n, dx + i * n, n);
}

template <class T>
void layernorm_rows(std::int64_t rows, std::int64_t n, const T* x, const T* gain, const T* bias,
                    T* y, T* mean, T* inv_std, T eps) {
    for (std::int64_t i = 0; i < rows; ++i)
        detail::layernorm_row(x + i * n, gain, bias, y + i * n, mean + i, inv_std + i, n, eps);
}

template <class T>
void layernorm_bwd_rows(std::int64_t rows, std::int64_t n, const T* x, const T* gain, const T* dy,
                        const T* mean, const T* inv_std, T* dx) {
    for (std::int64_t i = 0; i < rows; ++i)
        detail::layernorm_bwd_row(x + i * n, gain, dy + i * n, mean[i], inv_std[i], dx + i * n, n);
}

// dgain[j] += sum_i dy[i,j]*xhat[i,j]; dbias[j] += sum_i dy[i,j].
// Parallel variant splits over columns, rows ascending either way.
template <class T>
void layernorm_bwd_affine(std::int64_t rows, std::int64_t n, const T* x, const T* dy,
                          const T* mean, const T* inv_std, T* dgain, T* dbias) {
    for (std::int64_t i = 0; i < rows; ++i) {
        const T* xrow = x + i * n;
        const T* dyrow = dy + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            dgain[j] += dyrow[j] * (xrow[j] - mean[i]) * inv_std[i];
            dbias[j] += dyrow[j];
        }
    }
}

template <class T>
void attn_forward(std::int64_t B, std::int64_t nq, std::int64_t nk, std::int64_t d, const T* q,
                  const T* k, const T* v, const std::uint8_t* mask, std::int64_t repeat, T scale,
                  T* w, T* out) {
    for (std::int64_t bq = 0; bq < B * nq; ++bq) {
        std::int64_t b = bq / nq, qi = bq % nq;
        const std::uint8_t* mrow = mask ? mask + ((b / repeat) * nq + qi) * nk : nullptr;
        detail::attn_fwd_row(nk, d, q + bq * d, k + b * nk * d, v + b * nk * d, mrow, scale,
                             w + bq * nk, out + bq * d);
    }
}

template <class T>
void attn_backward(std::int64_t B, std::int64_t nq, std::int64_t nk, std::int64_t d, const T* q,
                   const T* k, const T* v, const T* w, const std::uint8_t* mask,
                   std::int64_t repeat, T scale, const T* dout, T* ds_tmp, T* dq, T* dk, T* dv) {
    for (std::int64_t bq = 0; bq < B * nq; ++bq) {
        std::int64_t b = bq / nq, qi = bq % nq;
        const std::uint8_t* mrow = mask ? mask + ((b / repeat) * nq + qi) * nk : nullptr;
        detail::attn_bwd_q_row(nk, d, k + b * nk * d, v + b * nk * d, w + bq * nk, mrow, scale,
                               dout + bq * d, ds_tmp + bq * nk, dq + bq * d);
    }
    for (std::int64_t bj = 0; bj < B * nk; ++bj) {
        std::int64_t b = bj / nk, j = bj % nk;
        const std::uint8_t* mrows = mask ? mask + (b / repeat) * nq * nk : nullptr;
        detail::attn_bwd_kv_row(nq, nk, d, j, q + b * nq * d, w + b * nq * nk, ds_tmp + b * nq * nk,
                                mrows, dout + b * nq * d, scale, dk + bj * d, dv + bj * d);
    }
}

template <class T>
void conv1d_rows(std::int64_t rows, std::int64_t w, std::int64_t kw, const T* x, const T* kern,
                 T* y) {
    for (std::int64_t i = 0; i < rows; ++i)
        detail::conv1d_row(x + i * w, kern, y + i * (w - kw + 1), w, kw);
}

template <class T>
void conv1d_bwd_rows(std::int64_t rows, std::int64_t w, std::int64_t kw, const T* dy, const T* kern,
                     T* dx) {
    for (std::int64_t i = 0; i < rows; ++i)
        detail::conv1d_bwd_row(dy + i * (w - kw + 1), kern, dx + i * w, w, kw);
}

}  // namespace serial

// ------------------------------------------------------------------- par ----

namespace par {

template <class T>
void matmul_nn(std::int64_t m, std::int64_t k, std::int64_t n, const T* a, const T* b, T* c) {
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (std::int64_t i = 0; i < m; ++i) detail::matmul_nn_row(i, k, n, a, b, c);
}

template <class T>
void matmul_nt(std::int64_t m, std::int64_t k, std::int64_t n, const T* a, const T* b, T* c) {
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (std::int64_t i = 0; i < m; ++i) detail::matmul_nt_row(i, k, n, a, b, c);
}

template <class T>
void matmul_tn(std::int64_t k, std::int64_t m, std::int64_t n, const T* a, const T* b, T* c) {
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (std::int64_t i = 0; i < m; ++i) detail::matmul_tn_row(i, k, m, n, a, b, c);
}

template <class T>
void softmax_rows(std::int64_t rows, std::int64_t n, const T* x, T* y) {
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (std::int64_t i = 0; i < rows; ++i) detail::softmax_row(x + i * n, y + i * n, n);
}

template <class T>
void softmax_bwd_rows(std::int64_t rows, std::int64_t n, const T* y, const T* dy, T* dx) {
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (std::int64_t i = 0; i < rows; ++i)
        detail::softmax_bwd_row(y + i * n, dy + i * n, dx + i * n, n);
}

template <class T>
void layernorm_rows(std::int64_t rows, std::int64_t n, const T* x, const T* gain, const T* bias,
                    T* y, T* mean, T* inv_std, T eps) {
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (std::int64_t i = 0; i < rows; ++i)
        detail::layernorm_row(x + i * n, gain, bias, y + i * n, mean + i, inv_std + i, n, eps);
}

template <class T>
void layernorm_bwd_rows(std::int64_t rows, std::int64_t n, const T* x, const T* gain, const T* dy,
                        const T* mean, const T* inv_std, T* dx) {
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (std::int64_t i = 0; i < rows; ++i)
        detail::layernorm_bwd_row(x + i * n, gain, dy + i * n, mean[i], inv_std[i], dx + i * n, n);
}

template <class T>
void layernorm_bwd_affine(std::int64_t rows, std::int64_t n, const T* x, const T* dy,
                          const T* mean, const T* inv_std, T* dgain, T* dbias) {
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (std::int64_t j = 0; j < n; ++j) {
        T dg = 0, db = 0;
        for (std::int64_t i = 0; i < rows; ++i) {
            dg += dy[i * n + j] * (x[i * n + j] - mean[i]) * inv_std[i];
            db += dy[i * n + j];
        }
        dgain[j] += dg;
        dbias[j] += db;
    }
}

template <class T>
void attn_forward(std::int64_t B, std::int64_t nq, std::int64_t nk, std::int64_t d, const T* q,
                  const T* k, const T* v, const std::uint8_t* mask, std::int64_t repeat, T scale,
                  T* w, T* out) {
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (std::int64_t bq = 0; bq < B * nq; ++bq) {
        std::int64_t b = bq / nq, qi = bq % nq;
        const std::uint8_t* mrow = mask ? mask + ((b / repeat) * nq + qi) * nk : nullptr;
        detail::attn_fwd_row(nk, d, q + bq * d, k + b * nk * d, v + b * nk * d, mrow, scale,
                             w + bq * nk, out + bq * d);
    }
}

template <class T>
void attn_backward(std::int64_t B, std::int64_t nq, std::int64_t nk, std::int64_t d, const T* q,
                   const T* k, const T* v, const T* w, const std::uint8_t* mask,
                   std::int64_t repeat, T scale, const T* dout, T* ds_tmp, T* dq, T* dk, T* dv) {
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (std::int64_t bq = 0; bq < B * nq; ++bq) {
        std::int64_t b = bq / nq, qi = bq % nq;
        const std::uint8_t* mrow = mask ? mask + ((b / repeat) * nq + qi) * nk : nullptr;
        detail::attn_bwd_q_row(nk, d, k + b * nk * d, v + b * nk * d, w + bq * nk, mrow, scale,
                               dout + bq * d, ds_tmp + bq * nk, dq + bq * d);
    }
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (std::int64_t bj = 0; bj < B * nk; ++bj) {
        std::int64_t b = bj / nk, j = bj % nk;
        const std::uint8_t* mrows = mask ? mask + (b / repeat) * nq * nk : nullptr;
        detail::attn_bwd_kv_row(nq, nk, d, j, q + b * nq * d, w + b * nq * nk, ds_tmp + b * nq * nk,
                                mrows, dout + b * nq * d, scale, dk + bj * d, dv + bj * d);
    }
}

template <class T>
void conv1d_rows(std::int64_t rows, std::int64_t w, std::int64_t kw, const T* x, const T* kern,
                 T* y) {
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (std::int64_t i = 0; i < rows; ++i)
        detail::conv1d_row(x + i * w, kern, y + i * (w - kw + 1), w, kw);
}

template <class T>
void conv1d_bwd_rows(std::int64_t rows, std::int64_t w, std::int64_t kw, const T* dy, const T* kern,
                     T* dx) {
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (std::int64_t i = 0; i < rows; ++i)
        detail::conv1d_bwd_row(dy + i * (w - kw + 1), kern, dx + i * w, w, kw);
}

}  // namespace par

// -------------------------------------------------------------- dispatch ----

template <class T>
void matmul_nn(std::int64_t m, std::int64_t k, std::int64_t n, const T* a, const T* b, T* c) {
    if (use_parallel(m, k * n)) par::matmul_nn(m, k, n, a, b, c);
    else serial::matmul_nn(m, k, n, a, b, c);
}

template <class T>
void matmul_nt(std::int64_t m, std::int64_t k, std::int64_t n, const T* a, const T* b, T* c) {
    if (use_parallel(m, k * n)) par::matmul_nt(m, k, n, a, b, c);
    else serial::matmul_nt(m, k, n, a, b, c);
}

template <class T>
void matmul_tn(std::int64_t k, std::int64_t m, std::int64_t n, const T* a, const T* b, T* c) {
    if (use_parallel(m, k * n)) par::matmul_tn(k, m, n, a, b, c);
    else serial::matmul_tn(k, m, n, a, b, c);
}

template <class T>
void softmax_rows(std::int64_t rows, std::int64_t n, const T* x, T* y) {
    if (use_parallel(rows, n)) par::softmax_rows(rows, n, x, y);
    else serial::softmax_rows(rows, n, x, y);
}

template <class T>
void softmax_bwd_rows(std::int64_t rows, std::int64_t n, const T* y, const T* dy, T* dx) {
    if (use_parallel(rows, n)) par::softmax_bwd_rows(rows, n, y, dy, dx);
    else serial::softmax_bwd_rows(rows, n, y, dy, dx);
}

template <class T>
void layernorm_rows(std::int64_t rows, std::int64_t n, const T* x, const T* gain, const T* bias,
                    T* y, T* mean, T* inv_std, T eps) {
    if (use_parallel(rows, n)) par::layernorm_rows(rows, n, x, gain, bias, y, mean, inv_std, eps);
    else serial::layernorm_rows(rows, n, x, gain, bias, y, mean, inv_std, eps);
}

template <class T>
void layernorm_bwd_rows(std::int64_t rows, std::int64_t n, const T* x, const T* gain, const T* dy,
                        const T* mean, const T* inv_std, T* dx) {
    if (use_parallel(rows, n)) par::layernorm_bwd_rows(rows, n, x, gain, dy, mean, inv_std, dx);
    else serial::layernorm_bwd_rows(rows, n, x, gain, dy, mean, inv_std, dx);
}

template <class T>
void layernorm_bwd_affine(std::int64_t rows, std::int64_t n, const T* x, const T* dy,
                          const T* mean, const T* inv_std, T* dgain, T* dbias) {
    if (use_parallel(n, rows)) par::layernorm_bwd_affine(rows, n, x, dy, mean, inv_std, dgain, dbias);
    else serial::layernorm_bwd_affine(rows, n, x, dy, mean, inv_std, dgain, dbias);
}

template <class T>
void attn_forward(std::int64_t B, std::int64_t nq, std::int64_t nk, std::int64_t d, const T* q,
                  const T* k, const T* v, const std::uint8_t* mask, std::int64_t repeat, T scale,
                  T* w, T* out) {
    if (use_parallel(B * nq, nk * d)) par::attn_forward(B, nq, nk, d, q, k, v, mask, repeat, scale, w, out);
    else serial::attn_forward(B, nq, nk, d, q, k, v, mask, repeat, scale, w, out);
}

template <class T>
void attn_backward(std::int64_t B, std::int64_t nq, std::int64_t nk, std::int64_t d, const T* q,
                   const T* k, const T* v, const T* w, const std::uint8_t* mask,
                   std::int64_t repeat, T scale, const T* dout, T* ds_tmp, T* dq, T* dk, T* dv) {
    if (use_parallel(B * nq, nk * d))
        par::attn_backward(B, nq, nk, d, q, k, v, w, mask, repeat, scale, dout, ds_tmp, dq, dk, dv);
    else
        serial::attn_backward(B, nq, nk, d, q, k, v, w, mask, repeat, scale, dout, ds_tmp, dq, dk,
                              dv);
}

template <class T>
void conv1d_rows(std::int64_t rows, std::int64_t w, std::int64_t kw, const T* x, const T* kern,
                 T* y) {
    if (use_parallel(rows, w * kw)) par::conv1d_rows(rows, w, kw, x, kern, y);
    else serial::conv1d_rows(rows, w, kw, x, kern, y);
}

template <class T>
void conv1d_bwd_rows(std::int64_t rows, std::int64_t w, std::int64_t kw, const T* dy, const T* kern,
                     T* dx) {
    if (use_parallel(rows, w * kw)) par::conv1d_bwd_rows(rows, w, kw, dy, kern, dx);
    else serial::conv1d_bwd_rows(rows, w, kw, dy, kern, dx);
}

}  // namespace psvit::kernels
