#pragma once

// Row-range routines shared by the serial and OpenMP kernel drivers. A driver
// only decides which block ranges to hand out; arithmetic order inside a block
// never depends on the driver.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "hat/kernels.hpp"

namespace hat::kernels::detail {

inline constexpr std::size_t kGemmRowBlock = 4;

template <typename T>
inline constexpr std::size_t kGemmColBlock = 64 / sizeof(T) * 2;

template <typename T>
struct PackedGemm {
  const T* a = nullptr;  // m x k
  const T* b = nullptr;  // k x n
  std::vector<T> a_buffer;
  std::vector<T> b_buffer;
};

template <typename T>
void transpose_into(const T* src, std::size_t rows, std::size_t cols, std::vector<T>& dst) {
  dst.resize(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
}

template <typename T>
PackedGemm<T> pack_gemm(const GemmShape& s, std::span<const T> a, std::span<const T> b) {
  PackedGemm<T> p;
  if (s.trans_a) {
    transpose_into(a.data(), s.k, s.m, p.a_buffer);
    p.a = p.a_buffer.data();
  } else {
    p.a = a.data();
  }
  if (s.trans_b) {
    transpose_into(b.data(), s.n, s.k, p.b_buffer);
    p.b = p.b_buffer.data();
  } else {
    p.b = b.data();
  }
  return p;
}

inline std::size_t gemm_row_blocks(const GemmShape& s) {
  return (s.m + kGemmRowBlock - 1) / kGemmRowBlock;
}

/// Computes rows [4*block, 4*block+4) of C from packed (non-transposed) operands.
template <typename T>
void gemm_row_block(const GemmShape& s, const T* a, const T* b, T* c, std::size_t block) {
  constexpr std::size_t MR = kGemmRowBlock;
  constexpr std::size_t NR = kGemmColBlock<T>;
  const std::size_t n = s.n;
  const std::size_t k = s.k;
  const std::size_t i0 = block * MR;
  const std::size_t mr = std::min(MR, s.m - i0);

  for (std::size_t j0 = 0; j0 < n; j0 += NR) {
    const std::size_t nr = std::min(NR, n - j0);
    alignas(64) T acc[MR][NR] = {};
    if (mr == MR && nr == NR) {
      for (std::size_t p = 0; p < k; ++p) {
        const T* brow = b + p * n + j0;
        for (std::size_t r = 0; r < MR; ++r) {
          const T ar = a[(i0 + r) * k + p];
          for (std::size_t jj = 0; jj < NR; ++jj) acc[r][jj] += ar * brow[jj];
        }
      }
    } else {
      for (std::size_t p = 0; p < k; ++p) {
        const T* brow = b + p * n + j0;
        for (std::size_t r = 0; r < mr; ++r) {
          const T ar = a[(i0 + r) * k + p];
          for (std::size_t jj = 0; jj < nr; ++jj) acc[r][jj] += ar * brow[jj];
        }
      }
    }
    for (std::size_t r = 0; r < mr; ++r) {
      T* crow = c + (i0 + r) * n + j0;
      if (s.accumulate) {
        for (std::size_t jj = 0; jj < nr; ++jj) crow[jj] += acc[r][jj];
      } else {
        for (std::size_t jj = 0; jj < nr; ++jj) crow[jj] = acc[r][jj];
      }
    }
  }
}

template <typename T>
T dot(const T* x, const T* y, std::size_t n) {
  T sum = 0;
  for (std::size_t i = 0; i < n; ++i) sum += x[i] * y[i];
  return sum;
}

template <typename T>
const T* mask_row(const AttentionShape& s, std::span<const T> mask, std::size_t b,
                  std::size_t t) {
  const std::size_t base = s.mask_per_batch ? b * s.time * s.time : 0;
  return mask.data() + base + t * s.time;
}

/// Forward for one (batch, query frame) row across all heads.
template <typename T>
void attention_forward_row(const AttentionShape& s, std::span<const T> q,
                           std::span<const T> k, std::span<const T> v,
                           std::span<const T> mask, std::span<T> out, std::span<T> probs,
                           std::size_t row) {
  const std::size_t b = row / s.time;
  const std::size_t t = row % s.time;
  const std::size_t dh = s.head_dim();
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  const T* mrow = mask_row(s, mask, b, t);
  const T* qrow = q.data() + row * s.dim;
  T* orow = out.data() + row * s.dim;

  for (std::size_t h = 0; h < s.heads; ++h) {
    T* prow = probs.data() + ((b * s.heads + h) * s.time + t) * s.time;
    const T* qh = qrow + h * dh;
    T max_score = -std::numeric_limits<T>::infinity();
    for (std::size_t u = 0; u < s.time; ++u) {
      if (std::isinf(mrow[u]) && mrow[u] < 0) {
        prow[u] = 0;
        continue;
      }
      const T* kh = k.data() + (b * s.time + u) * s.dim + h * dh;
      const T score = dot(qh, kh, dh) * scale + mrow[u];
      prow[u] = score;
      max_score = std::max(max_score, score);
    }
    T total = 0;
    for (std::size_t u = 0; u < s.time; ++u) {
      if (std::isinf(mrow[u]) && mrow[u] < 0) continue;
      prow[u] = std::exp(prow[u] - max_score);
      total += prow[u];
    }
    const T inv_total = T{1} / total;
    T* oh = orow + h * dh;
    std::fill(oh, oh + dh, T{0});
    for (std::size_t u = 0; u < s.time; ++u) {
      if (std::isinf(mrow[u]) && mrow[u] < 0) continue;
      prow[u] *= inv_total;
      const T pu = prow[u];
      const T* vh = v.data() + (b * s.time + u) * s.dim + h * dh;
      for (std::size_t j = 0; j < dh; ++j) oh[j] += pu * vh[j];
    }
  }
}

/// Backward pass 1 for one query row: writes score gradients into scratch and
/// accumulates dq.
template <typename T>
void attention_backward_query_row(const AttentionShape& s, std::span<const T> k,
                                  std::span<const T> v, std::span<const T> probs,
                                  std::span<const T> dout, std::span<T> dq,
                                  std::span<T> scratch, std::size_t row) {
  const std::size_t b = row / s.time;
  const std::size_t t = row % s.time;
  const std::size_t dh = s.head_dim();
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  const T* dorow = dout.data() + row * s.dim;
  T* dqrow = dq.data() + row * s.dim;

  for (std::size_t h = 0; h < s.heads; ++h) {
    const std::size_t off = ((b * s.heads + h) * s.time + t) * s.time;
    const T* prow = probs.data() + off;
    T* dsrow = scratch.data() + off;
    const T* doh = dorow + h * dh;
    T weighted = 0;
    for (std::size_t u = 0; u < s.time; ++u) {
      if (prow[u] == T{0}) {
        dsrow[u] = 0;
        continue;
      }
      const T* vh = v.data() + (b * s.time + u) * s.dim + h * dh;
      dsrow[u] = dot(doh, vh, dh);
      weighted += prow[u] * dsrow[u];
    }
    T* dqh = dqrow + h * dh;
    for (std::size_t u = 0; u < s.time; ++u) {
      if (prow[u] == T{0}) continue;
      dsrow[u] = prow[u] * (dsrow[u] - weighted) * scale;
      const T* kh = k.data() + (b * s.time + u) * s.dim + h * dh;
      const T g = dsrow[u];
      for (std::size_t j = 0; j < dh; ++j) dqh[j] += g * kh[j];
    }
  }
}

/// Backward pass 2 for one key row: accumulates dk and dv.
template <typename T>
void attention_backward_key_row(const AttentionShape& s, std::span<const T> q,
                                std::span<const T> probs, std::span<const T> dout,
                                std::span<T> dk, std::span<T> dv,
                                std::span<const T> scratch, std::size_t row) {
  const std::size_t b = row / s.time;
  const std::size_t u = row % s.time;
  const std::size_t dh = s.head_dim();
  T* dkrow = dk.data() + row * s.dim;
  T* dvrow = dv.data() + row * s.dim;

  for (std::size_t h = 0; h < s.heads; ++h) {
    const std::size_t base = (b * s.heads + h) * s.time * s.time;
    T* dkh = dkrow + h * dh;
    T* dvh = dvrow + h * dh;
    for (std::size_t t = 0; t < s.time; ++t) {
      const T p = probs[base + t * s.time + u];
      if (p == T{0}) continue;
      const T g = scratch[base + t * s.time + u];
      const T* qh = q.data() + (b * s.time + t) * s.dim + h * dh;
      const T* doh = dout.data() + (b * s.time + t) * s.dim + h * dh;
      for (std::size_t j = 0; j < dh; ++j) {
        dkh[j] += g * qh[j];
        dvh[j] += p * doh[j];
      }
    }
  }
}

template <typename T>
void layer_norm_forward_row(const RowShape& s, std::span<const T> x, std::span<const T> gain,
                            std::span<const T> bias, T eps, std::span<T> y,
                            std::span<T> mean, std::span<T> rstd, std::size_t row) {
  const T* xr = x.data() + row * s.cols;
  T* yr = y.data() + row * s.cols;
  T mu = 0;
  for (std::size_t j = 0; j < s.cols; ++j) mu += xr[j];
  mu /= static_cast<T>(s.cols);
  T var = 0;
  for (std::size_t j = 0; j < s.cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
  var /= static_cast<T>(s.cols);
  const T r = T{1} / std::sqrt(var + eps);
  for (std::size_t j = 0; j < s.cols; ++j) yr[j] = (xr[j] - mu) * r * gain[j] + bias[j];
  mean[row] = mu;
  rstd[row] = r;
}

template <typename T>
void layer_norm_backward_row(const RowShape& s, std::span<const T> x, std::span<const T> gain,
                             std::span<const T> mean, std::span<const T> rstd,
                             std::span<const T> dy, std::span<T> dx, std::size_t row) {
  const T* xr = x.data() + row * s.cols;
  const T* dyr = dy.data() + row * s.cols;
  T* dxr = dx.data() + row * s.cols;
  const T mu = mean[row];
  const T r = rstd[row];
  T sum_g = 0;
  T sum_gx = 0;
  for (std::size_t j = 0; j < s.cols; ++j) {
    const T g = dyr[j] * gain[j];
    sum_g += g;
    sum_gx += g * (xr[j] - mu) * r;
  }
  const T inv_n = T{1} / static_cast<T>(s.cols);
  for (std::size_t j = 0; j < s.cols; ++j) {
    const T xhat = (xr[j] - mu) * r;
    const T g = dyr[j] * gain[j];
    dxr[j] += r * (g - sum_g * inv_n - xhat * sum_gx * inv_n);
  }
}

/// Column sums for the affine gradients; column-partitioned so drivers can
/// split work without reductions across threads.
template <typename T>
void layer_norm_affine_grad_col(const RowShape& s, std::span<const T> x,
                                std::span<const T> mean, std::span<const T> rstd,
                                std::span<const T> dy, std::span<T> dgain,
                                std::span<T> dbias, std::size_t col) {
  T sg = 0;
  T sb = 0;
  for (std::size_t i = 0; i < s.rows; ++i) {
    const T d = dy[i * s.cols + col];
    sg += d * (x[i * s.cols + col] - mean[i]) * rstd[i];
    sb += d;
  }
  dgain[col] += sg;
  dbias[col] += sb;
}

}  // namespace hat::kernels::detail
