#include <atomic>

#include "hat/kernels.hpp"
#include "kernel_rows.hpp"

namespace hat::kernels {

namespace {
std::atomic<Backend> g_backend{Backend::kParallel};
}  // namespace

void set_backend(Backend b) { g_backend.store(b); }
Backend backend() { return g_backend.load(); }

namespace serial {

template <typename T>
void gemm(const GemmShape& s, std::span<const T> a, std::span<const T> b, std::span<T> c) {
  const auto packed = detail::pack_gemm(s, a, b);
  const std::size_t blocks = detail::gemm_row_blocks(s);
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    detail::gemm_row_block(s, packed.a, packed.b, c.data(), blk);
  }
}

template <typename T>
void attention_forward(const AttentionShape& s, std::span<const T> q, std::span<const T> k,
                       std::span<const T> v, std::span<const T> mask, std::span<T> out,
                       std::span<T> probs) {
  for (std::size_t row = 0; row < s.batch * s.time; ++row) {
    detail::attention_forward_row(s, q, k, v, mask, out, probs, row);
  }
}

template <typename T>
void attention_backward(const AttentionShape& s, std::span<const T> q, std::span<const T> k,
                        std::span<const T> v, std::span<const T> probs,
                        std::span<const T> dout, std::span<T> dq, std::span<T> dk,
                        std::span<T> dv, std::span<T> scratch) {
  const std::size_t rows = s.batch * s.time;
  for (std::size_t row = 0; row < rows; ++row) {
    detail::attention_backward_query_row(s, k, v, probs, dout, dq, scratch, row);
  }
  for (std::size_t row = 0; row < rows; ++row) {
    detail::attention_backward_key_row<T>(s, q, probs, dout, dk, dv, scratch, row);
  }
}

template <typename T>
void layer_norm_forward(const RowShape& s, std::span<const T> x, std::span<const T> gain,
                        std::span<const T> bias, T eps, std::span<T> y, std::span<T> mean,
                        std::span<T> rstd) {
  for (std::size_t row = 0; row < s.rows; ++row) {
    detail::layer_norm_forward_row(s, x, gain, bias, eps, y, mean, rstd, row);
  }
}

template <typename T>
void layer_norm_backward(const RowShape& s, std::span<const T> x, std::span<const T> gain,
                         std::span<const T> mean, std::span<const T> rstd,
                         std::span<const T> dy, std::span<T> dx, std::span<T> dgain,
                         std::span<T> dbias) {
  for (std::size_t row = 0; row < s.rows; ++row) {
    detail::layer_norm_backward_row(s, x, gain, mean, rstd, dy, dx, row);
  }
  for (std::size_t col = 0; col < s.cols; ++col) {
    detail::layer_norm_affine_grad_col(s, x, mean, rstd, dy, dgain, dbias, col);
  }
}

}  // namespace serial

// Dispatch.

template <typename T>
void gemm(const GemmShape& s, std::span<const T> a, std::span<const T> b, std::span<T> c) {
  if (backend() == Backend::kParallel) {
    omp::gemm(s, a, b, c);
  } else {
    serial::gemm(s, a, b, c);
  }
}

template <typename T>
void attention_forward(const AttentionShape& s, std::span<const T> q, std::span<const T> k,
                       std::span<const T> v, std::span<const T> mask, std::span<T> out,
                       std::span<T> probs) {
  if (backend() == Backend::kParallel) {
    omp::attention_forward(s, q, k, v, mask, out, probs);
  } else {
    serial::attention_forward(s, q, k, v, mask, out, probs);
  }
}

template <typename T>
void attention_backward(const AttentionShape& s, std::span<const T> q, std::span<const T> k,
                        std::span<const T> v, std::span<const T> probs,
                        std::span<const T> dout, std::span<T> dq, std::span<T> dk,
                        std::span<T> dv, std::span<T> scratch) {
  if (backend() == Backend::kParallel) {
    omp::attention_backward(s, q, k, v, probs, dout, dq, dk, dv, scratch);
  } else {
    serial::attention_backward(s, q, k, v, probs, dout, dq, dk, dv, scratch);
  }
}

template <typename T>
void layer_norm_forward(const RowShape& s, std::span<const T> x, std::span<const T> gain,
                        std::span<const T> bias, T eps, std::span<T> y, std::span<T> mean,
                        std::span<T> rstd) {
  if (backend() == Backend::kParallel) {
    omp::layer_norm_forward(s, x, gain, bias, eps, y, mean, rstd);
  } else {
    serial::layer_norm_forward(s, x, gain, bias, eps, y, mean, rstd);
  }
}

template <typename T>
void layer_norm_backward(const RowShape& s, std::span<const T> x, std::span<const T> gain,
                         std::span<const T> mean, std::span<const T> rstd,
                         std::span<const T> dy, std::span<T> dx, std::span<T> dgain,
                         std::span<T> dbias) {
  if (backend() == Backend::kParallel) {
    omp::layer_norm_backward(s, x, gain, mean, rstd, dy, dx, dgain, dbias);
  } else {
    serial::layer_norm_backward(s, x, gain, mean, rstd, dy, dx, dgain, dbias);
  }
}

#define HAT_INSTANTIATE(T)                                                                 \
  template void gemm<T>(const GemmShape&, std::span<const T>, std::span<const T>,          \
                        std::span<T>);                                                     \
  template void attention_forward<T>(const AttentionShape&, std::span<const T>,            \
                                     std::span<const T>, std::span<const T>,               \
                                     std::span<const T>, std::span<T>, std::span<T>);      \
  template void attention_backward<T>(const AttentionShape&, std::span<const T>,           \
                                      std::span<const T>, std::span<const T>,              \
                                      std::span<const T>, std::span<const T>, std::span<T>, \
                                      std::span<T>, std::span<T>, std::span<T>);           \
  template void layer_norm_forward<T>(const RowShape&, std::span<const T>,                 \
                                      std::span<const T>, std::span<const T>, T,           \
                                      std::span<T>, std::span<T>, std::span<T>);           \
  template void layer_norm_backward<T>(const RowShape&, std::span<const T>,                \
                                       std::span<const T>, std::span<const T>,             \
                                       std::span<const T>, std::span<const T>,             \
                                       std::span<T>, std::span<T>, std::span<T>);

namespace serial {
HAT_INSTANTIATE(float)
HAT_INSTANTIATE(double)
}  // namespace serial

HAT_INSTANTIATE(float)
HAT_INSTANTIATE(double)

}  // namespace hat::kernels
