#include <omp.h>

#include "hat/kernels.hpp"
#include "kernel_rows.hpp"

namespace hat::kernels::omp {

template <typename T>
void gemm(const GemmShape& s, std::span<const T> a, std::span<const T> b, std::span<T> c) {
  const auto packed = detail::pack_gemm(s, a, b);
  const auto blocks = static_cast<std::ptrdiff_t>(detail::gemm_row_blocks(s));
#pragma omp parallel for schedule(static) if (blocks > 8)
  for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
    detail::gemm_row_block(s, packed.a, packed.b, c.data(), static_cast<std::size_t>(blk));
  }
}

template <typename T>
void attention_forward(const AttentionShape& s, std::span<const T> q, std::span<const T> k,
                       std::span<const T> v, std::span<const T> mask, std::span<T> out,
                       std::span<T> probs) {
  const auto rows = static_cast<std::ptrdiff_t>(s.batch * s.time);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t row = 0; row < rows; ++row) {
    detail::attention_forward_row(s, q, k, v, mask, out, probs, static_cast<std::size_t>(row));
  }
}

template <typename T>
void attention_backward(const AttentionShape& s, std::span<const T> q, std::span<const T> k,
                        std::span<const T> v, std::span<const T> probs,
                        std::span<const T> dout, std::span<T> dq, std::span<T> dk,
                        std::span<T> dv, std::span<T> scratch) {
  const auto rows = static_cast<std::ptrdiff_t>(s.batch * s.time);
#pragma omp parallel
  {
#pragma omp for schedule(static)
    for (std::ptrdiff_t row = 0; row < rows; ++row) {
      detail::attention_backward_query_row(s, k, v, probs, dout, dq, scratch,
                                           static_cast<std::size_t>(row));
    }
#pragma omp for schedule(static)
    for (std::ptrdiff_t row = 0; row < rows; ++row) {
      detail::attention_backward_key_row<T>(s, q, probs, dout, dk, dv, scratch,
                                            static_cast<std::size_t>(row));
    }
  }
}

template <typename T>
void layer_norm_forward(const RowShape& s, std::span<const T> x, std::span<const T> gain,
                        std::span<const T> bias, T eps, std::span<T> y, std::span<T> mean,
                        std::span<T> rstd) {
  const auto rows = static_cast<std::ptrdiff_t>(s.rows);
#pragma omp parallel for schedule(static) if (rows > 64)
  for (std::ptrdiff_t row = 0; row < rows; ++row) {
    detail::layer_norm_forward_row(s, x, gain, bias, eps, y, mean, rstd,
                                   static_cast<std::size_t>(row));
  }
}

template <typename T>
void layer_norm_backward(const RowShape& s, std::span<const T> x, std::span<const T> gain,
                         std::span<const T> mean, std::span<const T> rstd,
                         std::span<const T> dy, std::span<T> dx, std::span<T> dgain,
                         std::span<T> dbias) {
  const auto rows = static_cast<std::ptrdiff_t>(s.rows);
  const auto cols = static_cast<std::ptrdiff_t>(s.cols);
#pragma omp parallel if (rows > 64)
  {
#pragma omp for schedule(static)
    for (std::ptrdiff_t row = 0; row < rows; ++row) {
      detail::layer_norm_backward_row(s, x, gain, mean, rstd, dy, dx,
                                      static_cast<std::size_t>(row));
    }
#pragma omp for schedule(static)
    for (std::ptrdiff_t col = 0; col < cols; ++col) {
      detail::layer_norm_affine_grad_col(s, x, mean, rstd, dy, dgain, dbias,
                                         static_cast<std::size_t>(col));
    }
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

HAT_INSTANTIATE(float)
HAT_INSTANTIATE(double)

}  // namespace hat::kernels::omp
