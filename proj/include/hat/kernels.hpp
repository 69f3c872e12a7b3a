#pragma once

// Low-level dense kernels behind the differentiable ops.
//
// Every kernel has a serial driver and an OpenMP driver. Both run the same
// per-row routine over the same row blocks, so the parallel result is
// bit-identical to the serial one; the serial driver is what the
// verification suite compares against.

#include <cstddef>
#include <span>

namespace hat::kernels {

enum class Backend { kSerial, kParallel };

void set_backend(Backend backend);
Backend backend();

/// Restores the previous backend on scope exit.
class ScopedBackend {
 public:
  explicit ScopedBackend(Backend b) : previous_(backend()) { set_backend(b); }
  ~ScopedBackend() { set_backend(previous_); }
  ScopedBackend(const ScopedBackend&) = delete;
  ScopedBackend& operator=(const ScopedBackend&) = delete;

 private:
  Backend previous_;
};

/// C[m x n] (+)= op(A) op(B). A is m x k (k x m when trans_a), B is k x n
/// (n x k when trans_b), all row-major and contiguous.
struct GemmShape {
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t k = 0;
  bool trans_a = false;
  bool trans_b = false;
  bool accumulate = false;
};

/// Multi-head attention over [batch, time, dim] with `heads` equal column
/// slices. The additive mask is [time, time], or [batch, time, time] when
/// mask_per_batch is set; -inf entries are skipped entirely.
struct AttentionShape {
  std::size_t batch = 1;
  std::size_t time = 0;
  std::size_t dim = 0;
  std::size_t heads = 1;
  bool mask_per_batch = false;

  std::size_t head_dim() const { return dim / heads; }
  std::size_t probs_size() const { return batch * heads * time * time; }
};

struct RowShape {
  std::size_t rows = 0;
  std::size_t cols = 0;
};

#define HAT_KERNEL_DECLS                                                                \
  template <typename T>                                                                 \
  void gemm(const GemmShape& s, std::span<const T> a, std::span<const T> b,             \
            std::span<T> c);                                                            \
  /* probs receives softmax weights, [batch, heads, time, time]. */                     \
  template <typename T>                                                                 \
  void attention_forward(const AttentionShape& s, std::span<const T> q,                 \
                         std::span<const T> k, std::span<const T> v,                    \
                         std::span<const T> mask, std::span<T> out, std::span<T> probs); \
  /* Gradients are accumulated into dq, dk, dv. scratch holds probs_size() values. */   \
  template <typename T>                                                                 \
  void attention_backward(const AttentionShape& s, std::span<const T> q,                \
                          std::span<const T> k, std::span<const T> v,                   \
                          std::span<const T> probs, std::span<const T> dout,            \
                          std::span<T> dq, std::span<T> dk, std::span<T> dv,            \
                          std::span<T> scratch);                                        \
  template <typename T>                                                                 \
  void layer_norm_forward(const RowShape& s, std::span<const T> x,                      \
                          std::span<const T> gain, std::span<const T> bias, T eps,      \
                          std::span<T> y, std::span<T> mean, std::span<T> rstd);        \
  /* dx, dgain and dbias are accumulated. */                                            \
  template <typename T>                                                                 \
  void layer_norm_backward(const RowShape& s, std::span<const T> x,                     \
                           std::span<const T> gain, std::span<const T> mean,            \
                           std::span<const T> rstd, std::span<const T> dy,              \
                           std::span<T> dx, std::span<T> dgain, std::span<T> dbias);

namespace serial {
HAT_KERNEL_DECLS
}  // namespace serial

namespace omp {
HAT_KERNEL_DECLS
}  // namespace omp

// Dispatch on the current backend.
HAT_KERNEL_DECLS

#undef HAT_KERNEL_DECLS

}  // namespace hat::kernels
