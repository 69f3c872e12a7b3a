#include "hat/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "hat/kernels.hpp"
#include "random_util.hpp"

namespace hat::ops {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
bool wants_grad(const NodePtr<T>& n) {
  return n->requires_grad;
}

template <typename T>
void add_into(Tensor<T>& dst, std::span<const T> src) {
  T* d = dst.raw();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += src[i];
}

template <typename T>
bool is_masked(T m) {
  return std::isinf(m) && m < 0;
}

// Shape with the last axis replaced.
Shape with_last(const Shape& s, std::size_t last) {
  std::vector<std::size_t> dims;
  for (std::size_t i = 0; i + 1 < s.rank(); ++i) dims.push_back(s[i]);
  dims.push_back(last);
  return Shape(std::span<const std::size_t>(dims));
}

struct BatchedDims {
  std::size_t batch = 1;
  std::size_t time = 0;
  std::size_t dim = 0;
};

BatchedDims batched_dims(const Shape& s, const char* what) {
  if (s.rank() == 2) return {1, s[0], s[1]};
  if (s.rank() == 3) return {s[0], s[1], s[2]};
  throw DimensionError(std::string(what) + ": expected [T, D] or [B, T, D], got " +
                       s.to_string());
}

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&] {
    return DimensionError("matmul: dimension mismatch " + sa.to_string() + " x " +
                          sb.to_string());
  };
  if (sa.rank() < 2 || sb.rank() < 2) throw mismatch();
  const std::size_t m = sa[sa.rank() - 2];
  const std::size_t k = sa[sa.rank() - 1];
  const std::size_t n = sb[sb.rank() - 1];
  if (sb[sb.rank() - 2] != k) throw mismatch();
  const std::size_t ba = sa.rank() == 3 ? sa[0] : 1;
  const std::size_t bb = sb.rank() == 3 ? sb[0] : 1;
  if (ba != bb && ba != 1 && bb != 1) throw mismatch();
  const std::size_t batch = std::max(ba, bb);
  const bool batched_out = sa.rank() == 3 || sb.rank() == 3;
  const Shape out_shape = batched_out ? Shape{batch, m, n} : Shape{m, n};

  Tensor<T> out(out_shape);
  const std::size_t a_stride = ba == 1 ? 0 : m * k;
  const std::size_t b_stride = bb == 1 ? 0 : k * n;
  if (bb == 1) {
    // Shared right operand: one gemm over all stacked rows.
    kernels::gemm<T>({.m = batch * m, .n = n, .k = k}, a.value().data(), b.value().data(),
                     out.data());
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      kernels::gemm<T>({.m = m, .n = n, .k = k}, a.value().data().subspan(i * a_stride, m * k),
                       b.value().data().subspan(i * b_stride, k * n),
                       out.data().subspan(i * m * n, m * n));
    }
  }

  return Var<T>::from_op(std::move(out), {a, b}, [=](Node<T>& node) {
    const NodePtr<T>& na = node.inputs[0];
    const NodePtr<T>& nb = node.inputs[1];
    std::span<const T> g = node.grad.data();
    if (wants_grad(na)) {
      Tensor<T>& ga = na->grad_buffer();
      for (std::size_t i = 0; i < batch; ++i) {
        kernels::gemm<T>({.m = m, .n = k, .k = n, .trans_b = true, .accumulate = true},
                         g.subspan(i * m * n, m * n),
                         nb->value.data().subspan(i * b_stride, k * n),
                         ga.data().subspan(i * a_stride, m * k));
      }
    }
    if (wants_grad(nb)) {
      Tensor<T>& gb = nb->grad_buffer();
      if (bb == 1 && ba == batch) {
        kernels::gemm<T>({.m = k, .n = n, .k = batch * m, .trans_a = true, .accumulate = true},
                         na->value.data(), g, gb.data());
      } else {
        for (std::size_t i = 0; i < batch; ++i) {
          kernels::gemm<T>({.m = k, .n = n, .k = m, .trans_a = true, .accumulate = true},
                           na->value.data().subspan(i * a_stride, m * k),
                           g.subspan(i * m * n, m * n),
                           gb.data().subspan(i * b_stride, k * n));
        }
      }
    }
  });
}

template <typename T>
Var<T> transpose(const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.rank() < 2) throw DimensionError("transpose needs at least 2 axes, got " + s.to_string());
  const std::size_t rows = s[s.rank() - 2];
  const std::size_t cols = s[s.rank() - 1];
  const std::size_t batch = s.numel() / (rows * cols);
  const Shape out_shape = s.rank() == 3 ? Shape{s[0], cols, rows} : Shape{cols, rows};
  Tensor<T> out(out_shape);
  const T* src = x.value().raw();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) {
        out[b * rows * cols + j * rows + i] = src[b * rows * cols + i * cols + j];
      }
    }
  }
  return Var<T>::from_op(std::move(out), {x}, [=](Node<T>& node) {
    Tensor<T>& gx = node.inputs[0]->grad_buffer();
    const T* g = node.grad.raw();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
          gx[b * rows * cols + i * cols + j] += g[b * rows * cols + j * rows + i];
        }
      }
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool trailing = sb.rank() <= sa.rank();
  for (std::size_t i = 0; trailing && i < sb.rank(); ++i) {
    trailing = sb[sb.rank() - 1 - i] == sa[sa.rank() - 1 - i];
  }
  if (!trailing) {
    throw DimensionError("add: shape mismatch " + sa.to_string() + " + " + sb.to_string());
  }
  const std::size_t period = sb.numel();
  Tensor<T> out = a.value();
  const T* bv = b.value().raw();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % period];
  return Var<T>::from_op(std::move(out), {a, b}, [period](Node<T>& node) {
    if (wants_grad(node.inputs[0])) add_into<T>(node.inputs[0]->grad_buffer(), node.grad.data());
    if (wants_grad(node.inputs[1])) {
      Tensor<T>& gb = node.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < node.grad.size(); ++i) gb[i % period] += node.grad[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v *= factor;
  return Var<T>::from_op(std::move(out), {x}, [factor](Node<T>& node) {
    Tensor<T>& gx = node.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * node.grad[i];
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  if (sx.rank() < 1 || sw.rank() != 2 || sw[0] != sx.back()) {
    throw DimensionError("linear: dimension mismatch " + sx.to_string() + " x " +
                         sw.to_string());
  }
  const std::size_t din = sw[0];
  const std::size_t dout = sw[1];
  const std::size_t rows = sx.rows();
  if (bias && !(bias.shape() == Shape{dout})) {
    throw DimensionError("linear: bias shape " + bias.shape().to_string() + " for output " +
                         std::to_string(dout));
  }
  Tensor<T> out(with_last(sx, dout));
  kernels::gemm<T>({.m = rows, .n = dout, .k = din}, x.value().data(), weight.value().data(),
                   out.data());
  if (bias) {
    const T* bv = bias.value().raw();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < dout; ++j) out[r * dout + j] += bv[j];
    }
  }
  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(bias);
  return Var<T>::from_op(std::move(out), std::move(inputs), [=](Node<T>& node) {
    std::span<const T> g = node.grad.data();
    const NodePtr<T>& nx = node.inputs[0];
    const NodePtr<T>& nw = node.inputs[1];
    if (wants_grad(nx)) {
      kernels::gemm<T>({.m = rows, .n = din, .k = dout, .trans_b = true, .accumulate = true}, g,
                       nw->value.data(), nx->grad_buffer().data());
    }
    if (wants_grad(nw)) {
      kernels::gemm<T>({.m = din, .n = dout, .k = rows, .trans_a = true, .accumulate = true},
                       nx->value.data(), g, nw->grad_buffer().data());
    }
    if (node.inputs.size() > 2 && wants_grad(node.inputs[2])) {
      Tensor<T>& gb = node.inputs[2]->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < dout; ++j) gb[j] += g[r * dout + j];
      }
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  return Var<T>::from_op(std::move(out), {x}, [](Node<T>& node) {
    Tensor<T>& gx = node.inputs[0]->grad_buffer();
    const Tensor<T>& xv = node.inputs[0]->value;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (xv[i] > T{0}) gx[i] += node.grad[i];
    }
  });
}

template <typename T>
Var<T> dropout(const Var<T>& x, double p, bool training, const DropoutKey& key) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  const std::uint64_t base =
      detail::mix64(key.seed ^ detail::mix64(key.step ^ detail::mix64(key.op_index)));
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> multiplier(x.shape());
  for (std::size_t i = 0; i < multiplier.size(); ++i) {
    const double u = detail::unit_double(detail::mix64(base ^ detail::mix64(i)));
    multiplier[i] = u >= p ? keep_scale : T{0};
  }
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= multiplier[i];
  return Var<T>::from_op(std::move(out), {x}, [multiplier](Node<T>& node) {
    Tensor<T>& gx = node.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += multiplier[i] * node.grad[i];
  });
}

template <typename T>
Var<T> log_softmax(const Var<T>& x) {
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.shape().rows();
  Tensor<T> out(x.shape());
  const T* xv = x.value().raw();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * cols;
    T* yr = out.raw() + r * cols;
    const T mx = *std::max_element(xr, xr + cols);
    T total = 0;
    for (std::size_t j = 0; j < cols; ++j) total += std::exp(xr[j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < cols; ++j) yr[j] = xr[j] - lse;
  }
  return Var<T>::from_op(std::move(out), {x}, [rows, cols](Node<T>& node) {
    // Needs the forward output; recompute it from the saved input.
    Tensor<T>& gx = node.inputs[0]->grad_buffer();
    const T* xv = node.inputs[0]->value.raw();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = xv + r * cols;
      const T* gr = node.grad.raw() + r * cols;
      const T mx = *std::max_element(xr, xr + cols);
      T total = 0;
      for (std::size_t j = 0; j < cols; ++j) total += std::exp(xr[j] - mx);
      const T lse = mx + std::log(total);
      T gsum = 0;
      for (std::size_t j = 0; j < cols; ++j) gsum += gr[j];
      for (std::size_t j = 0; j < cols; ++j) {
        gx[r * cols + j] += gr[j] - std::exp(xr[j] - lse) * gsum;
      }
    }
  });
}

template <typename T>
Var<T> softmax_lastaxis(const Var<T>& x, const Tensor<T>* additive_mask) {
  const Shape& s = x.shape();
  const std::size_t cols = s.back();
  const std::size_t rows = s.rows();
  std::size_t period = s.numel();
  if (additive_mask) {
    const Shape& sm = additive_mask->shape();
    bool ok = sm.rank() <= s.rank();
    for (std::size_t i = 0; ok && i < sm.rank(); ++i) ok = sm[sm.rank() - 1 - i] == s[s.rank() - 1 - i];
    if (!ok || sm.rank() == 0) {
      throw DimensionError("softmax: mask shape " + sm.to_string() +
                           " does not broadcast to " + s.to_string());
    }
    period = sm.numel();
  }
  Tensor<T> out(s);
  const T* xv = x.value().raw();
  for (std::size_t r = 0; r < rows; ++r) {
    T* yr = out.raw() + r * cols;
    const T* mr = additive_mask ? additive_mask->raw() + (r * cols) % period : nullptr;
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < cols; ++j) {
      if (mr && is_masked(mr[j])) continue;
      const T v = xv[r * cols + j] + (mr ? mr[j] : T{0});
      mx = any ? std::max(mx, v) : v;
      any = true;
    }
    if (!any) throw Error("empty attention window");
    T total = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      if (mr && is_masked(mr[j])) {
        yr[j] = 0;
        continue;
      }
      yr[j] = std::exp(xv[r * cols + j] + (mr ? mr[j] : T{0}) - mx);
      total += yr[j];
    }
    for (std::size_t j = 0; j < cols; ++j) yr[j] /= total;
  }
  Tensor<T> saved = out;
  return Var<T>::from_op(std::move(out), {x}, [saved, rows, cols](Node<T>& node) {
    Tensor<T>& gx = node.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = saved.raw() + r * cols;
      const T* gr = node.grad.raw() + r * cols;
      T dotp = 0;
      for (std::size_t j = 0; j < cols; ++j) dotp += yr[j] * gr[j];
      for (std::size_t j = 0; j < cols; ++j) {
        if (yr[j] != T{0}) gx[r * cols + j] += yr[j] * (gr[j] - dotp);
      }
    }
  });
}

template <typename T>
Var<T> concat_lastaxis(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& s0 = parts.front().shape();
  const std::size_t rows = s0.rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& sp = p.shape();
    if (sp.rank() != s0.rank() || sp.rows() != rows ||
        !(with_last(sp, 1) == with_last(s0, 1))) {
      throw DimensionError("concat: shape mismatch " + s0.to_string() + " vs " + sp.to_string());
    }
    widths.push_back(sp.back());
    total += sp.back();
  }
  Tensor<T> out(with_last(s0, total));
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const T* src = parts[i].value().raw();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(src + r * widths[i], src + (r + 1) * widths[i], out.raw() + r * total + offset);
    }
    offset += widths[i];
  }
  return Var<T>::from_op(std::move(out), parts, [widths, rows, total](Node<T>& node) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (wants_grad(node.inputs[i])) {
        Tensor<T>& g = node.inputs[i]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < widths[i]; ++j) {
            g[r * widths[i] + j] += node.grad[r * total + offset + j];
          }
        }
      }
      offset += widths[i];
    }
  });
}

template <typename T>
Var<T> slice_lastaxis(const Var<T>& x, std::size_t begin, std::size_t count) {
  const Shape& s = x.shape();
  const std::size_t cols = s.back();
  if (begin + count > cols || count == 0) {
    throw DimensionError("slice [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of range for " + s.to_string());
  }
  const std::size_t rows = s.rows();
  Tensor<T> out(with_last(s, count));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.value().raw() + r * cols + begin;
    std::copy(src, src + count, out.raw() + r * count);
  }
  return Var<T>::from_op(std::move(out), {x}, [=](Node<T>& node) {
    Tensor<T>& g = node.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < count; ++j) g[r * cols + begin + j] += node.grad[r * count + j];
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  const Shape& s = x.shape();
  const std::size_t d = s.back();
  if (!(gain.shape() == Shape{d}) || !(bias.shape() == Shape{d})) {
    throw DimensionError("layer_norm: gain/bias " + gain.shape().to_string() + "/" +
                         bias.shape().to_string() + " for input " + s.to_string());
  }
  if (!(eps > T{0})) throw ConfigError("layer_norm: eps must be positive");
  const kernels::RowShape rs{s.rows(), d};
  Tensor<T> out(s);
  Tensor<T> mean(Shape{rs.rows});
  Tensor<T> rstd(Shape{rs.rows});
  kernels::layer_norm_forward<T>(rs, x.value().data(), gain.value().data(), bias.value().data(),
                                 eps, out.data(), mean.data(), rstd.data());
  return Var<T>::from_op(std::move(out), {x, gain, bias}, [=](Node<T>& node) {
    const NodePtr<T>& nx = node.inputs[0];
    const NodePtr<T>& ng = node.inputs[1];
    const NodePtr<T>& nb = node.inputs[2];
    Tensor<T> dx_scratch;
    Tensor<T> dg_scratch;
    Tensor<T> db_scratch;
    std::span<T> dx = wants_grad(nx) ? nx->grad_buffer().data()
                                     : (dx_scratch = Tensor<T>(nx->value.shape())).data();
    std::span<T> dg = wants_grad(ng) ? ng->grad_buffer().data()
                                     : (dg_scratch = Tensor<T>(Shape{d})).data();
    std::span<T> db = wants_grad(nb) ? nb->grad_buffer().data()
                                     : (db_scratch = Tensor<T>(Shape{d})).data();
    kernels::layer_norm_backward<T>(rs, nx->value.data(), ng->value.data(), mean.data(),
                                    rstd.data(), node.grad.data(), dx, dg, db);
  });
}

template <typename T>
Var<T> conv1d_same(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias) {
  const BatchedDims xd = batched_dims(x.shape(), "conv1d");
  const Shape& sk = kernel.shape();
  if (sk.rank() != 3) throw DimensionError("conv1d: kernel must be [k, Din, Dout], got " + sk.to_string());
  const std::size_t width = sk[0];
  if (width % 2 == 0) {
    throw ConfigError("conv1d: kernel size must be odd for centered convolution, got " +
                      std::to_string(width));
  }
  if (sk[1] != xd.dim) {
    throw DimensionError("conv1d: input " + x.shape().to_string() + " vs kernel " + sk.to_string());
  }
  const std::size_t din = sk[1];
  const std::size_t dout = sk[2];
  if (!(bias.shape() == Shape{dout})) {
    throw DimensionError("conv1d: bias shape " + bias.shape().to_string());
  }
  const std::size_t half = (width - 1) / 2;
  const std::size_t time = xd.time;

  Tensor<T> out(with_last(x.shape(), dout));
  const T* bv = bias.value().raw();
  for (std::size_t r = 0; r < xd.batch * time; ++r) {
    std::copy(bv, bv + dout, out.raw() + r * dout);
  }
  // Tap j reads input frame t + j - half; rows outside [0, T) are the zero padding.
  auto tap_rows = [time, half](std::size_t j) {
    const std::ptrdiff_t offset = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(half);
    const std::ptrdiff_t t0 = std::max<std::ptrdiff_t>(0, -offset);
    const std::ptrdiff_t t1 =
        std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(time), static_cast<std::ptrdiff_t>(time) - offset);
    return std::tuple{offset, t0, t1};
  };
  for (std::size_t b = 0; b < xd.batch; ++b) {
    for (std::size_t j = 0; j < width; ++j) {
      const auto [offset, t0, t1] = tap_rows(j);
      if (t1 <= t0) continue;
      const std::size_t rows = static_cast<std::size_t>(t1 - t0);
      const std::size_t src = b * time + static_cast<std::size_t>(t0 + offset);
      const std::size_t dst = b * time + static_cast<std::size_t>(t0);
      kernels::gemm<T>({.m = rows, .n = dout, .k = din, .accumulate = true},
                       x.value().data().subspan(src * din, rows * din),
                       kernel.value().data().subspan(j * din * dout, din * dout),
                       out.data().subspan(dst * dout, rows * dout));
    }
  }
  return Var<T>::from_op(std::move(out), {x, kernel, bias}, [=](Node<T>& node) {
    const NodePtr<T>& nx = node.inputs[0];
    const NodePtr<T>& nk = node.inputs[1];
    const NodePtr<T>& nb = node.inputs[2];
    std::span<const T> g = node.grad.data();
    for (std::size_t b = 0; b < xd.batch; ++b) {
      for (std::size_t j = 0; j < width; ++j) {
        const auto [offset, t0, t1] = tap_rows(j);
        if (t1 <= t0) continue;
        const std::size_t rows = static_cast<std::size_t>(t1 - t0);
        const std::size_t src = b * time + static_cast<std::size_t>(t0 + offset);
        const std::size_t dst = b * time + static_cast<std::size_t>(t0);
        if (wants_grad(nx)) {
          kernels::gemm<T>({.m = rows, .n = din, .k = dout, .trans_b = true, .accumulate = true},
                           g.subspan(dst * dout, rows * dout),
                           nk->value.data().subspan(j * din * dout, din * dout),
                           nx->grad_buffer().data().subspan(src * din, rows * din));
        }
        if (wants_grad(nk)) {
          kernels::gemm<T>({.m = din, .n = dout, .k = rows, .trans_a = true, .accumulate = true},
                           nx->value.data().subspan(src * din, rows * din),
                           g.subspan(dst * dout, rows * dout),
                           nk->grad_buffer().data().subspan(j * din * dout, din * dout));
        }
      }
    }
    if (wants_grad(nb)) {
      Tensor<T>& gb = nb->grad_buffer();
      for (std::size_t r = 0; r < xd.batch * time; ++r) {
        for (std::size_t c = 0; c < dout; ++c) gb[c] += g[r * dout + c];
      }
    }
  });
}

template <typename T>
Var<T> mask_frames(const Var<T>& x, std::span<const std::size_t> lengths) {
  const BatchedDims xd = batched_dims(x.shape(), "mask_frames");
  if (lengths.size() != xd.batch) {
    throw DimensionError("mask_frames: " + std::to_string(lengths.size()) + " lengths for batch " +
                         std::to_string(xd.batch));
  }
  bool any_padding = false;
  for (std::size_t len : lengths) {
    if (len > xd.time) throw DimensionError("mask_frames: length exceeds time axis");
    any_padding = any_padding || len < xd.time;
  }
  if (!any_padding) return x;
  std::vector<std::size_t> lens(lengths.begin(), lengths.end());
  Tensor<T> out = x.value();
  for (std::size_t b = 0; b < xd.batch; ++b) {
    std::fill(out.raw() + (b * xd.time + lens[b]) * xd.dim, out.raw() + (b + 1) * xd.time * xd.dim,
              T{0});
  }
  return Var<T>::from_op(std::move(out), {x}, [xd, lens](Node<T>& node) {
    Tensor<T>& gx = node.inputs[0]->grad_buffer();
    for (std::size_t b = 0; b < xd.batch; ++b) {
      const std::size_t begin = b * xd.time * xd.dim;
      const std::size_t end = begin + lens[b] * xd.dim;
      for (std::size_t i = begin; i < end; ++i) gx[i] += node.grad[i];
    }
  });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads,
                 const Tensor<T>& additive_mask) {
  require_same_shape(q.shape(), k.shape(), "attention Q/K");
  require_same_shape(q.shape(), v.shape(), "attention Q/V");
  const BatchedDims d = batched_dims(q.shape(), "attention");
  if (heads == 0 || d.dim % heads != 0) {
    throw ConfigError("attention: dim " + std::to_string(d.dim) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  kernels::AttentionShape as{.batch = d.batch, .time = d.time, .dim = d.dim, .heads = heads};
  const Shape& sm = additive_mask.shape();
  if (sm == Shape{d.time, d.time}) {
    as.mask_per_batch = false;
  } else if (sm == Shape{d.batch, d.time, d.time}) {
    as.mask_per_batch = true;
  } else {
    throw DimensionError("attention: mask shape " + sm.to_string() + " for input " +
                         q.shape().to_string());
  }
  const std::size_t mask_rows = as.mask_per_batch ? d.batch * d.time : d.time;
  for (std::size_t r = 0; r < mask_rows; ++r) {
    const T* mr = additive_mask.raw() + r * d.time;
    if (std::all_of(mr, mr + d.time, [](T m) { return is_masked(m); })) {
      throw Error("empty attention window");
    }
  }

  Tensor<T> out(q.shape());
  auto probs = std::make_shared<std::vector<T>>(as.probs_size());
  kernels::attention_forward<T>(as, q.value().data(), k.value().data(), v.value().data(),
                                additive_mask.data(), out.data(), *probs);
  return Var<T>::from_op(std::move(out), {q, k, v}, [as, probs](Node<T>& node) {
    const std::size_t n = node.grad.size();
    std::vector<T> dq(n), dk(n), dv(n), scratch(as.probs_size());
    kernels::attention_backward<T>(as, node.inputs[0]->value.data(), node.inputs[1]->value.data(),
                                   node.inputs[2]->value.data(), *probs, node.grad.data(), dq, dk,
                                   dv, scratch);
    if (wants_grad(node.inputs[0])) add_into<T>(node.inputs[0]->grad_buffer(), dq);
    if (wants_grad(node.inputs[1])) add_into<T>(node.inputs[1]->grad_buffer(), dk);
    if (wants_grad(node.inputs[2])) add_into<T>(node.inputs[2]->grad_buffer(), dv);
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T total = 0;
  for (T v : x.value().data()) total += v;
  return Var<T>::from_op(Tensor<T>(Shape{}, total), {x}, [](Node<T>& node) {
    Tensor<T>& gx = node.inputs[0]->grad_buffer();
    const T g = node.grad[0];
    for (auto& v : gx.data()) v += g;
  });
}

template <typename T>
Var<T> weighted_nll(const Var<T>& log_probs, std::span<const std::int32_t> targets,
                    std::span<const T> weights) {
  const std::size_t cols = log_probs.shape().back();
  const std::size_t rows = log_probs.shape().rows();
  if (targets.size() != rows || weights.size() != rows) {
    throw DimensionError("weighted_nll: " + std::to_string(rows) + " rows but " +
                         std::to_string(targets.size()) + " targets / " +
                         std::to_string(weights.size()) + " weights");
  }
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  std::vector<T> w(weights.begin(), weights.end());
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (w[r] == T{0}) continue;
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= cols) {
      throw DataError("target " + std::to_string(tgt[r]) + " out of range at row " +
                      std::to_string(r));
    }
    total -= w[r] * log_probs.value()[r * cols + static_cast<std::size_t>(tgt[r])];
  }
  return Var<T>::from_op(Tensor<T>(Shape{}, total), {log_probs}, [=](Node<T>& node) {
    Tensor<T>& g = node.inputs[0]->grad_buffer();
    const T up = node.grad[0];
    for (std::size_t r = 0; r < rows; ++r) {
      if (w[r] == T{0}) continue;
      g[r * cols + static_cast<std::size_t>(tgt[r])] -= w[r] * up;
    }
  });
}

#define HAT_INSTANTIATE(T)                                                                  \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                     \
  template Var<T> transpose(const Var<T>&);                                                 \
  template Var<T> add(const Var<T>&, const Var<T>&);                                        \
  template Var<T> scale(const Var<T>&, T);                                                  \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                      \
  template Var<T> relu(const Var<T>&);                                                      \
  template Var<T> dropout(const Var<T>&, double, bool, const DropoutKey&);                  \
  template Var<T> log_softmax(const Var<T>&);                                               \
  template Var<T> softmax_lastaxis(const Var<T>&, const Tensor<T>*);                        \
  template Var<T> concat_lastaxis(const std::vector<Var<T>>&);                              \
  template Var<T> slice_lastaxis(const Var<T>&, std::size_t, std::size_t);                  \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);               \
  template Var<T> conv1d_same(const Var<T>&, const Var<T>&, const Var<T>&);                 \
  template Var<T> mask_frames(const Var<T>&, std::span<const std::size_t>);                 \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t,       \
                            const Tensor<T>&);                                              \
  template Var<T> sum(const Var<T>&);                                                       \
  template Var<T> weighted_nll(const Var<T>&, std::span<const std::int32_t>, std::span<const T>);

HAT_INSTANTIATE(float)
HAT_INSTANTIATE(double)

}  // namespace hat::ops
