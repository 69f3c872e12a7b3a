#pragma once

// Differentiable ops. Shapes are [.., rows, cols] with at most three axes;
// "last axis" ops treat everything before the last axis as independent rows.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "hat/autodiff.hpp"

namespace hat::ops {

/// [.., M, K] x [.., K, N]. Rank-2 operands broadcast against a rank-3 batch,
/// as does a batch axis of length 1.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

/// Swaps the last two axes.
template <typename T>
Var<T> transpose(const Var<T>& x);

/// a + b where b has a's shape or a's trailing shape (broadcast over the rest).
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& x, T factor);

/// x W (+ bias), with W [Din, Dout]. `bias` may be empty.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

template <typename T>
Var<T> relu(const Var<T>& x);

/// Deterministic dropout stream: the keep mask is a pure function of
/// (seed, step, op_index, element index).
struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t op_index = 0;
};

/// Inverted dropout; identity when !training or p == 0. p must lie in [0, 1).
template <typename T>
Var<T> dropout(const Var<T>& x, double p, bool training, const DropoutKey& key);

template <typename T>
Var<T> log_softmax(const Var<T>& x);

/// Softmax over the last axis with an optional additive mask of 0 / -inf
/// entries, shaped like x or like x's trailing axes. A slice with every entry
/// masked raises "empty attention window".
template <typename T>
Var<T> softmax_lastaxis(const Var<T>& x, const Tensor<T>* additive_mask = nullptr);

template <typename T>
Var<T> concat_lastaxis(const std::vector<Var<T>>& parts);

template <typename T>
Var<T> slice_lastaxis(const Var<T>& x, std::size_t begin, std::size_t count);

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps);

/// Centered 1-D convolution along time with zero padding of (k-1)/2 frames on
/// each side and stride 1. x is [T, Din] or [B, T, Din], kernel [k, Din, Dout].
template <typename T>
Var<T> conv1d_same(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias);

/// Zeroes frames t >= lengths[b]. x is [T, D] (one length) or [B, T, D].
template <typename T>
Var<T> mask_frames(const Var<T>& x, std::span<const std::size_t> lengths);

/// Fused scaled dot-product attention over `heads` equal column slices of
/// q, k, v ([T, d] or [B, T, d]); each head scales scores by 1/sqrt(d/heads).
/// The additive mask is [T, T] or [B, T, T].
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads,
                 const Tensor<T>& additive_mask);

template <typename T>
Var<T> sum(const Var<T>& x);

/// -sum_i weights[i] * x[i, targets[i]] over the rows of x.
template <typename T>
Var<T> weighted_nll(const Var<T>& log_probs, std::span<const std::int32_t> targets,
                    std::span<const T> weights);

}  // namespace hat::ops
