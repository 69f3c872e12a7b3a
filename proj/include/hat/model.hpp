#pragma once

// Transformer encoder with interleaved 1-D convolution and multi-head
// self-attention for frame-level acoustic modelling.
//
// Layer wiring (conv-first order, pre-norm residual sublayers):
//
//   h = conv1d_same(h)                        (omitted when use_conv is off)
//   h = h + dropout(MHA(LayerNorm(h)))
//   h = h + dropout(W2 relu(W1 LayerNorm(h) + b1) + b2)
//
// The full stack is: input linear -> + positional encoding -> L layers ->
// optional final LayerNorm -> output linear.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hat/autodiff.hpp"
#include "hat/tensor.hpp"

namespace hat {

/// Attention restriction [-left, right] around each query frame.
struct TimeWindow {
  static constexpr std::size_t kUnbounded = std::numeric_limits<std::size_t>::max();

  std::size_t left = kUnbounded;
  std::size_t right = kUnbounded;

  static TimeWindow full() { return {}; }
  bool left_unbounded() const { return left == kUnbounded; }
  bool right_unbounded() const { return right == kUnbounded; }
  bool contains(std::ptrdiff_t offset) const;

  /// "[-inf, 2]" style.
  std::string to_string() const;
  /// Parses "l:r" where either side may be "inf", e.g. "inf:2" or "4:0".
  static TimeWindow parse(std::string_view text);

  friend bool operator==(const TimeWindow&, const TimeWindow&) = default;
};

enum class BlockOrder : std::uint8_t { kConvFirst = 0, kAttentionFirst = 1 };

struct ModelConfig {
  std::size_t num_layers = 6;
  std::size_t model_dim = 512;
  std::size_t num_heads = 8;
  std::size_t ffn_dim = 2048;
  std::size_t kernel_size = 3;
  std::size_t feature_dim = 80;
  std::size_t output_dim = 5768;
  bool use_positional_encoding = true;
  bool use_conv = true;
  bool extra_final_norm = false;
  bool conv_residual = false;
  BlockOrder block_order = BlockOrder::kConvFirst;
  double dropout_p = 0.0;
  double pe_scale = 1.0;
  /// Empty means unrestricted attention in every layer; otherwise one
  /// window for all layers or exactly one per layer.
  std::vector<TimeWindow> attention_windows;

  TimeWindow window(std::size_t layer) const;
  /// Throws ConfigError on any violated invariant. An empty stack (L = 0) is
  /// accepted only when require_layers is false.
  void validate(bool require_layers = true) const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LayerParams {
  Var<T> conv_kernel;  // [k, d, d]
  Var<T> conv_bias;    // [d]
  Var<T> attn_norm_gain;
  Var<T> attn_norm_bias;
  // Per-head projections stored side by side: head i owns columns
  // [i*d/n, (i+1)*d/n) of query/key/value. No biases.
  Var<T> query;   // [d, d]
  Var<T> key;     // [d, d]
  Var<T> value;   // [d, d]
  Var<T> output;  // [d, d]
  Var<T> ffn_norm_gain;
  Var<T> ffn_norm_bias;
  Var<T> ffn_in_weight;   // [d, ffn]
  Var<T> ffn_in_bias;     // [ffn]
  Var<T> ffn_out_weight;  // [ffn, d]
  Var<T> ffn_out_bias;    // [d]
};

template <typename T>
struct ModelParams {
  Var<T> input_weight;  // [D, d]
  Var<T> input_bias;
  std::vector<LayerParams<T>> layers;
  Var<T> final_norm_gain;  // empty unless extra_final_norm
  Var<T> final_norm_bias;
  Var<T> output_weight;  // [d, C]
  Var<T> output_bias;

  /// Random initialization (Xavier-uniform weights, unit gains, zero biases).
  static ModelParams init(const ModelConfig& config, std::uint64_t seed);
  /// Zero-filled tensors of the right shapes, for deserialization.
  static ModelParams zeros(const ModelConfig& config);

  /// Every parameter in the fixed serialization order (see checkpoint.hpp).
  std::vector<Var<T>> all() const;
  std::size_t num_values() const;
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
};

/// Additive mask [T, T]: 0 where t-l <= s <= t+r and s < valid_len, -inf
/// elsewhere. A padding query row (t >= valid_len) sees only itself so the
/// softmax stays defined; no valid frame ever reads a padding frame.
template <typename T>
Tensor<T> build_attention_mask(std::size_t time, const TimeWindow& window, std::size_t valid_len);

/// [B, T, T] stack of build_attention_mask over per-utterance lengths.
template <typename T>
Tensor<T> build_batch_mask(std::size_t time, const TimeWindow& window,
                           std::span<const std::size_t> lengths);

/// PE[t, 2i] = sin(t / 10000^(2i/d)), PE[t, 2i+1] = cos(t / 10000^((2i+1)/d)).
template <typename T>
Tensor<T> positional_encoding(std::size_t time, std::size_t dim);

/// Softmax(Q K^T / sqrt(d)) V for a single head.
template <typename T>
Var<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                            const Tensor<T>& mask);

/// [H_1 .. H_n] W^O with H_i = Attention(x W_i^Q, x W_i^K, x W_i^V).
template <typename T>
Var<T> multi_head_attention(const Var<T>& x, const LayerParams<T>& params, std::size_t heads,
                            const Tensor<T>& mask);

/// One encoder layer. `lengths` gives valid frames per batch row (empty for a
/// single unpadded sequence); `mask` is the layer's attention mask.
template <typename T>
Var<T> encoder_layer(const Var<T>& x, const LayerParams<T>& params, const ModelConfig& config,
                     std::span<const std::size_t> lengths, const Tensor<T>& mask,
                     const ForwardOptions& options, std::size_t layer_index);

/// Features [T, D] or [B, T, D] -> logits [T, C] or [B, T, C].
template <typename T>
Var<T> encoder_forward(const Var<T>& features, const ModelParams<T>& params,
                       const ModelConfig& config, std::span<const std::size_t> lengths = {},
                       const ForwardOptions& options = {});

struct AccumulatedWindow {
  std::size_t total_left = 0;   // TimeWindow::kUnbounded when any layer is unbounded
  std::size_t total_right = 0;  // likewise
  std::size_t conv_lookahead = 0;
  std::size_t conv_lookbehind = 0;
  std::size_t total_latency = 0;  // attention right + conv lookahead; kUnbounded if unbounded

  bool latency_unbounded() const { return total_latency == TimeWindow::kUnbounded; }
};

AccumulatedWindow accumulated_window(const ModelConfig& config);

struct ParameterCounts {
  std::size_t input_linear = 0;
  std::size_t attention = 0;
  std::size_t layer_norm = 0;
  std::size_t layer_norm_count = 0;  // number of LayerNorm modules
  std::size_t feedforward = 0;
  std::size_t conv = 0;
  std::size_t output_linear = 0;
  std::size_t total = 0;
};

/// Closed-form parameter counts; equal to ModelParams::num_values().
ParameterCounts count_parameters(const ModelConfig& config);

}  // namespace hat
