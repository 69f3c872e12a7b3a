#pragma once

// Model checkpoint container (little-endian):
//
//   "HATM" | u32 version = 1
//   | u32 num_layers, model_dim, num_heads, ffn_dim, kernel_size, feature_dim, output_dim
//   | u8 use_positional_encoding, use_conv, extra_final_norm, conv_residual, block_order
//   | f64 dropout_p | f64 pe_scale
//   | u32 window count | count x (u32 left, u32 right), 0xffffffff = unbounded
//   | u64 value count | float32 values
//
// Values follow ModelParams::all() order: input.weight, input.bias, then per
// layer [conv.kernel, conv.bias,] attn_norm.gain, attn_norm.bias,
// attention.query, .key, .value, .output, ffn_norm.gain, ffn_norm.bias,
// ffn.in_weight, ffn.in_bias, ffn.out_weight, ffn.out_bias, then
// [final_norm.gain, final_norm.bias,] output.weight, output.bias. Each tensor
// is row-major.

#include <filesystem>
#include <iosfwd>
#include <string>

#include "hat/model.hpp"

namespace hat {

template <typename T>
struct Checkpoint {
  ModelConfig config;
  ModelParams<T> params;
};

template <typename T>
void write_checkpoint(std::ostream& out, const ModelConfig& config, const ModelParams<T>& params);

template <typename T>
Checkpoint<T> read_checkpoint(std::istream& in, const std::string& source = "<stream>");

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ModelParams<T>& params);

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace hat
