#include "hat/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include "hat/ops.hpp"
#include "random_util.hpp"

namespace hat {

namespace {

std::size_t parse_extent(std::string_view s) {
  if (s == "inf" || s == "-inf" || s == "+inf") return TimeWindow::kUnbounded;
  if (!s.empty() && s.front() == '-') s.remove_prefix(1);
  std::size_t value = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError("bad window extent '" + std::string(s) + "'");
  }
  return value;
}

std::string extent_string(std::size_t e) {
  return e == TimeWindow::kUnbounded ? "inf" : std::to_string(e);
}

std::size_t saturating_add(std::size_t a, std::size_t b) {
  if (a == TimeWindow::kUnbounded || b == TimeWindow::kUnbounded) return TimeWindow::kUnbounded;
  return a + b;
}

template <typename T>
Var<T> xavier(detail::UniformSource& rng, Shape shape, std::size_t fan_in, std::size_t fan_out,
              std::string name) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>((2.0 * rng.next() - 1.0) * limit);
  return Var<T>::parameter(std::move(t), std::move(name));
}

template <typename T>
Var<T> filled(Shape shape, T value, std::string name) {
  return Var<T>::parameter(Tensor<T>(shape, value), std::move(name));
}

// Builds every parameter through `make(shape, kind, fan_in, fan_out, name)`,
// in serialization order.
template <typename T, typename Make>
ModelParams<T> build_params(const ModelConfig& c, Make make) {
  const std::size_t d = c.model_dim;
  ModelParams<T> p;
  p.input_weight = make(Shape{c.feature_dim, d}, 'w', c.feature_dim, d, "input.weight");
  p.input_bias = make(Shape{d}, 'b', 0, 0, "input.bias");
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    LayerParams<T> lp;
    if (c.use_conv) {
      lp.conv_kernel = make(Shape{c.kernel_size, d, d}, 'w', c.kernel_size * d,
                            c.kernel_size * d, pre + "conv.kernel");
      lp.conv_bias = make(Shape{d}, 'b', 0, 0, pre + "conv.bias");
    }
    lp.attn_norm_gain = make(Shape{d}, 'g', 0, 0, pre + "attn_norm.gain");
    lp.attn_norm_bias = make(Shape{d}, 'b', 0, 0, pre + "attn_norm.bias");
    lp.query = make(Shape{d, d}, 'w', d, d, pre + "attention.query");
    lp.key = make(Shape{d, d}, 'w', d, d, pre + "attention.key");
    lp.value = make(Shape{d, d}, 'w', d, d, pre + "attention.value");
    lp.output = make(Shape{d, d}, 'w', d, d, pre + "attention.output");
    lp.ffn_norm_gain = make(Shape{d}, 'g', 0, 0, pre + "ffn_norm.gain");
    lp.ffn_norm_bias = make(Shape{d}, 'b', 0, 0, pre + "ffn_norm.bias");
    lp.ffn_in_weight = make(Shape{d, c.ffn_dim}, 'w', d, c.ffn_dim, pre + "ffn.in_weight");
    lp.ffn_in_bias = make(Shape{c.ffn_dim}, 'b', 0, 0, pre + "ffn.in_bias");
    lp.ffn_out_weight = make(Shape{c.ffn_dim, d}, 'w', c.ffn_dim, d, pre + "ffn.out_weight");
    lp.ffn_out_bias = make(Shape{d}, 'b', 0, 0, pre + "ffn.out_bias");
    p.layers.push_back(std::move(lp));
  }
  if (c.extra_final_norm) {
    p.final_norm_gain = make(Shape{d}, 'g', 0, 0, "final_norm.gain");
    p.final_norm_bias = make(Shape{d}, 'b', 0, 0, "final_norm.bias");
  }
  p.output_weight = make(Shape{d, c.output_dim}, 'w', d, c.output_dim, "output.weight");
  p.output_bias = make(Shape{c.output_dim}, 'b', 0, 0, "output.bias");
  return p;
}

}  // namespace

bool TimeWindow::contains(std::ptrdiff_t offset) const {
  if (offset < 0) return left_unbounded() || static_cast<std::size_t>(-offset) <= left;
  return right_unbounded() || static_cast<std::size_t>(offset) <= right;
}

std::string TimeWindow::to_string() const {
  return "[-" + extent_string(left) + ", " + extent_string(right) + "]";
}

TimeWindow TimeWindow::parse(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) {
    throw ConfigError("time window '" + std::string(text) + "' must look like l:r");
  }
  return {parse_extent(text.substr(0, colon)), parse_extent(text.substr(colon + 1))};
}

TimeWindow ModelConfig::window(std::size_t layer) const {
  if (attention_windows.empty()) return TimeWindow::full();
  if (attention_windows.size() == 1) return attention_windows.front();
  return attention_windows.at(layer);
}

void ModelConfig::validate(bool require_layers) const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (require_layers && num_layers < 1) fail("num_layers must be >= 1");
  if (model_dim == 0) fail("model_dim must be positive");
  if (num_heads == 0 || model_dim % num_heads != 0) {
    fail("model_dim " + std::to_string(model_dim) + " is not divisible by num_heads " +
         std::to_string(num_heads));
  }
  if (ffn_dim == 0) fail("ffn_dim must be positive");
  if (kernel_size % 2 == 0) {
    fail("kernel_size must be odd, got " + std::to_string(kernel_size));
  }
  if (feature_dim == 0 || output_dim == 0) fail("feature_dim and output_dim must be positive");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail("dropout_p must lie in [0, 1)");
  if (!std::isfinite(pe_scale)) fail("pe_scale must be finite");
  if (attention_windows.size() > 1 && attention_windows.size() != num_layers) {
    fail("attention_window lists " + std::to_string(attention_windows.size()) +
         " windows for " + std::to_string(num_layers) + " layers");
  }
}

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate(false);
  detail::UniformSource rng(seed);
  return build_params<T>(config, [&](Shape shape, char kind, std::size_t fan_in,
                                     std::size_t fan_out, std::string name) {
    switch (kind) {
      case 'w':
        return xavier<T>(rng, shape, fan_in, fan_out, std::move(name));
      case 'g':
        return filled<T>(shape, T{1}, std::move(name));
      default:
        return filled<T>(shape, T{0}, std::move(name));
    }
  });
}

template <typename T>
ModelParams<T> ModelParams<T>::zeros(const ModelConfig& config) {
  config.validate(false);
  return build_params<T>(config, [](Shape shape, char, std::size_t, std::size_t,
                                    std::string name) {
    return filled<T>(shape, T{0}, std::move(name));
  });
}

template <typename T>
std::vector<Var<T>> ModelParams<T>::all() const {
  std::vector<Var<T>> out{input_weight, input_bias};
  for (const auto& lp : layers) {
    if (lp.conv_kernel) {
      out.push_back(lp.conv_kernel);
      out.push_back(lp.conv_bias);
    }
    for (const auto* v : {&lp.attn_norm_gain, &lp.attn_norm_bias, &lp.query, &lp.key, &lp.value,
                          &lp.output, &lp.ffn_norm_gain, &lp.ffn_norm_bias, &lp.ffn_in_weight,
                          &lp.ffn_in_bias, &lp.ffn_out_weight, &lp.ffn_out_bias}) {
      out.push_back(*v);
    }
  }
  if (final_norm_gain) {
    out.push_back(final_norm_gain);
    out.push_back(final_norm_bias);
  }
  out.push_back(output_weight);
  out.push_back(output_bias);
  return out;
}

template <typename T>
std::size_t ModelParams<T>::num_values() const {
  std::size_t n = 0;
  for (const auto& v : all()) n += v.value().size();
  return n;
}

template <typename T>
Tensor<T> build_attention_mask(std::size_t time, const TimeWindow& window, std::size_t valid_len) {
  if (valid_len > time) {
    throw DimensionError("valid length " + std::to_string(valid_len) + " exceeds " +
                         std::to_string(time) + " frames");
  }
  const T neg_inf = -std::numeric_limits<T>::infinity();
  Tensor<T> mask(Shape{time, time}, neg_inf);
  for (std::size_t t = 0; t < time; ++t) {
    if (t >= valid_len) {
      mask.at(t, t) = 0;
      continue;
    }
    for (std::size_t s = 0; s < valid_len; ++s) {
      const auto offset = static_cast<std::ptrdiff_t>(s) - static_cast<std::ptrdiff_t>(t);
      if (window.contains(offset)) mask.at(t, s) = 0;
    }
  }
  return mask;
}

template <typename T>
Tensor<T> build_batch_mask(std::size_t time, const TimeWindow& window,
                           std::span<const std::size_t> lengths) {
  Tensor<T> out(Shape{lengths.size(), time, time});
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    const Tensor<T> m = build_attention_mask<T>(time, window, lengths[b]);
    std::copy(m.data().begin(), m.data().end(), out.raw() + b * time * time);
  }
  return out;
}

template <typename T>
Tensor<T> positional_encoding(std::size_t time, std::size_t dim) {
  Tensor<T> pe(Shape{time, dim});
  const double d = static_cast<double>(dim);
  for (std::size_t t = 0; t < time; ++t) {
    const double pos = static_cast<double>(t);
    for (std::size_t j = 0; j < dim; ++j) {
      // The odd (cosine) channels use exponent (2i+1)/d, i.e. their own index.
      const double denom = std::pow(10000.0, static_cast<double>(j) / d);
      pe.at(t, j) = static_cast<T>(j % 2 == 0 ? std::sin(pos / denom) : std::cos(pos / denom));
    }
  }
  return pe;
}

template <typename T>
Var<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                            const Tensor<T>& mask) {
  return ops::attention(q, k, v, 1, mask);
}

template <typename T>
Var<T> multi_head_attention(const Var<T>& x, const LayerParams<T>& params, std::size_t heads,
                            const Tensor<T>& mask) {
  const Var<T> none;
  const Var<T> q = ops::linear(x, params.query, none);
  const Var<T> k = ops::linear(x, params.key, none);
  const Var<T> v = ops::linear(x, params.value, none);
  return ops::linear(ops::attention(q, k, v, heads, mask), params.output, none);
}

template <typename T>
Var<T> encoder_layer(const Var<T>& x, const LayerParams<T>& params, const ModelConfig& config,
                     std::span<const std::size_t> lengths, const Tensor<T>& mask,
                     const ForwardOptions& options, std::size_t layer_index) {
  const T eps = static_cast<T>(kLayerNormEps);
  const Var<T> none;
  std::vector<std::size_t> full_length;
  if (lengths.empty()) {
    full_length.push_back(x.shape()[x.shape().rank() - 2]);
    lengths = full_length;
  }
  auto drop = [&](const Var<T>& v, std::uint64_t site) {
    return ops::dropout(v, config.dropout_p, options.training,
                        {options.seed, options.step, layer_index * 2 + site});
  };
  auto conv_block = [&](const Var<T>& h) {
    if (!config.use_conv) return h;
    const Var<T> c = ops::conv1d_same(ops::mask_frames(h, lengths), params.conv_kernel,
                                      params.conv_bias);
    return config.conv_residual ? ops::add(h, c) : c;
  };
  auto attention_block = [&](const Var<T>& h) {
    const Var<T> a = ops::layer_norm(h, params.attn_norm_gain, params.attn_norm_bias, eps);
    return ops::add(h, drop(multi_head_attention(a, params, config.num_heads, mask), 0));
  };
  auto ffn_block = [&](const Var<T>& h) {
    const Var<T> f = ops::layer_norm(h, params.ffn_norm_gain, params.ffn_norm_bias, eps);
    const Var<T> hidden = ops::relu(ops::linear(f, params.ffn_in_weight, params.ffn_in_bias));
    return ops::add(h, drop(ops::linear(hidden, params.ffn_out_weight, params.ffn_out_bias), 1));
  };

  Var<T> h = x;
  if (config.block_order == BlockOrder::kConvFirst) {
    h = attention_block(conv_block(h));
  } else {
    h = conv_block(attention_block(h));
  }
  return ffn_block(h);
}

template <typename T>
Var<T> encoder_forward(const Var<T>& features, const ModelParams<T>& params,
                       const ModelConfig& config, std::span<const std::size_t> lengths,
                       const ForwardOptions& options) {
  const Shape& s = features.shape();
  if (s.rank() != 2 && s.rank() != 3) {
    throw DimensionError("encoder input must be [T, D] or [B, T, D], got " + s.to_string());
  }
  const bool batched = s.rank() == 3;
  const std::size_t time = s[s.rank() - 2];
  if (time == 0) throw DimensionError("encoder input has zero frames");
  if (s.back() != config.feature_dim) {
    throw DimensionError("encoder expects feature dim " + std::to_string(config.feature_dim) +
                         ", got " + s.to_string());
  }
  const std::size_t batch = batched ? s[0] : 1;
  std::vector<std::size_t> lens(lengths.begin(), lengths.end());
  if (lens.empty()) lens.assign(batch, time);
  if (lens.size() != batch) throw DimensionError("encoder: lengths do not match batch size");
  for (std::size_t len : lens) {
    if (len == 0 || len > time) throw DimensionError("encoder: utterance length out of range");
  }

  Var<T> h = ops::linear(features, params.input_weight, params.input_bias);
  if (config.use_positional_encoding) {
    Tensor<T> pe = positional_encoding<T>(time, config.model_dim);
    if (config.pe_scale != 1.0) {
      for (auto& v : pe.data()) v *= static_cast<T>(config.pe_scale);
    }
    h = ops::add(h, Var<T>::constant(std::move(pe)));
  }

  std::vector<std::pair<TimeWindow, Tensor<T>>> masks;
  masks.reserve(params.layers.size());
  auto mask_for = [&](const TimeWindow& w) -> const Tensor<T>& {
    for (const auto& [win, m] : masks) {
      if (win == w) return m;
    }
    masks.emplace_back(w, batched ? build_batch_mask<T>(time, w, lens)
                                  : build_attention_mask<T>(time, w, lens.front()));
    return masks.back().second;
  };

  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    h = encoder_layer(h, params.layers[l], config, lens, mask_for(config.window(l)), options, l);
  }
  if (config.extra_final_norm) {
    h = ops::layer_norm(h, params.final_norm_gain, params.final_norm_bias,
                        static_cast<T>(kLayerNormEps));
  }
  return ops::linear(h, params.output_weight, params.output_bias);
}

AccumulatedWindow accumulated_window(const ModelConfig& config) {
  AccumulatedWindow acc;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const TimeWindow w = config.window(l);
    acc.total_left = saturating_add(acc.total_left, w.left);
    acc.total_right = saturating_add(acc.total_right, w.right);
  }
  if (config.use_conv) {
    acc.conv_lookahead = config.num_layers * ((config.kernel_size - 1) / 2);
    acc.conv_lookbehind = acc.conv_lookahead;
  }
  acc.total_latency = saturating_add(acc.total_right, acc.conv_lookahead);
  return acc;
}

ParameterCounts count_parameters(const ModelConfig& c) {
  const std::size_t d = c.model_dim;
  const std::size_t layers = c.num_layers;
  ParameterCounts p;
  p.input_linear = c.feature_dim * d + d;
  p.attention = layers * 4 * d * d;
  p.layer_norm_count = 2 * layers + (c.extra_final_norm ? 1 : 0);
  p.layer_norm = p.layer_norm_count * 2 * d;
  p.feedforward = layers * (d * c.ffn_dim + c.ffn_dim + c.ffn_dim * d + d);
  p.conv = c.use_conv ? layers * (c.kernel_size * d * d + d) : 0;
  p.output_linear = d * c.output_dim + c.output_dim;
  p.total = p.input_linear + p.attention + p.layer_norm + p.feedforward + p.conv + p.output_linear;
  return p;
}

#define HAT_INSTANTIATE(T)                                                                     \
  template struct ModelParams<T>;                                                              \
  template Tensor<T> build_attention_mask<T>(std::size_t, const TimeWindow&, std::size_t);     \
  template Tensor<T> build_batch_mask<T>(std::size_t, const TimeWindow&,                       \
                                         std::span<const std::size_t>);                        \
  template Tensor<T> positional_encoding<T>(std::size_t, std::size_t);                         \
  template Var<T> scaled_dot_attention(const Var<T>&, const Var<T>&, const Var<T>&,            \
                                       const Tensor<T>&);                                      \
  template Var<T> multi_head_attention(const Var<T>&, const LayerParams<T>&, std::size_t,      \
                                       const Tensor<T>&);                                      \
  template Var<T> encoder_layer(const Var<T>&, const LayerParams<T>&, const ModelConfig&,      \
                                std::span<const std::size_t>, const Tensor<T>&,                \
                                const ForwardOptions&, std::size_t);                           \
  template Var<T> encoder_forward(const Var<T>&, const ModelParams<T>&, const ModelConfig&,    \
                                  std::span<const std::size_t>, const ForwardOptions&);

HAT_INSTANTIATE(float)
HAT_INSTANTIATE(double)

}  // namespace hat
