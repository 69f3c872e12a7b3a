#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "hat/model.hpp"
#include "hat/ops.hpp"
#include "model_checks.hpp"
#include "test_support.hpp"

namespace ops = hat::ops;
using hat::BlockOrder;
using hat::ModelConfig;
using hat::ModelParams;
using hat::Shape;
using hat::Tensor;
using hat::TimeWindow;
using hat::Var;
using hat::testing::random_tensor;
using hat::testing::tiny_config;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr std::size_t kU = TimeWindow::kUnbounded;

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor<double>& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
  return m;
}

Mat matmul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// Per-element scaled dot-product attention for one head over columns [c0, c0 + dh).
Mat brute_attention(const Mat& q, const Mat& k, const Mat& v, std::size_t c0, std::size_t dh,
                    const std::vector<std::vector<bool>>& visible) {
  const std::size_t T = q.size();
  Mat out(T, std::vector<double>(dh, 0.0));
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> w(T, 0.0);
    double mx = -kInf;
    for (std::size_t s = 0; s < T; ++s) {
      if (!visible[t][s]) continue;
      double dot = 0;
      for (std::size_t j = 0; j < dh; ++j) dot += q[t][c0 + j] * k[s][c0 + j];
      w[s] = dot / std::sqrt(static_cast<double>(dh));
      mx = std::max(mx, w[s]);
    }
    double z = 0;
    for (std::size_t s = 0; s < T; ++s) {
      w[s] = visible[t][s] ? std::exp(w[s] - mx) : 0.0;
      z += w[s];
    }
    for (std::size_t s = 0; s < T; ++s)
      for (std::size_t j = 0; j < dh; ++j) out[t][j] += w[s] / z * v[s][c0 + j];
  }
  return out;
}

std::vector<std::vector<bool>> all_visible(std::size_t T) {
  return std::vector<std::vector<bool>>(T, std::vector<bool>(T, true));
}

// ---- independent re-implementation of the encoder, for the oracle test ----

Mat ref_layer_norm(const Mat& x, const Tensor<double>& g, const Tensor<double>& b) {
  Mat y = x;
  for (auto& row : y) {
    double mu = 0, var = 0;
    for (double v : row) mu += v;
    mu /= row.size();
    for (double v : row) var += (v - mu) * (v - mu);
    var /= row.size();
    for (std::size_t j = 0; j < row.size(); ++j)
      row[j] = (row[j] - mu) / std::sqrt(var + hat::kLayerNormEps) * g[j] + b[j];
  }
  return y;
}

Mat ref_affine(const Mat& x, const Tensor<double>& w, const Tensor<double>& b) {
  Mat y = matmul(x, to_mat(w));
  for (auto& row : y)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
  return y;
}

Mat ref_conv(const Mat& x, const Tensor<double>& kernel, const Tensor<double>& bias) {
  const std::size_t T = x.size(), k = kernel.dim(0), din = kernel.dim(1), dout = kernel.dim(2);
  const long half = static_cast<long>(k / 2);
  Mat y(T, std::vector<double>(dout));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t o = 0; o < dout; ++o) {
      double acc = bias[o];
      for (std::size_t j = 0; j < k; ++j) {
        const long s = static_cast<long>(t) + static_cast<long>(j) - half;
        if (s < 0 || s >= static_cast<long>(T)) continue;
        for (std::size_t i = 0; i < din; ++i) acc += x[s][i] * kernel.at(j, i, o);
      }
      y[t][o] = acc;
    }
  return y;
}

Mat reference_encoder(const Tensor<double>& features, const ModelParams<double>& p,
                      const ModelConfig& c) {
  const std::size_t T = features.dim(0), d = c.model_dim, dh = d / c.num_heads;
  Mat h = ref_affine(to_mat(features), p.input_weight.value(), p.input_bias.value());
  if (c.use_positional_encoding) {
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j) {
        const double expo = static_cast<double>(j) / static_cast<double>(d);
        const double angle = static_cast<double>(t) / std::pow(10000.0, expo);
        h[t][j] += c.pe_scale * (j % 2 == 0 ? std::sin(angle) : std::cos(angle));
      }
  }
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const auto& lp = p.layers[l];
    const TimeWindow w = c.window(l);
    std::vector<std::vector<bool>> vis(T, std::vector<bool>(T));
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t s = 0; s < T; ++s)
        vis[t][s] = w.contains(static_cast<std::ptrdiff_t>(s) - static_cast<std::ptrdiff_t>(t));
    if (c.use_conv) h = ref_conv(h, lp.conv_kernel.value(), lp.conv_bias.value());
    const Mat a = ref_layer_norm(h, lp.attn_norm_gain.value(), lp.attn_norm_bias.value());
    const Mat q = matmul(a, to_mat(lp.query.value()));
    const Mat k = matmul(a, to_mat(lp.key.value()));
    const Mat v = matmul(a, to_mat(lp.value.value()));
    Mat heads(T, std::vector<double>(d));
    for (std::size_t i = 0; i < c.num_heads; ++i) {
      const Mat hi = brute_attention(q, k, v, i * dh, dh, vis);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < dh; ++j) heads[t][i * dh + j] = hi[t][j];
    }
    const Mat attn = matmul(heads, to_mat(lp.output.value()));
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j) h[t][j] += attn[t][j];
    const Mat f = ref_layer_norm(h, lp.ffn_norm_gain.value(), lp.ffn_norm_bias.value());
    Mat hidden = ref_affine(f, lp.ffn_in_weight.value(), lp.ffn_in_bias.value());
    for (auto& row : hidden)
      for (auto& x : row) x = std::max(0.0, x);
    const Mat ffn = ref_affine(hidden, lp.ffn_out_weight.value(), lp.ffn_out_bias.value());
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j) h[t][j] += ffn[t][j];
  }
  if (c.extra_final_norm) h = ref_layer_norm(h, p.final_norm_gain.value(), p.final_norm_bias.value());
  return ref_affine(h, p.output_weight.value(), p.output_bias.value());
}

ModelParams<double> perturbed_params(const ModelConfig& c, std::uint64_t seed) {
  auto p = ModelParams<double>::init(c, seed);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> d(-0.3, 0.3);
  for (auto& v : p.all())
    for (auto& x : v.mutable_value().data()) x += d(rng);
  return p;
}

}  // namespace

// ----- TimeWindow / config -------------------------------------------------

TEST(TimeWindow, ParseAndFormat) {
  EXPECT_EQ(TimeWindow::parse("inf:2"), (TimeWindow{kU, 2}));
  EXPECT_EQ(TimeWindow::parse("4:0"), (TimeWindow{4, 0}));
  EXPECT_EQ(TimeWindow::parse("inf:inf"), TimeWindow::full());
  EXPECT_EQ((TimeWindow{kU, 2}).to_string(), "[-inf, 2]");
  EXPECT_THROW(TimeWindow::parse("3"), hat::ConfigError);
  EXPECT_THROW(TimeWindow::parse("a:1"), hat::ConfigError);
}

TEST(TimeWindow, AlwaysContainsSelf) {
  for (std::size_t l : {std::size_t{0}, std::size_t{3}, kU})
    for (std::size_t r : {std::size_t{0}, std::size_t{2}, kU}) EXPECT_TRUE((TimeWindow{l, r}).contains(0));
}

TEST(ModelConfig, ValidateRejectsBadValues) {
  ModelConfig c = tiny_config();
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), hat::ConfigError);
  c = tiny_config();
  c.kernel_size = 4;
  EXPECT_THROW(c.validate(), hat::ConfigError);
  c = tiny_config();
  c.num_layers = 0;
  EXPECT_THROW(c.validate(), hat::ConfigError);
  EXPECT_NO_THROW(c.validate(false));
  c = tiny_config();
  c.dropout_p = 1.0;
  EXPECT_THROW(c.validate(), hat::ConfigError);
  c = tiny_config();
  c.attention_windows = {{1, 1}, {1, 1}, {1, 1}};
  EXPECT_THROW(c.validate(), hat::ConfigError);
}

// ----- attention ---------------------------------------------------------

TEST(ScaledDotAttention, IdenticalKeysAverageValues) {
  std::mt19937_64 rng(1);
  const std::size_t T = 5;
  Tensor<double> k(Shape{T, 3});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < 3; ++j) k.at(t, j) = 0.1 * (j + 1);
  const auto q = random_tensor<double>(Shape{T, 3}, rng);
  const auto v = random_tensor<double>(Shape{T, 3}, rng);
  const auto mask = hat::build_attention_mask<double>(T, TimeWindow::full(), T);
  const auto out = hat::scaled_dot_attention(Var<double>::constant(q), Var<double>::constant(k),
                                             Var<double>::constant(v), mask)
                       .value();
  for (std::size_t j = 0; j < 3; ++j) {
    double mean = 0;
    for (std::size_t s = 0; s < T; ++s) mean += v.at(s, j) / T;
    for (std::size_t t = 0; t < T; ++t) EXPECT_NEAR(out.at(t, j), mean, 1e-14);
  }
}

TEST(ScaledDotAttention, SelfOnlyWindowReturnsValues) {
  std::mt19937_64 rng(2);
  const auto q = random_tensor<double>(Shape{6, 4}, rng);
  const auto k = random_tensor<double>(Shape{6, 4}, rng);
  const auto v = random_tensor<double>(Shape{6, 4}, rng);
  const auto mask = hat::build_attention_mask<double>(6, TimeWindow{0, 0}, 6);
  const auto out = hat::scaled_dot_attention(Var<double>::constant(q), Var<double>::constant(k),
                                             Var<double>::constant(v), mask)
                       .value();
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(out[i], v[i]);
}

TEST(ScaledDotAttention, MatchesBruteForceT3D2) {
  std::mt19937_64 rng(3);
  const auto q = random_tensor<double>(Shape{3, 2}, rng, -2, 2);
  const auto k = random_tensor<double>(Shape{3, 2}, rng, -2, 2);
  const auto v = random_tensor<double>(Shape{3, 2}, rng, -2, 2);
  const auto mask = hat::build_attention_mask<double>(3, TimeWindow::full(), 3);
  const auto out = hat::scaled_dot_attention(Var<double>::constant(q), Var<double>::constant(k),
                                             Var<double>::constant(v), mask)
                       .value();
  const Mat ref = brute_attention(to_mat(q), to_mat(k), to_mat(v), 0, 2, all_visible(3));
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(out.at(t, j), ref[t][j], 1e-14);
}

TEST(ScaledDotAttention, OutputInsideConvexHullOfVisibleValues) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t T = 9, d = 8, heads = 2, dh = 4;
    const auto q = random_tensor<double>(Shape{T, d}, rng, -3, 3);
    const auto k = random_tensor<double>(Shape{T, d}, rng, -3, 3);
    const auto v = random_tensor<double>(Shape{T, d}, rng, -3, 3);
    const TimeWindow w{2, 1};
    const auto mask = hat::build_attention_mask<double>(T, w, 7);
    const auto out = ops::attention(Var<double>::constant(q), Var<double>::constant(k),
                                    Var<double>::constant(v), heads, mask)
                         .value();
    for (std::size_t t = 0; t < 7; ++t)
      for (std::size_t j = 0; j < d; ++j) {
        double lo = kInf, hi = -kInf;
        for (std::size_t s = 0; s < T; ++s) {
          if (mask.at(t, s) != 0.0) continue;
          lo = std::min(lo, v.at(s, j));
          hi = std::max(hi, v.at(s, j));
        }
        EXPECT_GE(out.at(t, j), lo - 1e-12);
        EXPECT_LE(out.at(t, j), hi + 1e-12);
      }
    (void)dh;
  }
}

namespace {

hat::LayerParams<double> random_attention_params(std::size_t d, std::mt19937_64& rng) {
  hat::LayerParams<double> p;
  p.query = Var<double>::constant(random_tensor<double>(Shape{d, d}, rng));
  p.key = Var<double>::constant(random_tensor<double>(Shape{d, d}, rng));
  p.value = Var<double>::constant(random_tensor<double>(Shape{d, d}, rng));
  p.output = Var<double>::constant(random_tensor<double>(Shape{d, d}, rng));
  return p;
}

}  // namespace

TEST(MultiHeadAttention, SingleHeadWithIdentityOutputIsPlainAttention) {
  std::mt19937_64 rng(4);
  const std::size_t T = 5, d = 4;
  auto p = random_attention_params(d, rng);
  Tensor<double> eye(Shape{d, d}, 0.0);
  for (std::size_t i = 0; i < d; ++i) eye.at(i, i) = 1.0;
  p.output = Var<double>::constant(eye);
  const auto x = Var<double>::constant(random_tensor<double>(Shape{T, d}, rng));
  const auto mask = hat::build_attention_mask<double>(T, TimeWindow{1, 1}, T);
  const auto mha = hat::multi_head_attention(x, p, 1, mask).value();
  const auto sda = hat::scaled_dot_attention(ops::matmul(x, p.query), ops::matmul(x, p.key),
                                             ops::matmul(x, p.value), mask)
                       .value();
  for (std::size_t i = 0; i < mha.size(); ++i) EXPECT_NEAR(mha[i], sda[i], 1e-14);
}

TEST(MultiHeadAttention, HeadPermutationSymmetry) {
  std::mt19937_64 rng(5);
  const std::size_t T = 6, d = 6, heads = 3, dh = 2;
  const auto p = random_attention_params(d, rng);
  const std::vector<std::size_t> order{2, 0, 1};
  // Head i of the permuted model is head order[i] of the original.
  auto permute_cols = [&](const Tensor<double>& w) {
    Tensor<double> out(w.shape());
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t i = 0; i < heads; ++i)
        for (std::size_t j = 0; j < dh; ++j) out.at(r, i * dh + j) = w.at(r, order[i] * dh + j);
    return out;
  };
  hat::LayerParams<double> q = p;
  q.query = Var<double>::constant(permute_cols(p.query.value()));
  q.key = Var<double>::constant(permute_cols(p.key.value()));
  q.value = Var<double>::constant(permute_cols(p.value.value()));
  Tensor<double> wo(Shape{d, d});
  for (std::size_t i = 0; i < heads; ++i)
    for (std::size_t j = 0; j < dh; ++j)
      for (std::size_t c = 0; c < d; ++c) wo.at(i * dh + j, c) = p.output.value().at(order[i] * dh + j, c);
  q.output = Var<double>::constant(wo);

  const auto x = Var<double>::constant(random_tensor<double>(Shape{T, d}, rng));
  const auto mask = hat::build_attention_mask<double>(T, TimeWindow::full(), T);
  const auto a = hat::multi_head_attention(x, p, heads, mask).value();
  const auto b = hat::multi_head_attention(x, q, heads, mask).value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-13);
}

TEST(MultiHeadAttention, MatchesTwoIndependentHeadsT3) {
  std::mt19937_64 rng(6);
  const std::size_t T = 3, d = 4, dh = 2;
  const auto p = random_attention_params(d, rng);
  const auto xt = random_tensor<double>(Shape{T, d}, rng);
  const auto mask = hat::build_attention_mask<double>(T, TimeWindow::full(), T);
  const auto out = hat::multi_head_attention(Var<double>::constant(xt), p, 2, mask).value();

  const Mat x = to_mat(xt);
  const Mat q = matmul(x, to_mat(p.query.value()));
  const Mat k = matmul(x, to_mat(p.key.value()));
  const Mat v = matmul(x, to_mat(p.value.value()));
  const Mat h0 = brute_attention(q, k, v, 0, dh, all_visible(T));
  const Mat h1 = brute_attention(q, k, v, dh, dh, all_visible(T));
  Mat cat(T, std::vector<double>(d));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < dh; ++j) {
      cat[t][j] = h0[t][j];
      cat[t][dh + j] = h1[t][j];
    }
  const Mat ref = matmul(cat, to_mat(p.output.value()));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(out.at(t, j), ref[t][j], 1e-13);
}

// ----- positional encoding ---------------------------------------------

TEST(PositionalEncoding, FirstFrame) {
  const auto pe = hat::positional_encoding<double>(4, 16);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(pe.at(0, 2 * i), 0.0);
    EXPECT_EQ(pe.at(0, 2 * i + 1), 1.0);
  }
}

TEST(PositionalEncoding, ScalarValues) {
  const auto pe = hat::positional_encoding<double>(3, 512);
  EXPECT_NEAR(pe.at(1, 0), 0.8414709848078965, 1e-15);
  // Cosine channels use exponent (2i+1)/d.
  EXPECT_NEAR(pe.at(1, 1), 0.5552174861588813, 1e-15);
  EXPECT_NEAR(pe.at(2, 10), std::sin(2.0 / std::pow(10000.0, 10.0 / 512)), 1e-15);
  EXPECT_NEAR(pe.at(2, 11), std::cos(2.0 / std::pow(10000.0, 11.0 / 512)), 1e-15);
}

// ----- masks -------------------------------------------------------------

TEST(AttentionMask, FullWindowNoPaddingIsZero) {
  const auto m = hat::build_attention_mask<float>(6, TimeWindow::full(), 6);
  for (float v : m.data()) EXPECT_EQ(v, 0.0f);
}

TEST(AttentionMask, CausalWindow) {
  const auto m = hat::build_attention_mask<double>(5, TimeWindow{kU, 0}, 5);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t s = 0; s < 5; ++s) EXPECT_EQ(m.at(t, s) == 0.0, s <= t);
}

TEST(AttentionMask, HandEnumeratedWindow1Left2Right) {
  // Row t lists visible s for window [-1, 2], T = 5.
  const char* expected[5] = {"XXX..", "XXXX.", ".XXXX", "..XXX", "...XX"};
  const auto m = hat::build_attention_mask<double>(5, TimeWindow{1, 2}, 5);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t s = 0; s < 5; ++s) {
      const bool visible = expected[t][s] == 'X';
      EXPECT_EQ(m.at(t, s), visible ? 0.0 : -kInf) << t << "," << s;
    }
}

TEST(AttentionMask, PaddingColumnsAlwaysMasked) {
  const auto m = hat::build_attention_mask<double>(6, TimeWindow::full(), 4);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t s = 4; s < 6; ++s) EXPECT_EQ(m.at(t, s), -kInf);
  // Padding rows see only themselves.
  for (std::size_t t = 4; t < 6; ++t)
    for (std::size_t s = 0; s < 6; ++s) EXPECT_EQ(m.at(t, s) == 0.0, s == t);
}

// ----- accumulated window / parameter counts ----------------------------

TEST(AccumulatedWindow, SixLayersRightTwo) {
  ModelConfig c;
  c.attention_windows = {TimeWindow{kU, 2}};
  const auto acc = hat::accumulated_window(c);
  EXPECT_EQ(acc.total_left, kU);
  EXPECT_EQ(acc.total_right, 12u);
  EXPECT_EQ(acc.conv_lookahead, 6u);
  EXPECT_EQ(acc.total_latency, 18u);
}

TEST(AccumulatedWindow, SelfOnlyUnitKernelHasNoLatency) {
  ModelConfig c = tiny_config(1);
  c.kernel_size = 1;
  c.attention_windows = {TimeWindow{0, 0}};
  const auto acc = hat::accumulated_window(c);
  EXPECT_EQ(acc.total_latency, 0u);
  EXPECT_FALSE(acc.latency_unbounded());
}

TEST(AccumulatedWindow, OfflineIsUnbounded) {
  EXPECT_TRUE(hat::accumulated_window(ModelConfig{}).latency_unbounded());
}

TEST(AccumulatedWindow, PerLayerWindowsSum) {
  ModelConfig c = tiny_config(3);
  c.attention_windows = {{1, 0}, {2, 3}, {0, 1}};
  c.use_conv = false;
  const auto acc = hat::accumulated_window(c);
  EXPECT_EQ(acc.total_left, 3u);
  EXPECT_EQ(acc.total_right, 4u);
  EXPECT_EQ(acc.total_latency, 4u);
}

TEST(ParameterCount, PublishedConfiguration) {
  const auto p = hat::count_parameters(ModelConfig{});
  EXPECT_EQ(p.input_linear, 41472u);
  EXPECT_EQ(p.attention, 6291456u);
  EXPECT_EQ(p.conv, 4721664u);
  EXPECT_EQ(p.feedforward, 12598272u);
  EXPECT_NEAR(p.feedforward / 1e6, 12.61, 0.015);
  EXPECT_EQ(p.layer_norm, 12288u);
  EXPECT_EQ(p.layer_norm_count, 12u);
  EXPECT_NEAR(p.output_linear / 1e6, 2.96, 0.005);
  EXPECT_GE(p.total, 26400000u);
  EXPECT_LE(p.total, 26800000u);
}

TEST(ParameterCount, ZeroLayers) {
  ModelConfig c;
  c.num_layers = 0;
  const auto p = hat::count_parameters(c);
  EXPECT_EQ(p.total, p.input_linear + p.output_linear);
}

TEST(ParameterCount, DoublingModelDimQuadruplesAttention) {
  ModelConfig c;
  const auto a = hat::count_parameters(c).attention;
  c.model_dim *= 2;
  EXPECT_EQ(hat::count_parameters(c).attention, 4 * a);
}

TEST(ParameterCount, MatchesAllocatedStorageForRandomConfigs) {
  std::mt19937_64 rng(12);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  for (int i = 0; i < 50; ++i) {
    ModelConfig c;
    c.num_layers = pick(0, 4);
    c.num_heads = pick(1, 4);
    c.model_dim = c.num_heads * pick(1, 6);
    c.ffn_dim = pick(1, 20);
    c.kernel_size = 2 * pick(0, 3) + 1;
    c.feature_dim = pick(1, 10);
    c.output_dim = pick(1, 10);
    c.use_conv = pick(0, 1);
    c.extra_final_norm = pick(0, 1);
    const auto params = ModelParams<float>::init(c, i);
    std::size_t stored = 0;
    for (const auto& v : params.all()) stored += v.value().size();
    EXPECT_EQ(stored, hat::count_parameters(c).total) << "config " << i;
    EXPECT_EQ(params.num_values(), stored);
  }
}

// ----- encoder layer / stack ---------------------------------------------

TEST(EncoderLayer, ZeroedSublayersAreIdentity) {
  ModelConfig c = tiny_config(1, 8, 2);
  c.use_conv = false;
  auto p = ModelParams<double>::init(c, 3);
  auto& lp = p.layers[0];
  for (auto* v : {&lp.output, &lp.ffn_out_weight, &lp.ffn_out_bias}) v->mutable_value().fill(0.0);
  std::mt19937_64 rng(3);
  const auto x = random_tensor<double>(Shape{5, 8}, rng);
  const auto mask = hat::build_attention_mask<double>(5, TimeWindow::full(), 5);
  const auto y = hat::encoder_layer(Var<double>::constant(x), lp, c, {}, mask, {}, 0).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(EncoderLayer, SelfWindowReceptiveFieldIsConvSpan) {
  ModelConfig c = tiny_config(1, 8, 2);
  const auto p = ModelParams<double>::init(c, 4);
  const auto mask = hat::build_attention_mask<double>(9, TimeWindow{0, 0}, 9);
  std::mt19937_64 rng(4);
  const auto base = random_tensor<double>(Shape{9, 8}, rng);
  const auto y0 = hat::encoder_layer(Var<double>::constant(base), p.layers[0], c, {}, mask, {}, 0).value();
  for (std::size_t t : {0u, 4u, 8u}) {
    Tensor<double> x = base;
    for (std::size_t j = 0; j < 8; ++j) x.at(t, j) += 1.0;
    const auto y = hat::encoder_layer(Var<double>::constant(x), p.layers[0], c, {}, mask, {}, 0).value();
    for (std::size_t s = 0; s < 9; ++s) {
      bool changed = false;
      for (std::size_t j = 0; j < 8; ++j) changed = changed || y.at(s, j) != y0.at(s, j);
      EXPECT_EQ(changed, s + 1 >= t && s <= t + 1) << "impulse " << t << " frame " << s;
    }
  }
}

TEST(EncoderLayer, MatchesCompositionOfOps) {
  ModelConfig c = tiny_config(1, 8, 2);
  const auto p = perturbed_params(c, 5);
  const auto& lp = p.layers[0];
  std::mt19937_64 rng(5);
  const auto x = Var<double>::constant(random_tensor<double>(Shape{4, 8}, rng));
  const auto mask = hat::build_attention_mask<double>(4, TimeWindow{1, 1}, 4);
  const auto y = hat::encoder_layer(x, lp, c, {}, mask, {}, 0).value();

  const double eps = hat::kLayerNormEps;
  auto h = ops::conv1d_same(x, lp.conv_kernel, lp.conv_bias);
  auto a = ops::layer_norm(h, lp.attn_norm_gain, lp.attn_norm_bias, eps);
  auto att = ops::matmul(ops::attention(ops::matmul(a, lp.query), ops::matmul(a, lp.key),
                                        ops::matmul(a, lp.value), 2, mask),
                         lp.output);
  h = ops::add(h, att);
  auto f = ops::layer_norm(h, lp.ffn_norm_gain, lp.ffn_norm_bias, eps);
  auto ffn = ops::linear(ops::relu(ops::linear(f, lp.ffn_in_weight, lp.ffn_in_bias)),
                         lp.ffn_out_weight, lp.ffn_out_bias);
  const auto ref = ops::add(h, ffn).value();
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-14);
}

TEST(EncoderLayer, AttentionFirstOrderDiffers) {
  ModelConfig c = tiny_config(1, 8, 2);
  const auto p = perturbed_params(c, 6);
  std::mt19937_64 rng(6);
  const auto x = Var<double>::constant(random_tensor<double>(Shape{5, 8}, rng));
  const auto mask = hat::build_attention_mask<double>(5, TimeWindow::full(), 5);
  const auto a = hat::encoder_layer(x, p.layers[0], c, {}, mask, {}, 0).value();
  c.block_order = BlockOrder::kAttentionFirst;
  const auto b = hat::encoder_layer(x, p.layers[0], c, {}, mask, {}, 0).value();
  double gap = 0;
  for (std::size_t i = 0; i < a.size(); ++i) gap = std::max(gap, std::abs(a[i] - b[i]));
  EXPECT_GT(gap, 1e-3);
}

TEST(EncoderForward, OutputShapeForAnyLength) {
  const ModelConfig c = tiny_config();
  const auto p = ModelParams<float>::init(c, 1);
  for (std::size_t T : {1u, 2u, 7u, 30u}) {
    const auto y = hat::encoder_forward(Var<float>::constant(Tensor<float>(Shape{T, 6}, 0.5f)), p, c);
    EXPECT_EQ(y.shape(), (Shape{T, 5}));
    EXPECT_TRUE(y.value().all_finite());
  }
}

TEST(EncoderForward, RejectsEmptyAndMismatchedInput) {
  const ModelConfig c = tiny_config();
  const auto p = ModelParams<float>::init(c, 1);
  EXPECT_THROW(hat::encoder_forward(Var<float>::constant(Tensor<float>(Shape{0, 6})), p, c),
               hat::DimensionError);
  EXPECT_THROW(hat::encoder_forward(Var<float>::constant(Tensor<float>(Shape{3, 7})), p, c),
               hat::DimensionError);
}

TEST(EncoderForward, MatchesIndependentImplementation) {
  for (int variant = 0; variant < 4; ++variant) {
    ModelConfig c = tiny_config(2, 8, 2);
    c.extra_final_norm = variant % 2 == 1;
    c.use_positional_encoding = variant < 2;
    c.attention_windows = {TimeWindow{kU, 1}, TimeWindow{2, 0}};
    c.pe_scale = variant == 3 ? 0.5 : 1.0;
    c.use_positional_encoding = c.use_positional_encoding || variant == 3;
    const auto p = perturbed_params(c, 10 + variant);
    std::mt19937_64 rng(variant);
    const auto x = random_tensor<double>(Shape{7, 6}, rng);
    const auto y = hat::encoder_forward(Var<double>::constant(x), p, c).value();
    const Mat ref = reference_encoder(x, p, c);
    for (std::size_t t = 0; t < 7; ++t)
      for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(y.at(t, k), ref[t][k], 1e-11) << variant;
  }
}

TEST(EncoderForward, PaddedBatchMatchesSingleUtterances) {
  const ModelConfig c = tiny_config(2, 8, 2);
  const auto p = perturbed_params(c, 20);
  std::mt19937_64 rng(20);
  const std::vector<std::size_t> lens{6, 3, 4};
  const std::size_t T = 6;
  Tensor<double> batch(Shape{3, T, 6}, 0.0);
  std::vector<Tensor<double>> singles;
  for (std::size_t b = 0; b < 3; ++b) {
    singles.push_back(random_tensor<double>(Shape{lens[b], 6}, rng));
    for (std::size_t t = 0; t < lens[b]; ++t)
      for (std::size_t d = 0; d < 6; ++d) batch.at(b, t, d) = singles[b].at(t, d);
    // Garbage in the padding must not matter either.
    for (std::size_t t = lens[b]; t < T; ++t)
      for (std::size_t d = 0; d < 6; ++d) batch.at(b, t, d) = 100.0;
  }
  const auto yb = hat::encoder_forward(Var<double>::constant(batch), p, c, lens).value();
  for (std::size_t b = 0; b < 3; ++b) {
    const auto ys = hat::encoder_forward(Var<double>::constant(singles[b]), p, c).value();
    for (std::size_t t = 0; t < lens[b]; ++t)
      for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(yb.at(b, t, k), ys.at(t, k), 1e-12);
  }
}

TEST(EncoderForward, EvalModeDeterministicTrainingModeDropsOut) {
  ModelConfig c = tiny_config();
  c.dropout_p = 0.3;
  const auto p = ModelParams<float>::init(c, 2);
  std::mt19937_64 rng(2);
  const auto x = Var<float>::constant(random_tensor<float>(Shape{8, 6}, rng));
  const auto a = hat::encoder_forward(x, p, c).value();
  const auto b = hat::encoder_forward(x, p, c).value();
  const auto t1 = hat::encoder_forward(x, p, c, {}, {.training = true, .seed = 1, .step = 0}).value();
  const auto t2 = hat::encoder_forward(x, p, c, {}, {.training = true, .seed = 1, .step = 0}).value();
  const auto t3 = hat::encoder_forward(x, p, c, {}, {.training = true, .seed = 1, .step = 1}).value();
  bool train_differs = false, step_differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i], b[i]);
    EXPECT_EQ(t1[i], t2[i]);
    train_differs = train_differs || t1[i] != a[i];
    step_differs = step_differs || t1[i] != t3[i];
  }
  EXPECT_TRUE(train_differs);
  EXPECT_TRUE(step_differs);
}

// ----- whole-model properties ---------------------------------------------

TEST(ModelProperties, FullModelGradientCheck) {
  ModelConfig c = tiny_config(2, 16, 2);
  c.extra_final_norm = true;
  c.attention_windows = {TimeWindow::full(), TimeWindow{2, 1}};
  for (std::uint64_t seed : {1u, 2u}) {
    const auto r = hat::testing::model_gradient_check(c, seed, 7);
    EXPECT_LT(r.worst, 1e-5) << r.worst_name;
  }
}

TEST(ModelProperties, GradientCheckWithDropoutMask) {
  ModelConfig c = tiny_config(1, 8, 2);
  c.dropout_p = 0.2;
  const auto r = hat::testing::model_gradient_check(c, 3, 5);
  EXPECT_LT(r.worst, 1e-5) << r.worst_name;
}

TEST(ModelProperties, MaskingIndependence) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    EXPECT_TRUE(hat::testing::masking_independence_trial(seed)) << "seed " << seed;
  }
}

TEST(ModelProperties, EquivarianceDichotomy) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = hat::testing::equivariance_probe(seed);
    EXPECT_LT(p.attention_only, 1e-12);
    EXPECT_GT(p.with_conv, 1e-3);
    EXPECT_GT(p.with_pe, 1e-3);
  }
}
