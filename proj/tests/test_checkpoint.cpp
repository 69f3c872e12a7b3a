#include <gtest/gtest.h>

#include <cstring>
#include <sstream>

#include "hat/checkpoint.hpp"
#include "model_checks.hpp"

using hat::ModelConfig;
using hat::ModelParams;

namespace {

ModelConfig varied_config() {
  ModelConfig c = hat::testing::tiny_config(3, 8, 2);
  c.extra_final_norm = true;
  c.block_order = hat::BlockOrder::kAttentionFirst;
  c.dropout_p = 0.125;
  c.pe_scale = 0.5;
  c.attention_windows = {{hat::TimeWindow::kUnbounded, 2}, {4, 0}, {1, 1}};
  return c;
}

std::string write(const ModelConfig& c, const ModelParams<float>& p) {
  std::ostringstream out(std::ios::binary);
  hat::write_checkpoint(out, c, p);
  return out.str();
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  for (bool conv : {true, false}) {
    ModelConfig c = varied_config();
    c.use_conv = conv;
    const auto params = ModelParams<float>::init(c, 17);
    std::istringstream in(write(c, params));
    const auto ck = hat::read_checkpoint<float>(in);
    EXPECT_EQ(ck.config, c);
    const auto a = params.all();
    const auto b = ck.params.all();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].name(), b[i].name());
      ASSERT_EQ(a[i].shape(), b[i].shape());
      EXPECT_EQ(std::memcmp(a[i].value().raw(), b[i].value().raw(), a[i].value().size() * 4), 0);
    }
  }
}

TEST(Checkpoint, WriteReadWriteIsByteIdentical) {
  const ModelConfig c = varied_config();
  const std::string first = write(c, ModelParams<float>::init(c, 3));
  std::istringstream in(first);
  const auto ck = hat::read_checkpoint<float>(in);
  EXPECT_EQ(write(ck.config, ck.params), first);
}

TEST(Checkpoint, ReloadedModelGivesSameOutputs) {
  const ModelConfig c = hat::testing::tiny_config();
  const auto params = ModelParams<float>::init(c, 8);
  std::istringstream in(write(c, params));
  const auto ck = hat::read_checkpoint<float>(in);
  std::mt19937_64 rng(1);
  const auto x = hat::testing::random_tensor<float>(hat::Shape{9, c.feature_dim}, rng);
  const auto a = hat::encoder_forward(hat::Var<float>::constant(x), params, c).value();
  const auto b = hat::encoder_forward(hat::Var<float>::constant(x), ck.params, ck.config).value();
  EXPECT_EQ(std::memcmp(a.raw(), b.raw(), a.size() * 4), 0);
}

TEST(Checkpoint, ValueCountMatchesParameterCount) {
  const ModelConfig c = varied_config();
  const std::string bytes = write(c, ModelParams<float>::init(c, 1));
  const std::size_t values = hat::count_parameters(c).total;
  EXPECT_EQ(ModelParams<float>::zeros(c).num_values(), values);
  // The file ends with exactly `values` float32 numbers.
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - values * 4 - 8, 8);
  EXPECT_EQ(stored, values);
}

TEST(Checkpoint, RejectsBadInput) {
  const ModelConfig c = hat::testing::tiny_config();
  const std::string good = write(c, ModelParams<float>::init(c, 1));

  std::string magic = good;
  magic[1] = 'X';
  std::istringstream a(magic);
  EXPECT_THROW(hat::read_checkpoint<float>(a), hat::DataError);

  std::istringstream b(good.substr(0, good.size() - 3));
  EXPECT_THROW(hat::read_checkpoint<float>(b), hat::DataError);

  std::string heads = good;
  heads[16] = 3;  // num_heads no longer divides model_dim
  std::istringstream d(heads);
  EXPECT_THROW(hat::read_checkpoint<float>(d), hat::DataError);

  EXPECT_THROW(hat::load_checkpoint<float>("/nonexistent/model.ckpt"), hat::DataError);
}

TEST(Checkpoint, MismatchedParamsRejectedOnWrite) {
  const ModelConfig c = hat::testing::tiny_config();
  ModelConfig other = c;
  other.num_layers = 1;
  std::ostringstream out;
  EXPECT_THROW(hat::write_checkpoint(out, c, ModelParams<float>::init(other, 1)), hat::ConfigError);
}
