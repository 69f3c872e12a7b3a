#include "hat/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <limits>

#include "binary_io.hpp"

namespace hat {

namespace {

constexpr char kMagic[4] = {'H', 'A', 'T', 'M'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kUnboundedExtent = 0xffffffffu;

std::uint32_t encode_extent(std::size_t e) {
  if (e == TimeWindow::kUnbounded) return kUnboundedExtent;
  if (e >= kUnboundedExtent) throw ConfigError("window extent too large to serialize");
  return static_cast<std::uint32_t>(e);
}

std::size_t decode_extent(std::uint32_t e) {
  return e == kUnboundedExtent ? TimeWindow::kUnbounded : e;
}

std::uint32_t narrow(std::size_t v, const char* what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) {
    throw ConfigError(std::string(what) + " too large to serialize");
  }
  return static_cast<std::uint32_t>(v);
}

}  // namespace

template <typename T>
void write_checkpoint(std::ostream& out, const ModelConfig& c, const ModelParams<T>& params) {
  using namespace detail;
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, narrow(c.num_layers, "num_layers"));
  put_u32(out, narrow(c.model_dim, "model_dim"));
  put_u32(out, narrow(c.num_heads, "num_heads"));
  put_u32(out, narrow(c.ffn_dim, "ffn_dim"));
  put_u32(out, narrow(c.kernel_size, "kernel_size"));
  put_u32(out, narrow(c.feature_dim, "feature_dim"));
  put_u32(out, narrow(c.output_dim, "output_dim"));
  put_u8(out, c.use_positional_encoding ? 1 : 0);
  put_u8(out, c.use_conv ? 1 : 0);
  put_u8(out, c.extra_final_norm ? 1 : 0);
  put_u8(out, c.conv_residual ? 1 : 0);
  put_u8(out, static_cast<std::uint8_t>(c.block_order));
  put_f64(out, c.dropout_p);
  put_f64(out, c.pe_scale);
  put_u32(out, narrow(c.attention_windows.size(), "window count"));
  for (const auto& w : c.attention_windows) {
    put_u32(out, encode_extent(w.left));
    put_u32(out, encode_extent(w.right));
  }
  const auto all = params.all();
  std::size_t count = 0;
  for (const auto& p : all) count += p.value().size();
  if (count != count_parameters(c).total) {
    throw ConfigError("parameters do not match the checkpoint config");
  }
  put_u64(out, count);
  for (const auto& p : all) {
    for (T v : p.value().data()) put_f32(out, static_cast<float>(v));
  }
}

template <typename T>
Checkpoint<T> read_checkpoint(std::istream& in, const std::string& source) {
  detail::LeReader<DataError> r(in, source);
  char magic[4];
  r.bytes(magic, 4, "truncated checkpoint header");
  if (std::memcmp(magic, kMagic, 4) != 0) throw DataError(source + ": not a model checkpoint");
  const std::uint32_t version = r.u32("truncated checkpoint header");
  if (version != kVersion) {
    throw DataError(source + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint<T> ck;
  ModelConfig& c = ck.config;
  c.num_layers = r.u32("truncated config");
  c.model_dim = r.u32("truncated config");
  c.num_heads = r.u32("truncated config");
  c.ffn_dim = r.u32("truncated config");
  c.kernel_size = r.u32("truncated config");
  c.feature_dim = r.u32("truncated config");
  c.output_dim = r.u32("truncated config");
  c.use_positional_encoding = r.u8("truncated config") != 0;
  c.use_conv = r.u8("truncated config") != 0;
  c.extra_final_norm = r.u8("truncated config") != 0;
  c.conv_residual = r.u8("truncated config") != 0;
  const std::uint8_t order = r.u8("truncated config");
  if (order > 1) throw DataError(source + ": bad block order " + std::to_string(order));
  c.block_order = static_cast<BlockOrder>(order);
  c.dropout_p = r.f64("truncated config");
  c.pe_scale = r.f64("truncated config");
  const std::uint32_t windows = r.u32("truncated config");
  if (windows > c.num_layers && windows > 1) throw DataError(source + ": bad window count");
  for (std::uint32_t i = 0; i < windows; ++i) {
    TimeWindow w;
    w.left = decode_extent(r.u32("truncated config"));
    w.right = decode_extent(r.u32("truncated config"));
    c.attention_windows.push_back(w);
  }
  try {
    c.validate(false);
  } catch (const ConfigError& e) {
    throw DataError(source + ": invalid config in checkpoint: " + e.what());
  }
  const std::uint64_t count = r.u64("truncated parameter count");
  if (count != count_parameters(c).total) {
    throw DataError(source + ": parameter count " + std::to_string(count) +
                    " does not match config (" + std::to_string(count_parameters(c).total) + ")");
  }
  ck.params = ModelParams<T>::zeros(c);
  for (auto& p : ck.params.all()) {
    for (T& v : p.mutable_value().data()) v = static_cast<T>(r.f32("truncated parameters"));
  }
  return ck;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ModelParams<T>& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  write_checkpoint(out, config, params);
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  return read_checkpoint<T>(in, path.string());
}

#define HAT_INSTANTIATE(T)                                                                   \
  template void write_checkpoint(std::ostream&, const ModelConfig&, const ModelParams<T>&);  \
  template Checkpoint<T> read_checkpoint<T>(std::istream&, const std::string&);              \
  template void save_checkpoint(const std::filesystem::path&, const ModelConfig&,            \
                                const ModelParams<T>&);                                      \
  template Checkpoint<T> load_checkpoint<T>(const std::filesystem::path&);

HAT_INSTANTIATE(float)
HAT_INSTANTIATE(double)

}  // namespace hat
