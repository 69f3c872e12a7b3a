#include "hat/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "random_util.hpp"

namespace hat {

namespace {

constexpr char kUtteranceMagic[4] = {'I', 'A', 'K', 'F'};
constexpr std::uint32_t kUtteranceVersion = 1;
constexpr std::uint32_t kMaxIdLength = 1u << 16;

template <typename Reader>
std::vector<std::uint32_t> read_u32_block(Reader& r, std::size_t count, const char* what) {
  std::vector<char> raw(count * 4);
  r.bytes(raw.data(), raw.size(), what);
  std::vector<std::uint32_t> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto* b = reinterpret_cast<const unsigned char*>(raw.data() + 4 * i);
    out[i] = static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
             static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> cmvn_utterance(const Tensor<T>& features, double eps) {
  if (features.rank() != 2 || features.dim(0) == 0) {
    throw DimensionError("cmvn expects [T, D] with T >= 1, got " + features.shape().to_string());
  }
  const std::size_t frames = features.dim(0);
  const std::size_t dims = features.dim(1);
  Tensor<T> out(features.shape());
  for (std::size_t d = 0; d < dims; ++d) {
    double mean = 0;
    for (std::size_t t = 0; t < frames; ++t) mean += features.at(t, d);
    mean /= static_cast<double>(frames);
    double var = 0;
    for (std::size_t t = 0; t < frames; ++t) {
      const double c = features.at(t, d) - mean;
      var += c * c;
    }
    var /= static_cast<double>(frames);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t t = 0; t < frames; ++t) {
      out.at(t, d) = static_cast<T>((features.at(t, d) - mean) * inv);
    }
  }
  return out;
}

template Tensor<float> cmvn_utterance(const Tensor<float>&, double);
template Tensor<double> cmvn_utterance(const Tensor<double>&, double);

std::int32_t synthetic_label(const SyntheticLatent& latent, std::size_t frame,
                             std::size_t num_classes) {
  const auto local_classes = static_cast<std::int32_t>(std::max<std::size_t>(1, num_classes / 2));
  const std::size_t frames = latent.symbols.size();
  const std::int32_t prev = frame > 0 ? latent.symbols[frame - 1] : 0;
  const std::int32_t next = frame + 1 < frames ? latent.symbols[frame + 1] : 0;
  return (prev + next) % local_classes + local_classes * latent.anchor_value;
}

SyntheticTask generate_synthetic_task(const SyntheticTaskConfig& c) {
  if (c.num_classes < 2) throw ConfigError("synthetic task needs num_classes >= 2");
  if (c.min_frames < 1 || c.max_frames < c.min_frames) {
    throw ConfigError("synthetic task needs 1 <= min_frames <= max_frames");
  }
  if (c.feature_dim == 0) throw ConfigError("synthetic task needs feature_dim >= 1");

  detail::UniformSource rng(c.seed);
  SyntheticTask task;
  task.num_symbols = std::max<std::size_t>(2, c.num_classes / 2);
  const std::size_t dims = c.feature_dim;

  auto gaussian_rows = [&](std::size_t rows, double scale) {
    std::vector<std::vector<double>> m(rows, std::vector<double>(dims));
    for (auto& row : m) {
      for (auto& v : row) v = scale * rng.normal();
    }
    return m;
  };
  const auto prototypes = gaussian_rows(task.num_symbols, 1.0);
  const auto markers = gaussian_rows(2, 1.5);

  task.utterances.reserve(c.num_utterances);
  task.latents.reserve(c.num_utterances);
  for (std::size_t u = 0; u < c.num_utterances; ++u) {
    const std::size_t frames = c.min_frames + rng.below(c.max_frames - c.min_frames + 1);
    SyntheticLatent latent;
    latent.symbols.resize(frames);
    for (auto& s : latent.symbols) s = static_cast<std::int32_t>(rng.below(task.num_symbols));
    latent.anchor_frame = rng.below(frames);
    latent.anchor_value = static_cast<std::int32_t>(rng.below(2));

    std::vector<double> gain(dims), offset(dims);
    for (std::size_t d = 0; d < dims; ++d) {
      gain[d] = std::exp(0.3 * rng.normal());
      offset[d] = 2.0 * rng.normal();
    }

    Utterance utt;
    char id[32];
    std::snprintf(id, sizeof(id), "synth-%06zu", u);
    utt.id = id;
    utt.features = Tensor<float>(Shape{frames, dims});
    utt.labels.resize(frames);
    for (std::size_t t = 0; t < frames; ++t) {
      const auto& proto = prototypes[static_cast<std::size_t>(latent.symbols[t])];
      for (std::size_t d = 0; d < dims; ++d) {
        double v = proto[d] + c.noise * rng.normal();
        if (t == latent.anchor_frame) v += markers[static_cast<std::size_t>(latent.anchor_value)][d];
        utt.features.at(t, d) = static_cast<float>(gain[d] * v + offset[d]);
      }
      utt.labels[t] = synthetic_label(latent, t, c.num_classes);
    }
    task.utterances.push_back(std::move(utt));
    task.latents.push_back(std::move(latent));
  }
  return task;
}

void write_utterance(std::ostream& out, const Utterance& utt) {
  if (utt.features.rank() != 2 || utt.num_frames() == 0) {
    throw DataError("utterance '" + utt.id + "' has no frames");
  }
  if (utt.has_labels() && utt.labels.size() != utt.num_frames()) {
    throw DataError("utterance '" + utt.id + "' has " + std::to_string(utt.labels.size()) +
                    " labels for " + std::to_string(utt.num_frames()) + " frames");
  }
  out.write(kUtteranceMagic, 4);
  detail::put_u32(out, kUtteranceVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(utt.id.size()));
  out.write(utt.id.data(), static_cast<std::streamsize>(utt.id.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(utt.num_frames()));
  detail::put_u32(out, static_cast<std::uint32_t>(utt.feature_dim()));
  detail::put_u8(out, utt.has_labels() ? 1 : 0);
  for (float v : utt.features.data()) detail::put_f32(out, v);
  for (std::int32_t l : utt.labels) detail::put_u32(out, static_cast<std::uint32_t>(l));
}

Utterance read_utterance(std::istream& in, const std::string& source) {
  detail::LeReader<MalformedHeaderError> header(in, source);
  char magic[4];
  header.bytes(magic, 4, "truncated header (magic)");
  if (std::memcmp(magic, kUtteranceMagic, 4) != 0) {
    throw MalformedHeaderError(source + ": bad magic, not an IAKF utterance file");
  }
  const std::uint32_t version = header.u32("truncated header (version)");
  if (version != kUtteranceVersion) {
    throw MalformedHeaderError(source + ": unsupported version " + std::to_string(version));
  }
  const std::uint32_t id_len = header.u32("truncated header (id length)");
  if (id_len > kMaxIdLength) throw MalformedHeaderError(source + ": id length too large");
  Utterance utt;
  utt.id.resize(id_len);
  header.bytes(utt.id.data(), id_len, "truncated header (id)");
  const std::uint32_t frames = header.u32("truncated header (T)");
  const std::uint32_t dims = header.u32("truncated header (D)");
  const std::uint8_t has_labels = header.u8("truncated header (label flag)");
  if (frames == 0) throw MalformedHeaderError(source + ": utterance '" + utt.id + "' has T=0");
  if (dims == 0) throw MalformedHeaderError(source + ": utterance '" + utt.id + "' has D=0");
  if (has_labels > 1) throw MalformedHeaderError(source + ": bad label flag");

  detail::LeReader<TruncatedPayloadError> payload(in, source);
  const std::size_t count = static_cast<std::size_t>(frames) * dims;
  const auto bits = read_u32_block(payload, count, "truncated payload (features)");
  std::vector<float> values(count);
  for (std::size_t i = 0; i < count; ++i) values[i] = std::bit_cast<float>(bits[i]);
  utt.features = Tensor<float>(Shape{frames, dims}, std::move(values));
  if (has_labels) {
    const auto labels = read_u32_block(payload, frames, "truncated payload (labels)");
    utt.labels.reserve(frames);
    for (std::uint32_t l : labels) {
      if (l > static_cast<std::uint32_t>(std::numeric_limits<std::int32_t>::max())) {
        throw DataError(source + ": label " + std::to_string(l) + " too large");
      }
      utt.labels.push_back(static_cast<std::int32_t>(l));
    }
  }
  return utt;
}

void write_utterance_file(const std::filesystem::path& path, const Utterance& utt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  write_utterance(out, utt);
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

Utterance read_utterance_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open utterance file '" + path.string() + "'");
  return read_utterance(in, path.string());
}

std::filesystem::path write_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::filesystem::create_directories(dir);
  const auto manifest = dir / "manifest.txt";
  std::ofstream list(manifest, std::ios::trunc);
  if (!list) throw DataError("cannot write manifest '" + manifest.string() + "'");
  std::set<std::string> seen;
  for (const auto& utt : data) {
    if (!seen.insert(utt.id).second) {
      throw DuplicateUtteranceError("duplicate utterance id '" + utt.id + "'");
    }
    const std::string name = utt.id + ".iakf";
    write_utterance_file(dir / name, utt);
    list << name << '\n';
  }
  return manifest;
}

Dataset read_dataset(const std::filesystem::path& manifest) {
  std::ifstream list(manifest);
  if (!list) throw DataError("cannot open manifest '" + manifest.string() + "'");
  const auto base = manifest.parent_path();
  Dataset data;
  std::set<std::string> seen;
  std::string line;
  while (std::getline(list, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    const std::filesystem::path file = line.substr(first, last - first + 1);
    Utterance utt = read_utterance_file(file.is_absolute() ? file : base / file);
    if (!seen.insert(utt.id).second) {
      throw DuplicateUtteranceError(manifest.string() + ": duplicate utterance id '" + utt.id + "'");
    }
    data.push_back(std::move(utt));
  }
  if (data.empty()) throw DataError("manifest '" + manifest.string() + "' lists no utterances");
  return data;
}

void normalize_dataset(Dataset& data, double eps) {
  for (auto& utt : data) utt.features = cmvn_utterance(utt.features, eps);
}

std::vector<BatchPlan> make_batches(const Dataset& data, std::span<const std::size_t> indices,
                                    std::size_t frames_per_batch, std::uint64_t seed) {
  for (std::size_t i : indices) {
    if (data.at(i).num_frames() > frames_per_batch) {
      throw DataError("utterance '" + data[i].id + "' has " +
                      std::to_string(data[i].num_frames()) + " frames, more than frames_per_batch " +
                      std::to_string(frames_per_batch));
    }
  }
  detail::UniformSource rng(seed);
  std::vector<std::size_t> order(indices.begin(), indices.end());
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return data[a].num_frames() < data[b].num_frames();
  });

  std::vector<BatchPlan> batches;
  BatchPlan current;
  for (std::size_t idx : order) {
    // Sorted ascending, so the newcomer sets the padded length.
    if (!current.empty() && (current.size() + 1) * data[idx].num_frames() > frames_per_batch) {
      batches.push_back(std::move(current));
      current.clear();
    }
    current.push_back(idx);
  }
  if (!current.empty()) batches.push_back(std::move(current));
  for (std::size_t i = batches.size(); i > 1; --i) std::swap(batches[i - 1], batches[rng.below(i)]);
  return batches;
}

std::vector<BatchPlan> make_batches(const Dataset& data, std::size_t frames_per_batch,
                                    std::uint64_t seed) {
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return make_batches(data, all, frames_per_batch, seed);
}

std::size_t Batch::valid_frames() const {
  std::size_t n = 0;
  for (std::size_t len : lengths) n += len;
  return n;
}

std::vector<float> Batch::frame_mask() const {
  const std::size_t tmax = max_frames();
  std::vector<float> mask(size() * tmax, 0.0f);
  for (std::size_t b = 0; b < size(); ++b) {
    std::fill(mask.begin() + static_cast<std::ptrdiff_t>(b * tmax),
              mask.begin() + static_cast<std::ptrdiff_t>(b * tmax + lengths[b]), 1.0f);
  }
  return mask;
}

Batch assemble_batch(const Dataset& data, const BatchPlan& plan) {
  if (plan.empty()) throw DataError("empty batch");
  std::size_t tmax = 0;
  const std::size_t dims = data.at(plan.front()).feature_dim();
  for (std::size_t i : plan) {
    tmax = std::max(tmax, data.at(i).num_frames());
    if (data[i].feature_dim() != dims) {
      throw DataError("utterance '" + data[i].id + "' has feature dim " +
                      std::to_string(data[i].feature_dim()) + ", expected " + std::to_string(dims));
    }
  }
  Batch batch;
  batch.features = Tensor<float>(Shape{plan.size(), tmax, dims});
  batch.labels.assign(plan.size() * tmax, 0);
  for (std::size_t b = 0; b < plan.size(); ++b) {
    const Utterance& utt = data[plan[b]];
    std::copy(utt.features.data().begin(), utt.features.data().end(),
              batch.features.raw() + b * tmax * dims);
    for (std::size_t t = 0; t < utt.num_frames(); ++t) {
      batch.labels[b * tmax + t] = utt.has_labels() ? utt.labels[t] : -1;
    }
    batch.lengths.push_back(utt.num_frames());
    batch.ids.push_back(utt.id);
  }
  return batch;
}

bool is_validation_utterance(const std::string& id, std::uint64_t seed, double fraction) {
  return detail::unit_double(detail::mix64(detail::fnv1a(id) ^ detail::mix64(seed))) < fraction;
}

}  // namespace hat
