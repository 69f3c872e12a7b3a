#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "hat/tensor.hpp"

namespace hat {

/// Bad magic, unsupported version or impossible header fields.
class MalformedHeaderError : public DataError {
 public:
  using DataError::DataError;
};

class TruncatedPayloadError : public DataError {
 public:
  using DataError::DataError;
};

class DuplicateUtteranceError : public DataError {
 public:
  using DataError::DataError;
};

struct Utterance {
  std::string id;
  Tensor<float> features;             // [T, D]
  std::vector<std::int32_t> labels;   // empty or length T

  std::size_t num_frames() const { return features.dim(0); }
  std::size_t feature_dim() const { return features.dim(1); }
  bool has_labels() const { return !labels.empty(); }
};

using Dataset = std::vector<Utterance>;

/// Per-dimension (x - mean) / sqrt(var + eps) over the frames of one utterance.
template <typename T>
Tensor<T> cmvn_utterance(const Tensor<T>& features, double eps = 1e-8);

// ---------------------------------------------------------------------------
// Synthetic frame-classification task.
//
// Each frame carries a latent symbol s_t in [0, S) rendered as a fixed random
// prototype vector; one frame per utterance (the anchor, at a uniformly random
// position) additionally carries one of two marker vectors encoding a bit a.
// With M = num_classes / 2 local classes:
//
//   label(t) = ((s_{t-1} + s_{t+1}) mod M) + M * a
//
// where s_{-1} = s_T = 0. The local term needs frames t-1 and t+1 but not
// frame t itself; the anchor term needs one specific, usually distant, frame.
// Each utterance then gets a random per-dimension gain and offset plus white
// noise, which utterance-level CMVN undoes.
// ---------------------------------------------------------------------------

struct SyntheticTaskConfig {
  std::size_t num_utterances = 2000;
  std::size_t min_frames = 20;
  std::size_t max_frames = 60;
  std::size_t feature_dim = 80;
  std::size_t num_classes = 8;
  double noise = 0.1;
  std::uint64_t seed = 0;
};

struct SyntheticLatent {
  std::vector<std::int32_t> symbols;
  std::size_t anchor_frame = 0;
  std::int32_t anchor_value = 0;
};

struct SyntheticTask {
  Dataset utterances;
  std::vector<SyntheticLatent> latents;
  std::size_t num_symbols = 0;
};

/// The label rule above, evaluated on the latent sequence.
std::int32_t synthetic_label(const SyntheticLatent& latent, std::size_t frame,
                             std::size_t num_classes);

SyntheticTask generate_synthetic_task(const SyntheticTaskConfig& config);

// ---------------------------------------------------------------------------
// Utterance file (little-endian):
//   "IAKF" | u32 version = 1 | u32 id length | id bytes (UTF-8)
//   | u32 T | u32 D | u8 has_labels | T*D float32 row-major | [T u32 labels]
// A dataset is a manifest text file listing one utterance filename per line,
// relative to the manifest's directory.
// ---------------------------------------------------------------------------

void write_utterance(std::ostream& out, const Utterance& utt);
Utterance read_utterance(std::istream& in, const std::string& source = "<stream>");
void write_utterance_file(const std::filesystem::path& path, const Utterance& utt);
Utterance read_utterance_file(const std::filesystem::path& path);

/// Writes <dir>/<id>.iakf for each utterance plus <dir>/manifest.txt; returns
/// the manifest path.
std::filesystem::path write_dataset(const std::filesystem::path& dir, const Dataset& data);
/// Reads every file named by the manifest. Empty manifests and duplicate ids
/// are errors.
Dataset read_dataset(const std::filesystem::path& manifest);

/// Applies cmvn_utterance to every utterance in place.
void normalize_dataset(Dataset& data, double eps = 1e-8);

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Indices into a dataset forming one batch.
using BatchPlan = std::vector<std::size_t>;

/// Length-bucketed batches whose padded size (count * longest) stays within
/// frames_per_batch. Ties in length and the batch order are shuffled from
/// `seed`; every index appears exactly once.
std::vector<BatchPlan> make_batches(const Dataset& data, std::span<const std::size_t> indices,
                                    std::size_t frames_per_batch, std::uint64_t seed);
std::vector<BatchPlan> make_batches(const Dataset& data, std::size_t frames_per_batch,
                                    std::uint64_t seed);

struct Batch {
  Tensor<float> features;             // [B, Tmax, D], zero padded
  std::vector<std::int32_t> labels;   // [B * Tmax], 0 on padding
  std::vector<std::size_t> lengths;   // [B]
  std::vector<std::string> ids;

  std::size_t size() const { return lengths.size(); }
  std::size_t max_frames() const { return features.dim(1); }
  std::size_t valid_frames() const;
  /// 1 for frames t < lengths[b], 0 for padding; [B * Tmax].
  std::vector<float> frame_mask() const;
};

Batch assemble_batch(const Dataset& data, const BatchPlan& plan);

/// Deterministic train/validation split: an utterance is held out when a
/// seeded hash of its id falls below `fraction`.
bool is_validation_utterance(const std::string& id, std::uint64_t seed, double fraction = 0.1);

}  // namespace hat
