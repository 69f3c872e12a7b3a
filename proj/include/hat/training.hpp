#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "hat/autodiff.hpp"
#include "hat/data.hpp"
#include "hat/model.hpp"

namespace hat {

/// Training loss became NaN/Inf.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, std::uint64_t step)
      : NumericalError(what), step_(step) {}
  std::uint64_t step() const { return step_; }

 private:
  std::uint64_t step_;
};

// ---------------------------------------------------------------------------
// Frame-level cross entropy
// ---------------------------------------------------------------------------

template <typename T>
struct FrameLoss {
  Var<T> loss;  // mean over valid frames, differentiable
  std::size_t frames = 0;
  std::size_t correct = 0;
  /// Sum of -log p(label) over each utterance's valid frames.
  std::vector<double> utterance_loss_sums;

  double accuracy() const { return frames ? static_cast<double>(correct) / frames : 0.0; }
};

/// logits [T, C] or [B, T, C]; labels [B * T]; lengths [B] (empty means all
/// frames valid). Padding frames carry no weight. `ids` names utterances in
/// label errors.
template <typename T>
FrameLoss<T> cross_entropy_frame_loss(const Var<T>& logits, std::span<const std::int32_t> labels,
                                      std::span<const std::size_t> lengths = {},
                                      std::span<const std::string> ids = {});

// ---------------------------------------------------------------------------
// Learning-rate schedule and optimizer
// ---------------------------------------------------------------------------

struct ScheduleConfig {
  std::size_t model_dim = 512;
  std::size_t warmup_steps = 4000;
  double multiplier = 1.0;
};

/// multiplier * d^-0.5 * min(step^-0.5, step * warmup^-1.5); step >= 1.
double noam_lr(std::uint64_t step, const ScheduleConfig& schedule);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

template <typename T>
class AdamOptimizer {
 public:
  AdamOptimizer() = default;
  AdamOptimizer(std::vector<Var<T>> params, AdamConfig config);

  /// One bias-corrected Adam update from the parameters' accumulated
  /// gradients. Any non-finite gradient aborts the whole update with a
  /// NumericalError naming the parameter.
  void step(double lr);
  void zero_grad();

  std::uint64_t steps() const { return steps_; }
  const std::vector<Var<T>>& params() const { return params_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }

 private:
  std::vector<Var<T>> params_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  AdamConfig config_;
  std::uint64_t steps_ = 0;
};

template <typename T>
struct TrainState {
  ModelParams<T> params;
  AdamOptimizer<T> optimizer;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  double best_valid_loss = std::numeric_limits<double>::infinity();

  static TrainState create(const ModelConfig& config, const AdamConfig& adam, std::uint64_t seed);
};

// ---------------------------------------------------------------------------
// Evaluation and training loop
// ---------------------------------------------------------------------------

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t frames = 0;
};

/// Eval-mode CE loss and frame accuracy over the selected utterances (all
/// when `indices` is empty). Features are used as given.
template <typename T>
EvalResult evaluate(const ModelParams<T>& params, const ModelConfig& config, const Dataset& data,
                    std::size_t frames_per_batch, std::span<const std::size_t> indices = {});

struct TrainOptions {
  ModelConfig model;
  ScheduleConfig schedule;
  AdamConfig adam;
  std::size_t epochs = 10;
  std::size_t frames_per_batch = 2000;
  std::uint64_t seed = 0;
  double valid_fraction = 0.1;
  /// Stop after this many epochs without validation improvement; 0 disables.
  std::size_t patience = 0;
  std::size_t log_interval = 50;
  /// When set, epoch_<n>.ckpt and final.ckpt are written here.
  std::filesystem::path checkpoint_dir;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  bool has_valid = false;
  double valid_loss = 0.0;
  double valid_accuracy = 0.0;
};

struct TrainResult {
  TrainState<float> state;
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> valid_indices;
};

/// Deterministic CE training on features used as given (normalize first).
/// Writes key=value records to `log` when non-null. Throws DivergenceError
/// on a non-finite training loss.
TrainResult train_loop(const TrainOptions& options, const Dataset& data, std::ostream* log = nullptr);

}  // namespace hat
