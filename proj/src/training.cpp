#include "hat/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "hat/checkpoint.hpp"
#include "hat/ops.hpp"
#include "random_util.hpp"

namespace hat {

namespace {

std::string fmt_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

template <typename T>
FrameLoss<T> cross_entropy_frame_loss(const Var<T>& logits, std::span<const std::int32_t> labels,
                                      std::span<const std::size_t> lengths,
                                      std::span<const std::string> ids) {
  const Shape& s = logits.shape();
  if (s.rank() != 2 && s.rank() != 3) {
    throw DimensionError("cross entropy expects [T, C] or [B, T, C] logits, got " + s.to_string());
  }
  const std::size_t batch = s.rank() == 3 ? s[0] : 1;
  const std::size_t time = s[s.rank() - 2];
  const std::size_t classes = s.back();
  if (labels.size() != batch * time) {
    throw DimensionError("cross entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(batch * time) + " frames");
  }
  std::vector<std::size_t> lens(lengths.begin(), lengths.end());
  if (lens.empty()) lens.assign(batch, time);
  if (lens.size() != batch) throw DimensionError("cross entropy: lengths do not match batch");

  FrameLoss<T> result;
  for (std::size_t len : lens) {
    if (len > time) throw DimensionError("cross entropy: length exceeds time axis");
    result.frames += len;
  }
  if (result.frames == 0) throw DataError("cross entropy over zero valid frames");

  const T weight = T{1} / static_cast<T>(result.frames);
  std::vector<T> weights(batch * time, T{0});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < lens[b]; ++t) {
      const std::int32_t label = labels[b * time + t];
      if (label < 0 || static_cast<std::size_t>(label) >= classes) {
        const std::string who = b < ids.size() ? ids[b] : "#" + std::to_string(b);
        throw DataError("utterance '" + who + "' frame " + std::to_string(t) + ": label " +
                        std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
      }
      weights[b * time + t] = weight;
    }
  }

  const Var<T> log_probs = ops::log_softmax(logits);
  result.loss = ops::weighted_nll(log_probs, labels, std::span<const T>(weights));

  result.utterance_loss_sums.assign(batch, 0.0);
  const T* lp = log_probs.value().raw();
  const T* lg = logits.value().raw();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < lens[b]; ++t) {
      const std::size_t row = b * time + t;
      const auto label = static_cast<std::size_t>(labels[row]);
      result.utterance_loss_sums[b] -= static_cast<double>(lp[row * classes + label]);
      const T* r = lg + row * classes;
      const auto best = static_cast<std::size_t>(std::max_element(r, r + classes) - r);
      if (best == label) ++result.correct;
    }
  }
  return result;
}

double noam_lr(std::uint64_t step, const ScheduleConfig& schedule) {
  if (step == 0) throw ConfigError("noam_lr: step must be >= 1");
  if (schedule.warmup_steps == 0) throw ConfigError("noam_lr: warmup_steps must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(schedule.warmup_steps);
  return schedule.multiplier / std::sqrt(static_cast<double>(schedule.model_dim)) *
         std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

template <typename T>
AdamOptimizer<T>::AdamOptimizer(std::vector<Var<T>> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p.shape());
    v_.emplace_back(p.shape());
  }
}

template <typename T>
void AdamOptimizer<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
void AdamOptimizer<T>::step(double lr) {
  double norm_sq = 0.0;
  for (const auto& p : params_) {
    const Tensor<T>& g = p.node()->grad;
    for (T v : g.data()) {
      if (!std::isfinite(v)) {
        throw NumericalError("non-finite gradient in parameter '" + p.name() + "'");
      }
      norm_sq += static_cast<double>(v) * static_cast<double>(v);
    }
  }
  double clip = 1.0;
  if (config_.clip_norm > 0.0) {
    const double norm = std::sqrt(norm_sq);
    if (norm > config_.clip_norm) clip = config_.clip_norm / norm;
  }

  ++steps_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor<T>& g = params_[i].node()->grad;
    T* w = params_[i].mutable_value().raw();
    T* m = m_[i].raw();
    T* v = v_[i].raw();
    for (std::size_t j = 0; j < m_[i].size(); ++j) {
      const double gj = g.empty() ? 0.0 : static_cast<double>(g[j]) * clip;
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = lr * (mj / c1) / (std::sqrt(vj / c2) + config_.eps);
      w[j] = static_cast<T>(static_cast<double>(w[j]) - update);
    }
  }
}

template <typename T>
TrainState<T> TrainState<T>::create(const ModelConfig& config, const AdamConfig& adam,
                                    std::uint64_t seed) {
  config.validate(false);
  TrainState state;
  state.params = ModelParams<T>::init(config, seed);
  state.optimizer = AdamOptimizer<T>(state.params.all(), adam);
  state.seed = seed;
  return state;
}

template <typename T>
EvalResult evaluate(const ModelParams<T>& params, const ModelConfig& config, const Dataset& data,
                    std::size_t frames_per_batch, std::span<const std::size_t> indices) {
  std::vector<std::size_t> selected(indices.begin(), indices.end());
  if (selected.empty()) {
    selected.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) selected[i] = i;
  }
  if (selected.empty()) throw DataError("evaluation over an empty dataset");
  for (std::size_t i : selected) {
    if (data.at(i).feature_dim() != config.feature_dim) {
      throw DimensionError("utterance '" + data[i].id + "' has feature dim " +
                           std::to_string(data[i].feature_dim()) + " but the model expects " +
                           std::to_string(config.feature_dim));
    }
  }
  double loss_sum = 0.0;
  std::size_t frames = 0;
  std::size_t correct = 0;
  for (const auto& plan : make_batches(data, selected, frames_per_batch, 0)) {
    const Batch batch = assemble_batch(data, plan);
    const Var<T> x = Var<T>::constant(batch.features.cast<T>());
    const Var<T> logits = encoder_forward(x, params, config, batch.lengths);
    const FrameLoss<T> fl = cross_entropy_frame_loss(logits, batch.labels, batch.lengths, batch.ids);
    for (double s : fl.utterance_loss_sums) loss_sum += s;
    frames += fl.frames;
    correct += fl.correct;
  }
  return {loss_sum / static_cast<double>(frames),
          static_cast<double>(correct) / static_cast<double>(frames), frames};
}

TrainResult train_loop(const TrainOptions& options, const Dataset& data, std::ostream* log) {
  options.model.validate(false);
  if (data.empty()) throw DataError("training dataset is empty");
  for (const auto& utt : data) {
    if (!utt.has_labels()) throw DataError("utterance '" + utt.id + "' has no labels");
    if (utt.feature_dim() != options.model.feature_dim) {
      throw DimensionError("utterance '" + utt.id + "' has feature dim " +
                           std::to_string(utt.feature_dim()) + " but the model expects " +
                           std::to_string(options.model.feature_dim));
    }
  }

  TrainResult result;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (is_validation_utterance(data[i].id, options.seed, options.valid_fraction)) {
      result.valid_indices.push_back(i);
    } else {
      result.train_indices.push_back(i);
    }
  }
  if (result.train_indices.empty()) throw DataError("validation split left no training data");

  result.state = TrainState<float>::create(options.model, options.adam, options.seed);
  TrainState<float>& state = result.state;
  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);

  std::size_t epochs_since_best = 0;
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    const auto plans = make_batches(data, result.train_indices, options.frames_per_batch,
                                    detail::mix64(options.seed ^ detail::mix64(epoch)));
    double loss_sum = 0.0;
    std::size_t frames = 0;
    std::size_t correct = 0;
    double lr = 0.0;
    for (const auto& plan : plans) {
      const Batch batch = assemble_batch(data, plan);
      const Var<float> x = Var<float>::constant(batch.features);
      const ForwardOptions fwd{.training = true, .seed = options.seed, .step = state.step};
      const Var<float> logits = encoder_forward(x, state.params, options.model, batch.lengths, fwd);
      const FrameLoss<float> fl =
          cross_entropy_frame_loss(logits, batch.labels, batch.lengths, batch.ids);
      const double loss = fl.loss.value()[0];
      if (!std::isfinite(loss)) {
        throw DivergenceError("training loss is non-finite at step " +
                                  std::to_string(state.step + 1),
                              state.step + 1);
      }
      state.optimizer.zero_grad();
      backward(fl.loss);
      lr = noam_lr(state.step + 1, options.schedule);
      try {
        state.optimizer.step(lr);
      } catch (const NumericalError& e) {
        throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(state.step + 1),
                              state.step + 1);
      }
      ++state.step;
      result.step_losses.push_back(loss);
      for (double s : fl.utterance_loss_sums) loss_sum += s;
      frames += fl.frames;
      correct += fl.correct;
      if (log && options.log_interval > 0 && state.step % options.log_interval == 0) {
        *log << "step=" << state.step << " lr=" << fmt_real(lr) << " loss=" << fmt_real(loss)
             << '\n';
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.step = state.step;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(frames);
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(frames);
    if (!result.valid_indices.empty()) {
      const EvalResult ev = evaluate(state.params, options.model, data, options.frames_per_batch,
                                     result.valid_indices);
      rec.has_valid = true;
      rec.valid_loss = ev.loss;
      rec.valid_accuracy = ev.accuracy;
    }
    result.epochs.push_back(rec);
    if (log) {
      *log << "epoch=" << epoch << " step=" << state.step << " lr=" << fmt_real(lr)
           << " train_loss=" << fmt_real(rec.train_loss)
           << " train_acc=" << fmt_real(rec.train_accuracy);
      if (rec.has_valid) {
        *log << " valid_loss=" << fmt_real(rec.valid_loss)
             << " valid_acc=" << fmt_real(rec.valid_accuracy);
      }
      *log << '\n';
      log->flush();
    }
    if (!options.checkpoint_dir.empty()) {
      save_checkpoint(options.checkpoint_dir / ("epoch_" + std::to_string(epoch) + ".ckpt"),
                      options.model, state.params);
    }
    if (rec.has_valid) {
      if (rec.valid_loss < state.best_valid_loss) {
        state.best_valid_loss = rec.valid_loss;
        epochs_since_best = 0;
      } else if (options.patience > 0 && ++epochs_since_best >= options.patience) {
        if (log) *log << "early_stop epoch=" << epoch << '\n';
        break;
      }
    }
  }
  if (!options.checkpoint_dir.empty()) {
    save_checkpoint(options.checkpoint_dir / "final.ckpt", options.model, state.params);
  }
  return result;
}

#define HAT_INSTANTIATE(T)                                                                       \
  template FrameLoss<T> cross_entropy_frame_loss(const Var<T>&, std::span<const std::int32_t>,   \
                                                 std::span<const std::size_t>,                   \
                                                 std::span<const std::string>);                  \
  template class AdamOptimizer<T>;                                                               \
  template struct TrainState<T>;                                                                 \
  template EvalResult evaluate(const ModelParams<T>&, const ModelConfig&, const Dataset&,        \
                               std::size_t, std::span<const std::size_t>);

HAT_INSTANTIATE(float)
HAT_INSTANTIATE(double)

}  // namespace hat
