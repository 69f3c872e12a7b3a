#pragma once

// Flat key=value run configuration. '#' starts a comment; blank lines are
// ignored; each key may appear once. Relative paths resolve against the
// config file's directory.
//
//   seed = 7
//   data = data/manifest.txt
//   out  = runs/base
//   model.num_layers = 4
//   model.attention_window = inf:2          # or one "l:r" per layer
//   schedule.warmup_steps = 400
//   train.epochs = 6
//
// See README.md for the full key list.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "hat/data.hpp"
#include "hat/model.hpp"
#include "hat/training.hpp"

namespace hat {

struct RunConfig {
  ModelConfig model;
  ScheduleConfig schedule;
  AdamConfig adam;
  SyntheticTaskConfig synthetic;
  std::filesystem::path data;
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;
  std::size_t epochs = 10;
  std::size_t frames_per_batch = 2000;
  std::size_t patience = 0;
  std::size_t log_interval = 50;
  double valid_fraction = 0.1;
  bool cmvn = true;

  /// schedule.model_dim follows model.model_dim unless set explicitly.
  TrainOptions train_options(std::uint64_t seed) const;
};

/// Parses `in`; errors are ConfigError "<source>:<line>: ..." naming the key.
/// When `check_paths` is set, `data` must exist and `out`'s parent must exist.
RunConfig parse_run_config(std::istream& in, const std::string& source,
                           const std::filesystem::path& base_dir, bool check_paths = true);

/// Reads and parses a config file; a missing file is a ConfigError.
RunConfig load_run_config(const std::filesystem::path& path, bool check_paths = true);

}  // namespace hat
