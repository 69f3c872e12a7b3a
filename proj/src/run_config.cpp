#include "hat/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace hat {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

struct Field {
  std::string where;  // "<source>:<line>"
  std::string key;
  std::string value;

  [[noreturn]] void fail(const std::string& expected) const {
    throw ConfigError(where + ": field '" + key + "': expected " + expected + ", got '" + value +
                      "'");
  }

  std::uint64_t as_u64() const {
    std::uint64_t v = 0;
    const char* end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(value.data(), end, v);
    if (ec != std::errc() || ptr != end) fail("a non-negative integer");
    return v;
  }
  std::size_t as_size() const { return static_cast<std::size_t>(as_u64()); }
  double as_double() const {
    double v = 0;
    const char* end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(value.data(), end, v);
    if (ec != std::errc() || ptr != end) fail("a number");
    return v;
  }
  bool as_bool() const {
    if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "off" || value == "no") return false;
    fail("true or false");
  }
};

using Setter = std::function<void(RunConfig&, const Field&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"seed", [](RunConfig& c, const Field& f) { c.seed = f.as_u64(); }},
      {"data", [](RunConfig& c, const Field& f) { c.data = f.value; }},
      {"out", [](RunConfig& c, const Field& f) { c.out = f.value; }},

      {"model.num_layers", [](RunConfig& c, const Field& f) { c.model.num_layers = f.as_size(); }},
      {"model.model_dim", [](RunConfig& c, const Field& f) { c.model.model_dim = f.as_size(); }},
      {"model.num_heads", [](RunConfig& c, const Field& f) { c.model.num_heads = f.as_size(); }},
      {"model.ffn_dim", [](RunConfig& c, const Field& f) { c.model.ffn_dim = f.as_size(); }},
      {"model.kernel_size", [](RunConfig& c, const Field& f) { c.model.kernel_size = f.as_size(); }},
      {"model.feature_dim", [](RunConfig& c, const Field& f) { c.model.feature_dim = f.as_size(); }},
      {"model.output_dim", [](RunConfig& c, const Field& f) { c.model.output_dim = f.as_size(); }},
      {"model.positional_encoding",
       [](RunConfig& c, const Field& f) { c.model.use_positional_encoding = f.as_bool(); }},
      {"model.conv", [](RunConfig& c, const Field& f) { c.model.use_conv = f.as_bool(); }},
      {"model.final_norm",
       [](RunConfig& c, const Field& f) { c.model.extra_final_norm = f.as_bool(); }},
      {"model.conv_residual",
       [](RunConfig& c, const Field& f) { c.model.conv_residual = f.as_bool(); }},
      {"model.block_order",
       [](RunConfig& c, const Field& f) {
         if (f.value == "conv_first") {
           c.model.block_order = BlockOrder::kConvFirst;
         } else if (f.value == "attention_first") {
           c.model.block_order = BlockOrder::kAttentionFirst;
         } else {
           f.fail("conv_first or attention_first");
         }
       }},
      {"model.dropout", [](RunConfig& c, const Field& f) { c.model.dropout_p = f.as_double(); }},
      {"model.pe_scale", [](RunConfig& c, const Field& f) { c.model.pe_scale = f.as_double(); }},
      {"model.attention_window",
       [](RunConfig& c, const Field& f) {
         c.model.attention_windows.clear();
         std::istringstream words(f.value);
         std::string word;
         while (words >> word) {
           try {
             c.model.attention_windows.push_back(TimeWindow::parse(word));
           } catch (const ConfigError&) {
             f.fail("windows of the form l:r (l, r integers or inf)");
           }
         }
         if (c.model.attention_windows.empty()) f.fail("at least one window");
       }},

      {"schedule.model_dim",
       [](RunConfig& c, const Field& f) { c.schedule.model_dim = f.as_size(); }},
      {"schedule.warmup_steps",
       [](RunConfig& c, const Field& f) { c.schedule.warmup_steps = f.as_size(); }},
      {"schedule.multiplier",
       [](RunConfig& c, const Field& f) { c.schedule.multiplier = f.as_double(); }},

      {"adam.beta1", [](RunConfig& c, const Field& f) { c.adam.beta1 = f.as_double(); }},
      {"adam.beta2", [](RunConfig& c, const Field& f) { c.adam.beta2 = f.as_double(); }},
      {"adam.eps", [](RunConfig& c, const Field& f) { c.adam.eps = f.as_double(); }},
      {"adam.clip_norm", [](RunConfig& c, const Field& f) { c.adam.clip_norm = f.as_double(); }},

      {"train.epochs", [](RunConfig& c, const Field& f) { c.epochs = f.as_size(); }},
      {"train.frames_per_batch",
       [](RunConfig& c, const Field& f) { c.frames_per_batch = f.as_size(); }},
      {"train.patience", [](RunConfig& c, const Field& f) { c.patience = f.as_size(); }},
      {"train.log_interval", [](RunConfig& c, const Field& f) { c.log_interval = f.as_size(); }},
      {"train.valid_fraction",
       [](RunConfig& c, const Field& f) { c.valid_fraction = f.as_double(); }},
      {"train.cmvn", [](RunConfig& c, const Field& f) { c.cmvn = f.as_bool(); }},

      {"synthetic.num_utterances",
       [](RunConfig& c, const Field& f) { c.synthetic.num_utterances = f.as_size(); }},
      {"synthetic.min_frames",
       [](RunConfig& c, const Field& f) { c.synthetic.min_frames = f.as_size(); }},
      {"synthetic.max_frames",
       [](RunConfig& c, const Field& f) { c.synthetic.max_frames = f.as_size(); }},
      {"synthetic.noise", [](RunConfig& c, const Field& f) { c.synthetic.noise = f.as_double(); }},
  };
  return table;
}

}  // namespace

TrainOptions RunConfig::train_options(std::uint64_t run_seed) const {
  TrainOptions opts;
  opts.model = model;
  opts.schedule = schedule;
  opts.adam = adam;
  opts.epochs = epochs;
  opts.frames_per_batch = frames_per_batch;
  opts.seed = run_seed;
  opts.valid_fraction = valid_fraction;
  opts.patience = patience;
  opts.log_interval = log_interval;
  opts.checkpoint_dir = out;
  return opts;
}

RunConfig parse_run_config(std::istream& in, const std::string& source,
                           const std::filesystem::path& base_dir, bool check_paths) {
  RunConfig config;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = source + ":" + std::to_string(line_no);
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string text = trim(line);
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    Field field{where, trim(std::string_view(text).substr(0, eq)),
                trim(std::string_view(text).substr(eq + 1))};
    const auto it = setters().find(field.key);
    if (it == setters().end()) throw ConfigError(where + ": unknown key '" + field.key + "'");
    if (!seen.insert(field.key).second) {
      throw ConfigError(where + ": key '" + field.key + "' given twice");
    }
    if (field.value.empty()) throw ConfigError(where + ": field '" + field.key + "' has no value");
    it->second(config, field);
  }

  if (!seen.count("schedule.model_dim")) config.schedule.model_dim = config.model.model_dim;
  config.synthetic.feature_dim = config.model.feature_dim;
  config.synthetic.num_classes = config.model.output_dim;

  try {
    config.model.validate(false);
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  if (config.schedule.warmup_steps == 0) {
    throw ConfigError(source + ": field 'schedule.warmup_steps' must be >= 1");
  }
  if (config.frames_per_batch == 0) {
    throw ConfigError(source + ": field 'train.frames_per_batch' must be >= 1");
  }
  if (config.valid_fraction < 0.0 || config.valid_fraction >= 1.0) {
    throw ConfigError(source + ": field 'train.valid_fraction' must lie in [0, 1)");
  }

  if (!config.data.empty() && config.data.is_relative()) config.data = base_dir / config.data;
  if (!config.out.empty() && config.out.is_relative()) config.out = base_dir / config.out;
  if (check_paths) {
    if (!config.data.empty() && !std::filesystem::exists(config.data)) {
      throw ConfigError(source + ": field 'data': path " + config.data.string() +
                        " does not exist");
    }
    if (!config.out.empty()) {
      const auto parent = config.out.parent_path();
      if (!parent.empty() && !std::filesystem::is_directory(parent)) {
        throw ConfigError(source + ": field 'out': parent directory " + parent.string() +
                          " does not exist");
      }
    }
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path, bool check_paths) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_run_config(in, path.string(), path.parent_path(), check_paths);
}

}  // namespace hat
