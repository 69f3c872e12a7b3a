#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "hat/checkpoint.hpp"
#include "hat/data.hpp"
#include "hat/run_config.hpp"
#include "hat/training.hpp"

namespace hat::cli {

namespace {

constexpr double kFrameMs = 10.0;

std::string grouped(std::size_t v) {
  std::string digits = std::to_string(v);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i > 0 && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

std::string millions(std::size_t v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", static_cast<double>(v) / 1e6);
  return buf;
}

std::string extent(std::size_t e) { return e == TimeWindow::kUnbounded ? "inf" : std::to_string(e); }

// Duplicates writes to two streams.
class TeeBuf : public std::streambuf {
 public:
  TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

 protected:
  int overflow(int c) override {
    if (c == traits_type::eof()) return traits_type::not_eof(c);
    const char ch = traits_type::to_char_type(c);
    if (a_->sputc(ch) == traits_type::eof() || b_->sputc(ch) == traits_type::eof()) {
      return traits_type::eof();
    }
    return c;
  }
  std::streamsize xsputn(const char* s, std::streamsize n) override {
    a_->sputn(s, n);
    b_->sputn(s, n);
    return n;
  }
  int sync() override { return (a_->pubsync() == 0 && b_->pubsync() == 0) ? 0 : -1; }

 private:
  std::streambuf* a_;
  std::streambuf* b_;
};

struct Args {
  std::string config;
  std::string checkpoint;
  std::string data;
  std::string out;
  std::optional<std::uint64_t> seed;
};

ModelConfig model_from(const Args& a) {
  if (!a.checkpoint.empty()) return load_checkpoint<float>(a.checkpoint).config;
  if (!a.config.empty()) return load_run_config(a.config, false).model;
  throw ConfigError("one of --config or --checkpoint is required");
}

Dataset load_data(const std::filesystem::path& manifest, bool cmvn) {
  Dataset data = read_dataset(manifest);
  if (cmvn) normalize_dataset(data);
  return data;
}

int cmd_train(const Args& a, std::ostream& out) {
  RunConfig rc = load_run_config(a.config, false);
  if (!a.data.empty()) rc.data = a.data;
  if (!a.out.empty()) rc.out = a.out;
  if (a.seed) rc.seed = a.seed;
  if (rc.data.empty()) throw ConfigError("no dataset: set 'data' in the config or pass --data");
  if (rc.out.empty()) throw ConfigError("no output directory: set 'out' or pass --out");
  if (!rc.seed) throw ConfigError("no seed: set 'seed' in the config or pass --seed");

  const Dataset data = load_data(rc.data, rc.cmvn);
  std::filesystem::create_directories(rc.out);
  std::ofstream log_file(rc.out / "train.log");
  if (!log_file) throw DataError("cannot write " + (rc.out / "train.log").string());
  TeeBuf tee(log_file.rdbuf(), out.rdbuf());
  std::ostream log(&tee);

  log << "utterances=" << data.size() << " seed=" << *rc.seed
      << " params=" << count_parameters(rc.model).total << '\n';
  const TrainResult result = train_loop(rc.train_options(*rc.seed), data, &log);
  log << "done steps=" << result.state.step
      << " checkpoint=" << (rc.out / "final.ckpt").string() << '\n';
  log.flush();
  return kOk;
}

int cmd_eval(const Args& a, std::ostream& out) {
  if (a.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  if (a.data.empty()) throw ConfigError("--data is required");
  std::size_t frames_per_batch = 2000;
  bool cmvn = true;
  if (!a.config.empty()) {
    const RunConfig rc = load_run_config(a.config, false);
    frames_per_batch = rc.frames_per_batch;
    cmvn = rc.cmvn;
  }
  const auto ckpt = load_checkpoint<float>(a.checkpoint);
  const Dataset data = load_data(a.data, cmvn);
  std::size_t longest = 0;
  for (const auto& u : data) {
    if (!u.has_labels()) throw DataError("utterance '" + u.id + "' has no labels");
    longest = std::max(longest, u.num_frames());
  }
  const EvalResult r =
      evaluate(ckpt.params, ckpt.config, data, std::max(frames_per_batch, longest));
  char buf[160];
  std::snprintf(buf, sizeof(buf), "utterances=%zu frames=%zu loss=%.9g accuracy=%.9g\n",
                data.size(), r.frames, r.loss, r.accuracy);
  out << buf;
  return kOk;
}

int cmd_gen_data(const Args& a, std::ostream& out) {
  SyntheticTaskConfig sc;
  std::optional<std::uint64_t> seed = a.seed;
  std::filesystem::path dir = a.out;
  if (!a.config.empty()) {
    const RunConfig rc = load_run_config(a.config, false);
    sc = rc.synthetic;
    if (!seed) seed = rc.seed;
    if (dir.empty() && !rc.data.empty()) dir = rc.data.parent_path();
  }
  if (!seed) throw ConfigError("no seed: set 'seed' in the config or pass --seed");
  if (dir.empty()) throw ConfigError("--out is required");
  sc.seed = *seed;
  const SyntheticTask task = generate_synthetic_task(sc);
  const auto manifest = write_dataset(dir, task.utterances);
  std::size_t frames = 0;
  for (const auto& u : task.utterances) frames += u.num_frames();
  out << "utterances=" << task.utterances.size() << " frames=" << frames
      << " classes=" << sc.num_classes << " manifest=" << manifest.string() << '\n';
  return kOk;
}

int report_error(const std::exception& e, int code, std::ostream& err) {
  err << "error: " << e.what() << '\n';
  return code;
}

}  // namespace

void print_parameter_table(const ModelConfig& c, std::ostream& out) {
  const ParameterCounts p = count_parameters(c);
  const std::size_t conv_layers = c.use_conv ? c.num_layers : 0;
  auto row = [&](const std::string& name, const std::string& layers, std::size_t n) {
    out << std::left << std::setw(22) << name << std::right << std::setw(7) << layers
        << std::setw(14) << grouped(n) << std::setw(9) << millions(n) << '\n';
  };
  out << std::left << std::setw(22) << "Component" << std::right << std::setw(7) << "Layers"
      << std::setw(14) << "Params" << std::setw(9) << "(M)" << '\n';
  row("Input Linear Layer", "1", p.input_linear);
  row("MultiHead Attention", std::to_string(c.num_layers), p.attention);
  row("Layer Norm", std::to_string(p.layer_norm_count), p.layer_norm);
  row("Feedforward", std::to_string(c.num_layers), p.feedforward);
  row("1D-CNN", std::to_string(conv_layers), p.conv);
  row("Output Linear Layer", "1", p.output_linear);
  row("Total", "", p.total);
  if (p.layer_norm_count > 0) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.3f", p.layer_norm / 1e6);
    out << "note: Layer Norm reports the computed " << grouped(p.layer_norm) << " (" << buf
        << "M); the published 6-layer d=512 budget lists 0.12M for this row, inconsistent"
        << " with its own 12 x 1024 = 12,288\n";
  }
}

void print_mask_report(const ModelConfig& c, std::ostream& out) {
  const AccumulatedWindow acc = accumulated_window(c);
  out << "layer  window\n";
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    out << std::left << std::setw(7) << l << c.window(l).to_string() << '\n';
  }
  out << "attention_window [-" << extent(acc.total_left) << ", " << extent(acc.total_right)
      << "]\n";
  out << "conv_lookahead " << acc.conv_lookahead << " frames\n";
  if (acc.latency_unbounded()) {
    out << "latency unbounded\n";
  } else {
    out << "latency " << acc.total_latency << " frames = "
        << static_cast<double>(acc.total_latency) * kFrameMs << " ms at 100 Hz\n";
  }
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Convolution-interleaved transformer acoustic model", "hat"};
  app.require_subcommand(1);
  Args args;

  auto add_seed = [&](CLI::App* sub) {
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { args.seed = s; }, "RNG seed (overrides config)");
  };

  auto* train = app.add_subcommand("train", "Train a model from a run config");
  train->add_option("--config", args.config, "Run config file")->required();
  train->add_option("--data", args.data, "Dataset manifest (overrides config)");
  train->add_option("--out", args.out, "Output directory (overrides config)");
  add_seed(train);

  auto* eval = app.add_subcommand("eval", "Frame CE loss and accuracy of a checkpoint");
  eval->add_option("--checkpoint", args.checkpoint, "Model checkpoint")->required();
  eval->add_option("--data", args.data, "Dataset manifest")->required();
  eval->add_option("--config", args.config, "Run config (batching and normalization)");

  auto* inspect = app.add_subcommand("inspect", "Per-component parameter counts");
  inspect->add_option("--config", args.config, "Run config file");
  inspect->add_option("--checkpoint", args.checkpoint, "Model checkpoint");

  auto* mask = app.add_subcommand("mask-report", "Attention windows and right-context latency");
  mask->add_option("--config", args.config, "Run config file");
  mask->add_option("--checkpoint", args.checkpoint, "Model checkpoint");

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic frame-classification task");
  gen->add_option("--config", args.config, "Run config (synthetic.* keys)");
  gen->add_option("--out", args.out, "Output directory");
  add_seed(gen);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  try {
    if (train->parsed()) return cmd_train(args, out);
    if (eval->parsed()) return cmd_eval(args, out);
    if (gen->parsed()) return cmd_gen_data(args, out);
    if (inspect->parsed()) {
      print_parameter_table(model_from(args), out);
      return kOk;
    }
    if (mask->parsed()) {
      print_mask_report(model_from(args), out);
      return kOk;
    }
  } catch (const ConfigError& e) {
    return report_error(e, kUsage, err);
  } catch (const DataError& e) {
    return report_error(e, kDataError, err);
  } catch (const DimensionError& e) {
    return report_error(e, kDataError, err);
  } catch (const NumericalError& e) {
    return report_error(e, kDiverged, err);
  } catch (const std::exception& e) {
    return report_error(e, kUsage, err);
  }
  return kUsage;
}

}  // namespace hat::cli
