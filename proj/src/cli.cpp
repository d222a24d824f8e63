#include "posemagic/cli.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>

#include <CLI11.hpp>
#include <json.hpp>

#include "posemagic/dataio.hpp"
#include "posemagic/training.hpp"

namespace posemagic {

using nlohmann::json;

namespace {

constexpr double kReferenceParams = 14.42e6;

// Bad flags, missing files and invalid configs.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const char* what) {
  if (!std::filesystem::is_regular_file(path)) throw UsageError(std::string(what) + " not found: " + path);
}

std::string input_path(const std::string& prefix) { return prefix + ".2d.jsonl"; }
std::string target_path(const std::string& prefix) { return prefix + ".3d.jsonl"; }

std::vector<PosePair> load_pairs(const std::string& prefix, const Skeleton& skeleton) {
  return pair_poses(load_poses(input_path(prefix), PoseKind::pose2d, skeleton),
                    load_poses(target_path(prefix), PoseKind::pose3d, skeleton));
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json metrics_json(const Metrics& m) {
  return json{{"mpjpe", m.mpjpe}, {"mpjve", opt_json(m.mpjve)}, {"acc_err", opt_json(m.acc_err)},
              {"pck", m.pck},     {"auc", m.auc}};
}

void print(std::ostream& out, const json& j, bool pretty) {
  if (!pretty) {
    out << j.dump() << '\n';
    return;
  }
  for (const auto& [key, value] : j.items()) {
    out << std::left << std::setw(16) << key << ' ';
    if (value.is_number_float()) {
      out << std::fixed << std::setprecision(4) << value.get<double>() << std::defaultfloat;
    } else {
      out << value.dump();
    }
    out << '\n';
  }
}

ModelConfig config_or_default(const std::string& path, bool reference) {
  if (reference) return ModelConfig{};
  if (path.empty()) return ModelConfig{};
  require_file(path, "config");
  return load_run_config(path).model;
}

int cmd_synth(const std::string& out_prefix, const std::string& config_path, SynthConfig cfg, std::ostream& out) {
  if (!config_path.empty()) {
    require_file(config_path, "config");
    cfg.skeleton = load_run_config(config_path).model.skeleton;
  }
  const std::vector<PosePair> data = synth_dataset(cfg);
  std::vector<PoseSequence> inputs, targets;
  for (const PosePair& p : data) {
    inputs.push_back(p.input);
    targets.push_back(p.target);
  }
  save_poses(input_path(out_prefix), inputs);
  save_poses(target_path(out_prefix), targets);
  out << json{{"sequences", data.size()},
              {"frames", cfg.T},
              {"inputs", input_path(out_prefix)},
              {"targets", target_path(out_prefix)}}
             .dump()
      << '\n';
  return 0;
}

struct TrainArgs {
  std::string config, data, out, log;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, max_steps;
  bool pretty = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  require_file(input_path(a.data), "data file");
  require_file(target_path(a.data), "data file");
  RunConfig rc;
  if (!a.config.empty()) {
    require_file(a.config, "config");
    rc = load_run_config(a.config);
  }
  if (a.seed) rc.train.seed = *a.seed;
  if (a.epochs) rc.train.epochs = *a.epochs;
  if (a.max_steps) rc.train.max_steps = *a.max_steps;
  const std::vector<PosePair> data = load_pairs(a.data, rc.model.skeleton);
  if (data.empty()) throw UsageError("no sequences in " + input_path(a.data));

  const std::string log_path = a.log.empty() ? a.out + ".log.jsonl" : a.log;
  std::ofstream log(log_path, std::ios::app);
  if (!log) throw std::runtime_error("cannot open log " + log_path);
  rc.train.on_epoch = [&](const EpochLog& e) {
    const json j{{"epoch", e.epoch},     {"lr", e.lr},   {"train_loss", e.train_loss}, {"mpjpe", e.mpjpe},
                 {"mpjve", opt_json(e.mpjve)}, {"acc_err", opt_json(e.acc_err)}};
    log << j.dump() << '\n';
    log.flush();
    if (a.pretty) err << "epoch " << e.epoch << " loss " << e.train_loss << " mpjpe " << e.mpjpe << '\n';
  };

  PoseMagicModel model(rc.model, rc.train.seed);
  const TrainResult result = train(model, data, rc.train);
  save_checkpoint(model, a.out);
  const EpochLog& last = result.log.back();
  print(out,
        json{{"steps", result.steps},
             {"epochs", result.log.size()},
             {"initial_loss", result.step_losses.front()},
             {"final_loss", result.step_losses.back()},
             {"mpjpe", last.mpjpe},
             {"checkpoint", a.out},
             {"log", log_path}},
        a.pretty);
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_prefix, bool flip, bool pretty, std::ostream& out) {
  require_file(ckpt, "checkpoint");
  require_file(input_path(data_prefix), "data file");
  require_file(target_path(data_prefix), "data file");
  PoseMagicModel model = load_checkpoint(ckpt);
  const std::vector<PosePair> data = load_pairs(data_prefix, model.config().skeleton);
  if (data.empty()) throw UsageError("no sequences in " + input_path(data_prefix));
  print(out, metrics_json(evaluate(model, data, flip)), pretty);
  return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& data, const std::string& out_path, bool flip,
              std::ostream& out) {
  require_file(ckpt, "checkpoint");
  require_file(data, "data file");
  PoseMagicModel model = load_checkpoint(ckpt);
  std::vector<PoseSequence> results;
  for (const PoseSequence& s : load_poses(data, PoseKind::pose2d, model.config().skeleton)) {
    PoseSequence r{s.id, PoseKind::pose3d, s.fps,
                   flip ? predict_flip_averaged(model, s.frames) : model.predict(s.frames)};
    results.push_back(std::move(r));
  }
  if (out_path.empty()) {
    for (const PoseSequence& r : results) out << pose_record(r) << '\n';
  } else {
    save_poses(out_path, results);
  }
  return 0;
}

int cmd_stream(const std::string& ckpt, std::size_t window, std::istream& in, std::ostream& out, std::ostream& err) {
  require_file(ckpt, "checkpoint");
  PoseMagicModel model = load_checkpoint(ckpt);
  if (!model.config().causal()) {
    throw UsageError("stream needs a causal checkpoint: a bidirectional model looks at future frames, so its "
                     "output for frame t is not available when frame t arrives");
  }
  StreamingPredictor predictor(model, window ? window : model.config().T_train);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Tensor frame;
    try {
      frame = parse_frame(line, model.config().J);
    } catch (const std::exception& e) {
      err << "stdin:" << line_no << ": " << e.what() << '\n';
      continue;
    }
    const std::size_t t = predictor.frames_seen();
    out << frame_record(t, predictor.push(frame)) << '\n';
    out.flush();
  }
  return 0;
}

int cmd_gradcheck(const std::string& config_path, std::size_t frames, std::uint64_t seed, bool pretty,
                  std::ostream& out) {
  ModelConfig cfg = gradcheck_config();
  if (!config_path.empty()) {
    require_file(config_path, "config");
    cfg = load_run_config(config_path).model;
  }
  const GradCheckResult r = model_grad_check(cfg, frames, seed);
  const bool pass = r.max_rel_error < 1e-5;
  print(out,
        json{{"max_rel_error", r.max_rel_error},
             {"worst_param", r.worst_param},
             {"worst_index", r.worst_index},
             {"analytic", r.analytic},
             {"numeric", r.numeric},
             {"entries", r.entries},
             {"pass", pass}},
        pretty);
  return pass ? 0 : 1;
}

int cmd_bench(std::size_t channels, std::size_t state, std::size_t reps, std::uint64_t seed, bool pretty,
              std::ostream& out) {
  if (channels == 0 || state == 0 || reps == 0) throw UsageError("bench: channels, state and reps must be positive");
  const std::vector<ScanTiming> timings = time_scan({512, 1024, 2048, 4096, 8192}, channels, state, reps, seed);
  json rows = json::array();
  for (const ScanTiming& t : timings) rows.push_back({{"L", t.length}, {"ms", t.ms}});
  const double exponent = scaling_exponent(timings);
  if (pretty) {
    out << std::setw(8) << "L" << std::setw(12) << "ms" << '\n';
    for (const ScanTiming& t : timings) {
      out << std::setw(8) << t.length << std::setw(12) << std::fixed << std::setprecision(3) << t.ms << '\n';
    }
    out << "exponent " << std::setprecision(3) << exponent << std::defaultfloat << '\n';
  } else {
    out << json{{"timings", rows}, {"exponent", exponent}}.dump() << '\n';
  }
  return 0;
}

int cmd_params(const std::string& config_path, bool reference, bool pretty, std::ostream& out) {
  const ModelConfig cfg = config_or_default(config_path, reference);
  const std::size_t count = count_params(cfg);
  print(out,
        json{{"params", count},
             {"ratio_to_reference", static_cast<double>(count) / kReferenceParams},
             {"N", cfg.N},
             {"d", cfg.d},
             {"direction", to_string(cfg.direction)}},
        pretty);
  return 0;
}

}  // namespace

StreamingPredictor::StreamingPredictor(PoseMagicModel& model, std::size_t window) : model_(model), window_(window) {
  if (!model.config().causal()) throw ConfigError("streaming: the model is bidirectional");
  if (window == 0) throw ConfigError("streaming: window must be positive");
}

Tensor StreamingPredictor::push(const Tensor& frame) {
  const std::size_t j = model_.config().J;
  if (frame.shape() != Shape{j, 3}) {
    throw ShapeError("streaming: expected a [" + std::to_string(j) + ", 3] frame, got " + shape_str(frame.shape()));
  }
  frames_.push_back(frame);
  if (frames_.size() > window_) frames_.pop_front();
  ++seen_;
  const std::size_t len = frames_.size();
  Tensor x({len, j, 3});
  for (std::size_t t = 0; t < len; ++t) std::copy(frames_[t].ptr(), frames_[t].ptr() + 3 * j, x.ptr() + t * 3 * j);
  return ops::slice(model_.predict(x), 0, len - 1, 1).reshaped({j, 3});
}

std::vector<ScanTiming> time_scan(const std::vector<std::size_t>& lengths, std::size_t channels,
                                  std::size_t state_size, std::size_t reps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> decay(0.5, 1.0), val(-1.0, 1.0);
  std::vector<ScanTiming> out;
  std::vector<char> evict(std::size_t{256} << 20);
  for (std::size_t len : lengths) {
    ScanInputs inp{Tensor({len, channels, state_size}), Tensor({len, channels, state_size}),
                   Tensor({len, state_size})};
    for (double& v : inp.a_bar.data()) v = decay(rng);
    for (double& v : inp.b_bar_x.data()) v = val(rng);
    for (double& v : inp.c.data()) v = val(rng);
    double best = INFINITY;
    for (std::size_t r = 0; r < reps; ++r) {
      // Start every rep from a cold cache so short and long sequences alike stream their inputs from memory.
      for (std::size_t i = 0; i < evict.size(); i += 64) evict[i] = static_cast<char>(evict[i] + 1);
      const auto t0 = std::chrono::steady_clock::now();
      const Tensor y = scan_sequential(inp);
      const auto t1 = std::chrono::steady_clock::now();
      if (!std::isfinite(y[0])) throw std::runtime_error("bench: non-finite scan output");
      best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    out.push_back({len, best});
  }
  return out;
}

double scaling_exponent(const std::vector<ScanTiming>& timings) {
  if (timings.size() < 2) throw std::invalid_argument("scaling_exponent: need at least two timings");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(timings.size());
  for (const ScanTiming& t : timings) {
    const double x = std::log(static_cast<double>(t.length)), y = std::log(std::max(t.ms, 1e-9));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

ModelConfig gradcheck_config() {
  ModelConfig c;
  c.N = 2;
  c.d = 8;
  c.d_prime = 16;
  c.n = 4;
  c.J = 5;
  c.skeleton = toy_skeleton(5);
  c.T_train = 6;
  c.lambda_v = 20.0;
  return c;
}

GradCheckResult model_grad_check(const ModelConfig& config, std::size_t frames, std::uint64_t seed) {
  PoseMagicModel model(config, seed);
  SynthConfig sc;
  sc.seed = seed;
  sc.skeleton = config.skeleton;
  sc.T = frames;
  sc.sequences = 1;
  const PosePair pair = synth_dataset(sc).front();
  const std::vector<Param*> params = model.params();
  return grad_check(
      [&](Tape& tape) {
        return pose_loss(model.forward(tape, pair.input.frames, Mode::train), pair.target.frames, config.lambda_v);
      },
      params);
}

int run_cli(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Pose lifting with parallel Mamba and GCN streams", "pose_magic"};
  app.require_subcommand(1, 1);

  std::string config, data, checkpoint, out_path, log_path;
  std::uint64_t seed = 0;
  bool flip = false, pretty = false, reference = false;
  std::size_t window = 0;

  SynthConfig synth_cfg;
  auto* synth = app.add_subcommand("synth", "Write a synthetic 2D/3D dataset as <out>.2d.jsonl and <out>.3d.jsonl");
  synth->add_option("--out", out_path, "Output path prefix")->required();
  synth->add_option("--config", config, "Config whose skeleton is used");
  synth->add_option("--seed", synth_cfg.seed, "Random seed");
  synth->add_option("--sequences", synth_cfg.sequences, "Number of sequences")->check(CLI::PositiveNumber);
  synth->add_option("--frames", synth_cfg.T, "Frames per sequence")->check(CLI::PositiveNumber);
  synth->add_option("--amplitude", synth_cfg.amplitude_mm, "Motion amplitude in mm")->check(CLI::NonNegativeNumber);
  synth->add_option("--frequency", synth_cfg.max_frequency, "Highest frequency, cycles per frame")
      ->check(CLI::NonNegativeNumber);
  synth->add_option("--noise", synth_cfg.noise_sigma, "2D noise sigma")->check(CLI::NonNegativeNumber);

  TrainArgs targs;
  std::size_t epochs = 0, max_steps = 0;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
  train_cmd->add_option("--config", targs.config, "Run config JSON");
  train_cmd->add_option("--data", targs.data, "Dataset path prefix")->required();
  train_cmd->add_option("--out", targs.out, "Checkpoint to write")->required();
  auto* seed_opt = train_cmd->add_option("--seed", seed, "Seed for initialization and data order");
  train_cmd->add_option("--log", targs.log, "Per-epoch JSON-lines log (default <out>.log.jsonl)");
  auto* epochs_opt = train_cmd->add_option("--epochs", epochs, "Override the epoch count");
  auto* steps_opt = train_cmd->add_option("--max-steps", max_steps, "Stop after this many steps");
  train_cmd->add_flag("--pretty", targs.pretty, "Human-readable output");

  auto* eval_cmd = app.add_subcommand("eval", "Print metrics of a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--data", data, "Dataset path prefix")->required();
  eval_cmd->add_flag("--flip", flip, "Test-time flip averaging");
  eval_cmd->add_flag("--pretty", pretty);

  auto* infer_cmd = app.add_subcommand("infer", "Lift a 2D JSON-lines file to 3D");
  infer_cmd->add_option("--checkpoint", checkpoint)->required();
  infer_cmd->add_option("--data", data, "2D JSON-lines file")->required();
  infer_cmd->add_option("--out", out_path, "3D output file (default stdout)");
  infer_cmd->add_flag("--flip", flip, "Test-time flip averaging");

  auto* stream_cmd = app.add_subcommand("stream", "Causal frame-by-frame lifting from stdin to stdout");
  stream_cmd->add_option("--checkpoint", checkpoint)->required();
  stream_cmd->add_option("--window", window, "Sliding window length (default T_train)")->check(CLI::PositiveNumber);

  std::size_t gc_frames = 6;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Compare analytic and numeric gradients of the full model");
  gradcheck_cmd->add_option("--config", config, "Model config (default: tiny N=2, d=8, J=5, n=4)");
  gradcheck_cmd->add_option("--frames", gc_frames, "Sequence length")->check(CLI::PositiveNumber);
  gradcheck_cmd->add_option("--seed", seed);
  gradcheck_cmd->add_flag("--pretty", pretty);

  std::size_t channels = 16, state = 16, reps = 3;
  auto* bench_cmd = app.add_subcommand("bench", "Time the sequential scan for L = 512 ... 8192");
  bench_cmd->add_option("--channels", channels, "D");
  bench_cmd->add_option("--state", state, "n");
  bench_cmd->add_option("--reps", reps, "Repetitions per length (best is kept)");
  bench_cmd->add_option("--seed", seed);
  bench_cmd->add_flag("--pretty", pretty);

  auto* params_cmd = app.add_subcommand("params", "Count model parameters");
  params_cmd->add_option("--config", config);
  params_cmd->add_flag("--reference-config,--paper-config", reference, "Use the reference configuration (N=26, d=128, d'=512)");
  params_cmd->add_flag("--pretty", pretty);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "pose_magic: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*synth) return cmd_synth(out_path, config, synth_cfg, out);
    if (*train_cmd) {
      if (seed_opt->count()) targs.seed = seed;
      if (epochs_opt->count()) targs.epochs = epochs;
      if (steps_opt->count()) targs.max_steps = max_steps;
      return cmd_train(targs, out, err);
    }
    if (*eval_cmd) return cmd_eval(checkpoint, data, flip, pretty, out);
    if (*infer_cmd) return cmd_infer(checkpoint, data, out_path, flip, out);
    if (*stream_cmd) return cmd_stream(checkpoint, window, in, out, err);
    if (*gradcheck_cmd) return cmd_gradcheck(config, gc_frames, seed, pretty, out);
    if (*bench_cmd) return cmd_bench(channels, state, reps, seed, pretty, out);
    if (*params_cmd) return cmd_params(config, reference, pretty, out);
  } catch (const UsageError& e) {
    err << "pose_magic: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    err << "pose_magic: " << e.what() << '\n';
    return 2;
  } catch (const TrainingDiverged& e) {
    err << "pose_magic: training diverged: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "pose_magic: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace posemagic
