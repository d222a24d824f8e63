#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "posemagic/model.hpp"
#include "posemagic/pose.hpp"

namespace posemagic {

/// L3D + lambda_v * Lv with per-joint Euclidean norms summed over every
/// position; the velocity term compares first differences along time.
/// pred/gt: [T, J, 3] or [B, T, J, 3].
Var pose_loss(const Var& pred, const Tensor& gt, double lambda_v);
double pose_loss(const Tensor& pred, const Tensor& gt, double lambda_v);

/// Mean per-joint Euclidean error over every position of [..., 3] arrays.
double mpjpe(const Tensor& pred, const Tensor& gt);
/// MPJPE of the first (mpjve) or second (acc_err) time differences of
/// [T, J, 3] sequences with a unit frame interval. Throw when T is too short.
double mpjve(const Tensor& pred, const Tensor& gt);
double acc_err(const Tensor& pred, const Tensor& gt);
/// Percentage of positions whose error is at most the threshold.
double pck(const Tensor& pred, const Tensor& gt, double threshold_mm = 150.0);
/// Mean PCK over thresholds 0, 5, ..., 150 mm.
double auc(const Tensor& pred, const Tensor& gt);

struct Metrics {
  double mpjpe = 0.0;
  std::optional<double> mpjve;
  std::optional<double> acc_err;
  double pck = 0.0;
  double auc = 0.0;
};

/// Metrics over a set of sequences; each position (or difference) counts once.
Metrics evaluate_metrics(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts);

struct AdamWConfig {
  double lr = 8e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  /// Per-epoch multiplicative decay of the learning rate.
  double lr_decay = 0.99;

  double lr_at_epoch(std::size_t epoch) const;
};

/// Adam with decoupled weight decay: p -= lr * wd * p, then the bias-corrected
/// moment update.
class AdamW {
 public:
  AdamW(std::vector<Param*> params, AdamWConfig config);

  void step(double lr);
  std::size_t steps() const { return steps_; }
  const AdamWConfig& config() const { return config_; }

 private:
  std::vector<Param*> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  AdamWConfig config_;
  std::size_t steps_ = 0;
};

struct SynthConfig {
  std::uint64_t seed = 0;
  Skeleton skeleton = default_skeleton();
  std::size_t T = 27;
  std::size_t sequences = 4;
  /// Peak per-axis joint displacement around the rest pose, in millimeters.
  double amplitude_mm = 80.0;
  /// Highest oscillation frequency, in cycles per frame.
  double max_frequency = 0.08;
  /// Standard deviation of the 2D noise, in projected units; confidence is
  /// exp(-|noise| / noise_sigma).
  double noise_sigma = 0.0;
  /// Projected units per millimeter (orthographic camera looking down -z).
  double projection_scale = 1e-3;

  /// Upper bound on the per-frame 3D displacement of any joint.
  double speed_bound() const;
};

std::vector<PosePair> synth_dataset(const SynthConfig& config);

/// Negates x and swaps mirrored joints. Works on [T, J, 3] and [B, T, J, 3].
Tensor flip_pose(const Tensor& pose, const Skeleton& skeleton);
/// Average of model(x) and the unflipped model(flip(x)).
Tensor predict_flip_averaged(PoseMagicModel& model, const Tensor& x2d);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double mpjpe = 0.0;
  std::optional<double> mpjve;
  std::optional<double> acc_err;
  std::size_t steps = 0;
};

struct TrainConfig {
  std::size_t epochs = 90;
  std::size_t batch_size = 8;
  AdamWConfig optimizer;
  std::uint64_t seed = 0;
  bool flip_augment = true;
  /// Stop after this many optimizer steps (0: no limit).
  std::size_t max_steps = 0;
  /// Stop after an epoch whose training MPJPE falls below this (0: never).
  double target_mpjpe = 0.0;
  /// Called with every step's loss.
  std::function<void(std::size_t step, double loss)> on_step;
  /// Called after every epoch.
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::vector<double> step_losses;
  std::size_t steps = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t step, const std::string& what);
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Mini-batch training in train mode. Batches group sequences of equal
/// length; data order and flips are drawn from `config.seed`.
TrainResult train(PoseMagicModel& model, const std::vector<PosePair>& data, const TrainConfig& config);

/// Eval-mode metrics of the model on a dataset, optionally with test-time flip averaging.
Metrics evaluate(PoseMagicModel& model, const std::vector<PosePair>& data, bool flip = false);

}  // namespace posemagic
