#include "posemagic/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

namespace posemagic {

namespace {

void check_pose_pair(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) + " differ");
  if (a.empty() || a.back() != 3) throw ShapeError(std::string(op) + ": expected [..., 3], got " + shape_str(a));
}

std::size_t time_axis(const Tensor& t, const char* op) {
  if (t.rank() != 3 && t.rank() != 4) {
    throw ShapeError(std::string(op) + ": expected [T, J, 3] or [B, T, J, 3], got " + shape_str(t.shape()));
  }
  return t.rank() - 3;
}

// Per-position Euclidean distances of two [..., 3] arrays.
std::vector<double> joint_errors(const Tensor& pred, const Tensor& gt) {
  std::vector<double> out(pred.size() / 3);
  for (std::size_t p = 0; p < out.size(); ++p) {
    const double dx = pred[3 * p] - gt[3 * p];
    const double dy = pred[3 * p + 1] - gt[3 * p + 1];
    const double dz = pred[3 * p + 2] - gt[3 * p + 2];
    out[p] = std::sqrt(dx * dx + dy * dy + dz * dz);
  }
  return out;
}

Tensor time_diff(const Tensor& x, std::size_t axis) {
  const std::size_t t = x.dim(static_cast<int>(axis));
  const int ax = static_cast<int>(axis);
  return ops::sub(ops::slice(x, ax, 1, t - 1), ops::slice(x, ax, 0, t - 1));
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double pck_of(const std::vector<double>& errors, double threshold) {
  const auto hits = std::count_if(errors.begin(), errors.end(), [threshold](double e) { return e <= threshold; });
  return 100.0 * static_cast<double>(hits) / static_cast<double>(errors.size());
}

double auc_of(const std::vector<double>& errors) {
  double total = 0.0;
  for (int i = 0; i <= 30; ++i) total += pck_of(errors, 5.0 * i);
  return total / 31.0;
}

Tensor stack(const std::vector<const Tensor*>& parts) {
  Shape shape = parts.front()->shape();
  shape.insert(shape.begin(), parts.size());
  Tensor out(shape);
  const std::size_t each = parts.front()->size();
  for (std::size_t i = 0; i < parts.size(); ++i) {
    std::copy(parts[i]->ptr(), parts[i]->ptr() + each, out.ptr() + i * each);
  }
  return out;
}

}  // namespace

Var pose_loss(const Var& pred, const Tensor& gt, double lambda_v) {
  check_pose_pair(pred.shape(), gt.shape(), "pose_loss");
  if (!(lambda_v >= 0.0)) throw std::invalid_argument("pose_loss: lambda_v must be >= 0");
  const std::size_t axis = time_axis(gt, "pose_loss");
  Tape& tape = *pred.tape();
  const Var position = ad::sum(ad::norm_last(ad::sub(pred, tape.constant(gt))));
  const std::size_t t = gt.dim(static_cast<int>(axis));
  if (t < 2 || lambda_v == 0.0) return position;
  const int ax = static_cast<int>(axis);
  const Var dpred = ad::sub(ad::slice(pred, ax, 1, t - 1), ad::slice(pred, ax, 0, t - 1));
  const Var velocity = ad::sum(ad::norm_last(ad::sub(dpred, tape.constant(time_diff(gt, axis)))));
  return ad::add(position, ad::scale(velocity, lambda_v));
}

double pose_loss(const Tensor& pred, const Tensor& gt, double lambda_v) {
  Tape tape(false);
  return pose_loss(tape.constant(pred), gt, lambda_v).value().item();
}

double mpjpe(const Tensor& pred, const Tensor& gt) {
  check_pose_pair(pred.shape(), gt.shape(), "mpjpe");
  return mean_of(joint_errors(pred, gt));
}

double mpjve(const Tensor& pred, const Tensor& gt) {
  check_pose_pair(pred.shape(), gt.shape(), "mpjve");
  const std::size_t axis = time_axis(gt, "mpjve");
  if (gt.dim(static_cast<int>(axis)) < 2) throw std::invalid_argument("mpjve: needs at least 2 frames");
  return mpjpe(time_diff(pred, axis), time_diff(gt, axis));
}

double acc_err(const Tensor& pred, const Tensor& gt) {
  check_pose_pair(pred.shape(), gt.shape(), "acc_err");
  const std::size_t axis = time_axis(gt, "acc_err");
  if (gt.dim(static_cast<int>(axis)) < 3) throw std::invalid_argument("acc_err: needs at least 3 frames");
  return mpjpe(time_diff(time_diff(pred, axis), axis), time_diff(time_diff(gt, axis), axis));
}

double pck(const Tensor& pred, const Tensor& gt, double threshold_mm) {
  check_pose_pair(pred.shape(), gt.shape(), "pck");
  return pck_of(joint_errors(pred, gt), threshold_mm);
}

double auc(const Tensor& pred, const Tensor& gt) {
  check_pose_pair(pred.shape(), gt.shape(), "auc");
  return auc_of(joint_errors(pred, gt));
}

Metrics evaluate_metrics(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts) {
  if (preds.size() != gts.size() || preds.empty()) {
    throw std::invalid_argument("evaluate_metrics: need matching, non-empty prediction and target lists");
  }
  std::vector<double> pos, vel, acc;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    check_pose_pair(preds[i].shape(), gts[i].shape(), "evaluate_metrics");
    const std::size_t axis = time_axis(gts[i], "evaluate_metrics");
    const std::vector<double> e = joint_errors(preds[i], gts[i]);
    pos.insert(pos.end(), e.begin(), e.end());
    const std::size_t t = gts[i].dim(static_cast<int>(axis));
    if (t >= 2) {
      const Tensor vp = time_diff(preds[i], axis), vg = time_diff(gts[i], axis);
      const std::vector<double> ev = joint_errors(vp, vg);
      vel.insert(vel.end(), ev.begin(), ev.end());
      if (t >= 3) {
        const std::vector<double> ea = joint_errors(time_diff(vp, axis), time_diff(vg, axis));
        acc.insert(acc.end(), ea.begin(), ea.end());
      }
    }
  }
  Metrics m;
  m.mpjpe = mean_of(pos);
  if (!vel.empty()) m.mpjve = mean_of(vel);
  if (!acc.empty()) m.acc_err = mean_of(acc);
  m.pck = pck_of(pos, 150.0);
  m.auc = auc_of(pos);
  return m;
}

double AdamWConfig::lr_at_epoch(std::size_t epoch) const {
  return lr * std::pow(lr_decay, static_cast<double>(epoch));
}

AdamW::AdamW(std::vector<Param*> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
  if (!(config_.lr >= 0.0) || !(config_.weight_decay >= 0.0) || !(config_.eps > 0.0) || !(config_.beta1 >= 0.0) ||
      !(config_.beta1 < 1.0) || !(config_.beta2 >= 0.0) || !(config_.beta2 < 1.0) || !(config_.lr_decay > 0.0)) {
    throw ConfigError("adamw: invalid hyperparameters");
  }
  for (const Param* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void AdamW::step(double lr) {
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double decay = 1.0 - lr * config_.weight_decay;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Param& p = *params_[i];
    if (p.grad.size() != p.value.size()) p.zero_grad();
    double* w = p.value.ptr();
    const double* g = p.grad.ptr();
    double* m = m_[i].ptr();
    double* v = v_[i].ptr();
    for (std::size_t k = 0, n = p.value.size(); k < n; ++k) {
      w[k] *= decay;
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
    }
  }
}

double SynthConfig::speed_bound() const {
  return std::sqrt(3.0) * 2.0 * std::numbers::pi * amplitude_mm * max_frequency;
}

std::vector<PosePair> synth_dataset(const SynthConfig& config) {
  const Skeleton& sk = config.skeleton;
  sk.validate();
  if (sk.rest_pose_mm.size() != sk.joint_count) throw ConfigError("synth: skeleton has no rest pose");
  if (config.T == 0) throw ConfigError("synth: T must be positive");
  if (!(config.amplitude_mm >= 0.0) || !(config.max_frequency >= 0.0) || !(config.noise_sigma >= 0.0) ||
      !(config.projection_scale > 0.0)) {
    throw ConfigError("synth: amplitude, frequency and noise must be >= 0 and the projection scale > 0");
  }
  const std::size_t j_count = sk.joint_count, t_count = config.T;
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<PosePair> out;
  out.reserve(config.sequences);
  for (std::size_t s = 0; s < config.sequences; ++s) {
    // Amplitude, frequency and phase per joint and axis.
    std::vector<std::array<double, 9>> waves(j_count);
    for (auto& w : waves) {
      for (int a = 0; a < 3; ++a) {
        w[3 * a] = config.amplitude_mm * (0.3 + 0.7 * unit(rng));
        w[3 * a + 1] = config.max_frequency * (0.2 + 0.8 * unit(rng));
        w[3 * a + 2] = 2.0 * std::numbers::pi * unit(rng);
      }
    }
    PosePair pair;
    pair.target.id = pair.input.id = "synth_" + std::to_string(s);
    pair.target.kind = PoseKind::pose3d;
    pair.input.kind = PoseKind::pose2d;
    pair.target.frames = Tensor({t_count, j_count, 3});
    pair.input.frames = Tensor({t_count, j_count, 3});
    for (std::size_t t = 0; t < t_count; ++t) {
      for (std::size_t j = 0; j < j_count; ++j) {
        double* p3 = pair.target.frames.ptr() + (t * j_count + j) * 3;
        for (int a = 0; a < 3; ++a) {
          const auto& w = waves[j];
          p3[a] = sk.rest_pose_mm[j][a] +
                  w[3 * a] * std::sin(2.0 * std::numbers::pi * w[3 * a + 1] * static_cast<double>(t) + w[3 * a + 2]);
        }
        double* p2 = pair.input.frames.ptr() + (t * j_count + j) * 3;
        double nx = 0.0, ny = 0.0;
        if (config.noise_sigma > 0.0) {
          nx = config.noise_sigma * noise(rng);
          ny = config.noise_sigma * noise(rng);
        }
        p2[0] = p3[0] * config.projection_scale + nx;
        p2[1] = p3[1] * config.projection_scale + ny;
        p2[2] = config.noise_sigma > 0.0
                    ? std::clamp(std::exp(-std::sqrt(nx * nx + ny * ny) / config.noise_sigma), 0.0, 1.0)
                    : 1.0;
      }
    }
    out.push_back(std::move(pair));
  }
  return out;
}

Tensor flip_pose(const Tensor& pose, const Skeleton& skeleton) {
  if ((pose.rank() != 3 && pose.rank() != 4) || pose.dim(-1) != 3 || pose.dim(-2) != skeleton.joint_count) {
    throw ShapeError("flip_pose: expected [..., " + std::to_string(skeleton.joint_count) + ", 3], got " +
                     shape_str(pose.shape()));
  }
  const std::vector<std::size_t> perm = skeleton.mirror_permutation();
  const std::size_t j_count = skeleton.joint_count;
  const std::size_t frames = pose.size() / (j_count * 3);
  Tensor out(pose.shape());
  for (std::size_t f = 0; f < frames; ++f) {
    for (std::size_t j = 0; j < j_count; ++j) {
      const double* src = pose.ptr() + (f * j_count + perm[j]) * 3;
      double* dst = out.ptr() + (f * j_count + j) * 3;
      dst[0] = -src[0];
      dst[1] = src[1];
      dst[2] = src[2];
    }
  }
  return out;
}

Tensor predict_flip_averaged(PoseMagicModel& model, const Tensor& x2d) {
  const Skeleton& sk = model.config().skeleton;
  const Tensor plain = model.predict(x2d);
  const Tensor mirrored = flip_pose(model.predict(flip_pose(x2d, sk)), sk);
  return ops::scale(ops::add(plain, mirrored), 0.5);
}

TrainingDiverged::TrainingDiverged(std::size_t step, const std::string& what)
    : std::runtime_error(what), step_(step) {}

TrainResult train(PoseMagicModel& model, const std::vector<PosePair>& data, const TrainConfig& config) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  if (config.batch_size == 0) throw ConfigError("train: batch_size must be positive");
  const ModelConfig& mc = model.config();
  for (const PosePair& p : data) {
    check_pose_pair(p.input.frames.shape(), p.target.frames.shape(), "train");
    if (p.input.frames.rank() != 3 || p.input.joints() != mc.J) {
      throw ShapeError("train: sequence '" + p.input.id + "' has shape " + shape_str(p.input.frames.shape()) +
                       ", model expects J = " + std::to_string(mc.J));
    }
  }
  AdamW opt(model.params(), config.optimizer);
  std::mt19937_64 rng(config.seed);
  std::bernoulli_distribution coin(0.5);
  TrainResult result;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.optimizer.lr_at_epoch(epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::vector<Tensor> preds, gts;
    bool stop = false;
    for (std::size_t start = 0; start < order.size() && !stop; start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      // Equal-length sequences share one forward pass.
      std::vector<std::vector<std::size_t>> groups;
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t idx = order[i];
        auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) {
          return data[g.front()].input.length() == data[idx].input.length();
        });
        if (it == groups.end()) {
          groups.push_back({idx});
        } else {
          it->push_back(idx);
        }
      }
      model.zero_grad();
      Tape tape;
      Var loss;
      for (const auto& group : groups) {
        std::vector<Tensor> xs, ys;
        for (std::size_t idx : group) {
          const bool flip = config.flip_augment && coin(rng);
          xs.push_back(flip ? flip_pose(data[idx].input.frames, mc.skeleton) : data[idx].input.frames);
          ys.push_back(flip ? flip_pose(data[idx].target.frames, mc.skeleton) : data[idx].target.frames);
        }
        std::vector<const Tensor*> xp, yp;
        for (std::size_t i = 0; i < xs.size(); ++i) {
          xp.push_back(&xs[i]);
          yp.push_back(&ys[i]);
        }
        const Tensor x = stack(xp), y = stack(yp);
        const Var pred = model.forward(tape, x, Mode::train);
        const Var l = pose_loss(pred, y, mc.lambda_v);
        loss = loss.valid() ? ad::add(loss, l) : l;
        for (std::size_t i = 0; i < group.size(); ++i) {
          const std::size_t each = ys[i].size();
          preds.emplace_back(ys[i].shape(),
                             std::vector<double>(pred.value().ptr() + i * each, pred.value().ptr() + (i + 1) * each));
          gts.push_back(std::move(ys[i]));
        }
      }
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw TrainingDiverged(result.steps + 1, "train: loss became " + std::to_string(value) + " at step " +
                                                     std::to_string(result.steps + 1) + " (epoch " +
                                                     std::to_string(epoch) + ")");
      }
      tape.backward(loss);
      opt.step(lr);
      ++result.steps;
      epoch_loss += value;
      result.step_losses.push_back(value);
      if (config.on_step) config.on_step(result.steps, value);
      if (config.max_steps && result.steps >= config.max_steps) stop = true;
    }
    const Metrics m = evaluate_metrics(preds, gts);
    EpochLog entry{epoch, lr, epoch_loss, m.mpjpe, m.mpjve, m.acc_err, result.steps};
    result.log.push_back(entry);
    if (config.on_epoch) config.on_epoch(entry);
    if (stop || (config.target_mpjpe > 0.0 && m.mpjpe < config.target_mpjpe)) break;
  }
  return result;
}

Metrics evaluate(PoseMagicModel& model, const std::vector<PosePair>& data, bool flip) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  std::vector<Tensor> preds, gts;
  for (const PosePair& p : data) {
    preds.push_back(flip ? predict_flip_averaged(model, p.input.frames) : model.predict(p.input.frames));
    gts.push_back(p.target.frames);
  }
  return evaluate_metrics(preds, gts);
}

}  // namespace posemagic
