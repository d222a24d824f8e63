#include "posemagic/model.hpp"

#include <cmath>
#include <random>

namespace posemagic {

std::string to_string(Direction d) { return d == Direction::causal ? "causal" : "bidirectional"; }
std::string to_string(FusionMode f) { return f == FusionMode::per_channel ? "per_channel" : "per_position"; }
std::string to_string(Similarity s) { return s == Similarity::cosine ? "cosine" : "dot"; }
std::string to_string(ScanMethod m) { return m == ScanMethod::parallel ? "parallel" : "sequential"; }

void ModelConfig::validate() const {
  const std::pair<const char*, std::size_t> dims[] = {{"d", d},   {"d_prime", d_prime}, {"k", k},
                                                      {"J", J},   {"n", n},             {"T_train", T_train},
                                                      {"mlp_ratio", mlp_ratio}};
  for (const auto& [name, value] : dims) {
    if (value == 0) throw ConfigError(std::string("config: ") + name + " must be positive");
  }
  if (!(lambda_v >= 0.0) || !std::isfinite(lambda_v)) throw ConfigError("config: lambda_v must be >= 0");
  if (!(output_scale > 0.0) || !std::isfinite(output_scale)) throw ConfigError("config: output_scale must be > 0");
  skeleton.validate();
  if (skeleton.joint_count != J) {
    throw ConfigError("config: J = " + std::to_string(J) + " but the skeleton has " +
                      std::to_string(skeleton.joint_count) + " joints");
  }
}

void MagicBlockParams::visit(const std::function<void(Param&)>& fn) {
  spatial_mamba.visit(fn);
  temporal_mamba.visit(fn);
  spatial_gcn.visit(fn);
  temporal_gcn.visit(fn);
  fn(fusion_w);
}

Var adaptive_fusion(const Var& xm, const Var& xg, const Var& w, FusionMode mode) {
  if (xm.shape() != xg.shape()) {
    throw ShapeError("adaptive_fusion: stream shapes " + shape_str(xm.shape()) + " and " + shape_str(xg.shape()));
  }
  const Shape& shape = xm.shape();
  const std::size_t d = shape.back();
  const Var logits = ad::matmul(ad::concat({xm, xg}, -1), w);
  if (mode == FusionMode::per_position) {
    const Var alpha = ad::softmax(logits, -1);
    return ad::add(ad::mul(ad::slice(alpha, -1, 0, 1), xm), ad::mul(ad::slice(alpha, -1, 1, 1), xg));
  }
  Shape pair_shape(shape.begin(), shape.end() - 1);
  pair_shape.push_back(2);
  pair_shape.push_back(d);
  const Var alpha = ad::softmax(ad::reshape(logits, pair_shape), -2);
  const Var am = ad::reshape(ad::slice(alpha, -2, 0, 1), shape);
  const Var ag = ad::reshape(ad::slice(alpha, -2, 1, 1), shape);
  return ad::add(ad::mul(am, xm), ad::mul(ag, xg));
}

namespace {

Param uniform_param(const std::string& name, Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return Param(name, std::move(t));
}

}  // namespace

PoseMagicModel::PoseMagicModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const std::size_t d = config_.d, dp = config_.d_prime, j = config_.J;
  std::mt19937_64 rng(seed);
  input_w = uniform_param("embed.w", {3, d}, 3, rng);
  input_b = Param("embed.b", Tensor({d}, 0.0));
  Tensor pos_init({j, d});
  std::normal_distribution<double> pos_dist(0.0, 0.02);
  for (double& v : pos_init.data()) v = pos_dist(rng);
  pos = Param("embed.pos", std::move(pos_init));

  blocks.reserve(config_.N);
  for (std::size_t i = 0; i < config_.N; ++i) {
    const std::string prefix = "block" + std::to_string(i);
    MagicBlockParams b;
    b.spatial_mamba = MambaStreamParams::init(prefix + ".spatial_mamba", d, config_.n, true, rng);
    b.temporal_mamba = MambaStreamParams::init(prefix + ".temporal_mamba", d, config_.n, !config_.causal(), rng);
    b.spatial_gcn = GcnStreamParams::init(prefix + ".spatial_gcn", d, config_.mlp_ratio, rng);
    b.temporal_gcn = GcnStreamParams::init(prefix + ".temporal_gcn", d, config_.mlp_ratio, rng);
    const std::size_t outs = config_.fusion == FusionMode::per_channel ? 2 * d : 2;
    b.fusion_w = Param(prefix + ".fusion.w", Tensor({2 * d, outs}, 0.0));
    blocks.push_back(std::move(b));
  }
  expand_w = uniform_param("expand.w", {d, dp}, d, rng);
  expand_b = Param("expand.b", Tensor({dp}, 0.0));
  head_w = uniform_param("head.w", {dp, 3}, dp, rng);
  head_b = Param("head.b", Tensor({3}, 0.0));

  spatial_adj_ = AdjacencyProvider::fixed(normalize_adjacency(spatial_adjacency(config_.skeleton)));
  temporal_adj_ = AdjacencyProvider::dynamic_knn(config_.k, config_.causal(), config_.similarity);
}

Var PoseMagicModel::embed(Tape& tape, const Tensor& x2d) {
  const bool batched = x2d.rank() == 4;
  if ((x2d.rank() != 3 && !batched) || x2d.dim(-1) != 3 || x2d.dim(-2) != config_.J || x2d.dim(-3) == 0) {
    throw ShapeError("embed: expected [T, " + std::to_string(config_.J) + ", 3] or [B, T, " +
                     std::to_string(config_.J) + ", 3], got " + shape_str(x2d.shape()));
  }
  if (!x2d.all_finite()) throw std::invalid_argument("embed: input contains non-finite values");
  const Tensor x = batched ? x2d : x2d.reshaped({1, x2d.dim(0), x2d.dim(1), 3});
  const Var b = tape.param(input_b);
  return ad::add(ad::linear(tape.constant(x), tape.param(input_w), &b), tape.param(pos));
}

Var PoseMagicModel::magic_block(const Var& x, std::size_t index, Mode mode) {
  if (x.value().rank() != 4) throw ShapeError("magic_block: expected [B, T, J, d], got " + shape_str(x.shape()));
  MagicBlockParams& p = blocks.at(index);
  const std::size_t b = x.dim(0), t = x.dim(1), j = x.dim(2), d = x.dim(3);
  const Shape frames{b * t, j, d};
  const Shape tracks{b * j, t, d};
  const std::vector<std::size_t> swap{0, 2, 1, 3};
  const Shape bt{b, t, j, d};
  const Shape bj{b, j, t, d};

  // Joints as tokens within each frame, then frames as tokens along each joint's track.
  Var m = mamba_stream(ad::reshape(x, frames), p.spatial_mamba, config_.scan);
  m = ad::reshape(ad::permute(ad::reshape(m, bt), swap), tracks);
  m = mamba_stream(m, p.temporal_mamba, config_.scan);
  m = ad::permute(ad::reshape(m, bj), swap);

  Var g = gcn_stream(ad::reshape(x, frames), spatial_adj_, p.spatial_gcn, mode);
  g = ad::reshape(ad::permute(ad::reshape(g, bt), swap), tracks);
  g = gcn_stream(g, temporal_adj_, p.temporal_gcn, mode);
  g = ad::permute(ad::reshape(g, bj), swap);

  return adaptive_fusion(m, g, x.tape()->param(p.fusion_w), config_.fusion);
}

Var PoseMagicModel::forward(Tape& tape, const Tensor& x2d, Mode mode) {
  Var x = embed(tape, x2d);
  for (std::size_t i = 0; i < blocks.size(); ++i) x = magic_block(x, i, mode);
  const Var eb = tape.param(expand_b), hb = tape.param(head_b);
  const Var motion = ad::tanh(ad::linear(x, tape.param(expand_w), &eb));
  Var out = ad::scale(ad::linear(motion, tape.param(head_w), &hb), config_.output_scale);
  if (x2d.rank() == 3) out = ad::reshape(out, x2d.shape());
  return out;
}

Tensor PoseMagicModel::predict(const Tensor& x2d) {
  Tape tape(false);
  return forward(tape, x2d, Mode::eval).value();
}

void PoseMagicModel::visit_params(const std::function<void(Param&)>& fn) {
  fn(input_w);
  fn(input_b);
  fn(pos);
  for (auto& b : blocks) b.visit(fn);
  fn(expand_w);
  fn(expand_b);
  fn(head_w);
  fn(head_b);
}

void PoseMagicModel::visit_buffers(const std::function<void(const std::string&, Tensor&)>& fn) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string prefix = "block" + std::to_string(i);
    for (auto [name, gcn] : {std::pair{".spatial_gcn", &blocks[i].spatial_gcn},
                             std::pair{".temporal_gcn", &blocks[i].temporal_gcn}}) {
      fn(prefix + name + ".gcn.bn.running_mean", gcn->gcn.bn.running_mean);
      fn(prefix + name + ".gcn.bn.running_var", gcn->gcn.bn.running_var);
    }
  }
}

std::vector<Param*> PoseMagicModel::params() {
  std::vector<Param*> out;
  visit_params([&](Param& p) { out.push_back(&p); });
  return out;
}

std::size_t PoseMagicModel::param_count() {
  std::size_t total = 0;
  visit_params([&](Param& p) { total += p.size(); });
  return total;
}

void PoseMagicModel::zero_grad() {
  visit_params([](Param& p) { p.zero_grad(); });
}

std::size_t count_params(const ModelConfig& config) { return PoseMagicModel(config, 0).param_count(); }

}  // namespace posemagic
