#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "posemagic/graph.hpp"
#include "posemagic/mamba.hpp"

namespace posemagic {

enum class Direction { bidirectional, causal };
enum class FusionMode { per_position, per_channel };

std::string to_string(Direction d);
std::string to_string(FusionMode f);
std::string to_string(Similarity s);
std::string to_string(ScanMethod m);

struct ModelConfig {
  std::size_t N = 26;
  std::size_t d = 128;
  std::size_t d_prime = 512;
  std::size_t k = 2;
  std::size_t J = 17;
  std::size_t n = 16;
  Direction direction = Direction::bidirectional;
  std::size_t T_train = 243;
  double lambda_v = 20.0;
  Skeleton skeleton = default_skeleton();

  std::size_t mlp_ratio = 4;
  Similarity similarity = Similarity::dot;
  FusionMode fusion = FusionMode::per_position;
  ScanMethod scan = ScanMethod::sequential;
  /// Millimeters per unit of the head output.
  double output_scale = 1000.0;

  /// Throws ConfigError on non-positive dims or a skeleton that does not have J joints.
  void validate() const;
  bool causal() const { return direction == Direction::causal; }

  bool operator==(const ModelConfig&) const = default;
};

struct MagicBlockParams {
  MambaStreamParams spatial_mamba;
  MambaStreamParams temporal_mamba;
  GcnStreamParams spatial_gcn;
  GcnStreamParams temporal_gcn;
  Param fusion_w;  // [2d, 2] or [2d, 2d] for per-channel fusion

  void visit(const std::function<void(Param&)>& fn);
};

/// alpha = softmax([X_M, X_G] W) per position (or per channel);
/// returns alpha_M * X_M + alpha_G * X_G.
Var adaptive_fusion(const Var& xm, const Var& xg, const Var& w, FusionMode mode = FusionMode::per_position);

class PoseMagicModel {
 public:
  PoseMagicModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  /// 2D input [T, J, 3] or [B, T, J, 3] with (x, y, confidence) to X0 [B, T, J, d].
  Var embed(Tape& tape, const Tensor& x2d);
  Var magic_block(const Var& x, std::size_t index, Mode mode);
  /// Full network. Returns [B, T, J, 3] (or [T, J, 3] for unbatched input) in millimeters.
  Var forward(Tape& tape, const Tensor& x2d, Mode mode);
  /// Eval-mode forward without a gradient tape.
  Tensor predict(const Tensor& x2d);

  void visit_params(const std::function<void(Param&)>& fn);
  /// Non-learned state saved with the model (batch-norm running statistics).
  void visit_buffers(const std::function<void(const std::string&, Tensor&)>& fn);
  std::vector<Param*> params();
  std::size_t param_count();
  void zero_grad();

  Param input_w;  // [3, d]
  Param input_b;  // [d]
  Param pos;      // [J, d]
  std::vector<MagicBlockParams> blocks;
  Param expand_w;  // [d, d']
  Param expand_b;  // [d']
  Param head_w;    // [d', 3]
  Param head_b;    // [3]

 private:
  ModelConfig config_;
  AdjacencyProvider spatial_adj_;
  AdjacencyProvider temporal_adj_;
};

/// Scalar parameters of a model built from `config`.
std::size_t count_params(const ModelConfig& config);

}  // namespace posemagic
