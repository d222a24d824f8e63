#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "posemagic/autodiff.hpp"
#include "posemagic/norm.hpp"

namespace posemagic {

using JointPair = std::pair<std::size_t, std::size_t>;

struct Skeleton {
  std::size_t joint_count = 0;
  std::vector<JointPair> edges;
  std::vector<JointPair> left_right_pairs;
  std::size_t root = 0;
  std::vector<std::string> names;
  /// Optional rest pose in millimeters, one (x, y, z) per joint.
  std::vector<std::array<double, 3>> rest_pose_mm;

  /// Throws ConfigError on out-of-range or self edges, or a mirror table that
  /// maps a joint twice.
  void validate() const;
  /// Joint permutation that swaps every left/right pair. Throws ConfigError
  /// when the skeleton has no pairs.
  std::vector<std::size_t> mirror_permutation() const;
  /// Diagonal of the axis-aligned bounding box of the rest pose.
  double rest_pose_diagonal() const;

  bool operator==(const Skeleton&) const = default;
};

/// Skeleton definition file: {joint_count, edges, left_right_pairs, root, names[, rest_pose_mm]}.
Skeleton skeleton_from_json(const std::string& text);
std::string skeleton_to_json(const Skeleton& skeleton);
Skeleton load_skeleton(const std::string& path);
/// The 17-joint Human3.6M-convention skeleton compiled from data/h36m_skeleton.json.
const Skeleton& default_skeleton();
/// Small mirror-symmetric skeleton for tests and demos: joint 0 at the origin,
/// then left/right limb chains (odd joints at -x, even joints at +x); an even
/// joint count leaves the last joint on the midline above the root.
Skeleton toy_skeleton(std::size_t joints);

struct Adjacency {
  Tensor matrix;  // [L, L], binary with unit diagonal
  bool causal = false;
};

/// Symmetric 0/1 matrix from the skeleton edges plus self-loops.
Adjacency spatial_adjacency(const Skeleton& skeleton);

enum class Similarity { dot, cosine };

/// S[i][j] = <x_i, x_j> (or the cosine of the angle) for x: [T, d].
Tensor temporal_similarity(const Tensor& x, Similarity kind = Similarity::dot);

/// Row i connects to its k most similar frames among j != i (j < i when
/// causal), ties going to the lower index, then the self-loop is set.
Adjacency knn_adjacency(const Tensor& similarity, std::size_t k, bool causal);

/// D^{-1/2} A D^{-1/2} with D the row sums of A.
Tensor normalize_adjacency(const Adjacency& adj);

/// Largest |eigenvalue| estimate of a square matrix by power iteration.
double spectral_radius(const Tensor& m, std::size_t iterations = 500, std::uint64_t seed = 1);

/// Produces the normalized adjacency for a stream input x [B, L, d]: either a
/// fixed [L, L] matrix shared by the batch or one K-NN graph per sample [B, L, L].
class AdjacencyProvider {
 public:
  static AdjacencyProvider fixed(Tensor normalized);
  static AdjacencyProvider dynamic_knn(std::size_t k, bool causal, Similarity kind = Similarity::dot);

  Tensor operator()(const Tensor& x) const;
  bool is_dynamic() const { return dynamic_; }
  bool causal() const { return causal_; }

 private:
  bool dynamic_ = false;
  Tensor fixed_;
  std::size_t k_ = 0;
  bool causal_ = false;
  Similarity kind_ = Similarity::dot;
};

struct GcnLayerParams {
  Param w1;  // [d, d], applied after neighborhood aggregation
  Param w2;  // [d, d], applied to the node itself
  Param bn_gamma;
  Param bn_beta;
  BatchNormState bn;

  static GcnLayerParams init(const std::string& prefix, std::size_t d, std::mt19937_64& rng);
  void visit(const std::function<void(Param&)>& fn);
};

/// ReLU(x + BN(adj x W1 + x W2)) for x [B, L, d] and adj [L, L] or [B, L, L].
Var gcn_layer(const Var& x, const Tensor& norm_adj, GcnLayerParams& params, Mode mode);

struct GcnStreamParams {
  Param ln1_gamma, ln1_beta;
  GcnLayerParams gcn;
  Param ln2_gamma, ln2_beta;
  Param mlp_w1;  // [d, r d]
  Param mlp_b1;
  Param mlp_w2;  // [r d, d]
  Param mlp_b2;

  std::size_t width() const { return gcn.w1.value.dim(0); }

  static GcnStreamParams init(const std::string& prefix, std::size_t d, std::size_t mlp_ratio,
                              std::mt19937_64& rng);
  void visit(const std::function<void(Param&)>& fn);
};

/// X' = X + GCN(LN(X)); X_G = X' + MLP(LN(X')). The adjacency is built from
/// the values of X and carries no gradient.
Var gcn_stream(const Var& x, const AdjacencyProvider& adjacency, GcnStreamParams& params, Mode mode);

}  // namespace posemagic
