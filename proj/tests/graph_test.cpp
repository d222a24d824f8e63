#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "posemagic/graph.hpp"
#include "test_util.hpp"

namespace posemagic {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

Skeleton chain(std::size_t joints) {
  Skeleton s;
  s.joint_count = joints;
  for (std::size_t j = 1; j < joints; ++j) s.edges.push_back({j - 1, j});
  return s;
}

// Brute-force top-k over j != i (j < i when causal), ties to the lower index.
Tensor knn_oracle(const Tensor& s, std::size_t k, bool causal) {
  const std::size_t t = s.dim(0);
  Tensor a({t, t});
  for (std::size_t i = 0; i < t; ++i) {
    std::vector<bool> taken(t, false);
    for (std::size_t pick = 0; pick < k; ++pick) {
      std::size_t best = t;
      for (std::size_t j = 0; j < (causal ? i : t); ++j) {
        if (j == i || taken[j]) continue;
        if (best == t || s.at({i, j}) > s.at({i, best})) best = j;
      }
      if (best == t) break;
      taken[best] = true;
      a.at({i, best}) = 1.0;
    }
    a.at({i, i}) = 1.0;
  }
  return a;
}

TEST(Skeleton, DefaultSkeletonIsValid) {
  const Skeleton& s = default_skeleton();
  EXPECT_EQ(s.joint_count, 17u);
  EXPECT_EQ(s.edges.size(), 16u);
  EXPECT_EQ(s.left_right_pairs.size(), 6u);
  EXPECT_NO_THROW(s.validate());
  EXPECT_GT(s.rest_pose_diagonal(), 1000.0);
  const std::vector<std::size_t> perm = s.mirror_permutation();
  for (std::size_t j = 0; j < 17; ++j) EXPECT_EQ(perm[perm[j]], j);
}

TEST(Skeleton, JsonRoundTrip) {
  const Skeleton& s = default_skeleton();
  EXPECT_EQ(skeleton_from_json(skeleton_to_json(s)), s);
  EXPECT_THROW(skeleton_from_json("{\"joint_count\": 3, \"edges\": [[0]]}"), FormatError);
  EXPECT_THROW(skeleton_from_json("not json"), FormatError);
}

TEST(Skeleton, ValidationErrors) {
  Skeleton s = chain(3);
  s.edges.push_back({1, 3});
  EXPECT_THROW(s.validate(), ConfigError);
  s = chain(3);
  s.edges.push_back({2, 2});
  EXPECT_THROW(s.validate(), ConfigError);
  s = chain(3);
  s.left_right_pairs = {{0, 1}, {1, 2}};
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_THROW(chain(3).mirror_permutation(), ConfigError);
}

TEST(Skeleton, ToySkeletonIsMirrorSymmetric) {
  for (std::size_t joints : {1, 2, 5, 6, 9}) {
    const Skeleton s = toy_skeleton(joints);
    EXPECT_NO_THROW(s.validate());
    EXPECT_EQ(s.edges.size(), joints - 1);
    if (s.left_right_pairs.empty()) continue;
    const std::vector<std::size_t> perm = s.mirror_permutation();
    for (std::size_t j = 0; j < joints; ++j) {
      EXPECT_DOUBLE_EQ(s.rest_pose_mm[perm[j]][0], -s.rest_pose_mm[j][0]);
      EXPECT_DOUBLE_EQ(s.rest_pose_mm[perm[j]][1], s.rest_pose_mm[j][1]);
    }
  }
}

TEST(SpatialAdjacency, ThreeJointChain) {
  const Adjacency a = spatial_adjacency(chain(3));
  EXPECT_EQ(a.matrix, Tensor({3, 3}, std::vector<double>{1, 1, 0, 1, 1, 1, 0, 1, 1}));
  EXPECT_FALSE(a.causal);
}

TEST(SpatialAdjacency, NoEdgesIsIdentity) {
  Skeleton s;
  s.joint_count = 4;
  const Tensor m = spatial_adjacency(s).matrix;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(m.at({i, j}), i == j ? 1.0 : 0.0);
}

TEST(SpatialAdjacency, DefaultSkeletonHas32OffDiagonalOnes) {
  const Tensor m = spatial_adjacency(default_skeleton()).matrix;
  double off = 0;
  for (std::size_t i = 0; i < 17; ++i) {
    EXPECT_EQ(m.at({i, i}), 1.0);
    for (std::size_t j = 0; j < 17; ++j) {
      EXPECT_EQ(m.at({i, j}), m.at({j, i}));
      if (i != j) off += m.at({i, j});
    }
  }
  EXPECT_EQ(off, 32.0);
}

TEST(SpatialAdjacency, OutOfRangeEdgeThrows) {
  Skeleton s = chain(3);
  s.edges.push_back({0, 7});
  EXPECT_THROW(spatial_adjacency(s), ConfigError);
}

TEST(TemporalSimilarity, OrthogonalFrames) {
  const Tensor x({3, 3}, std::vector<double>{2, 0, 0, 0, 3, 0, 0, 0, 1});
  const Tensor s = temporal_similarity(x);
  EXPECT_EQ(s, Tensor({3, 3}, std::vector<double>{4, 0, 0, 0, 9, 0, 0, 0, 1}));
}

TEST(TemporalSimilarity, IdenticalRows) {
  Tensor x({4, 2});
  for (std::size_t t = 0; t < 4; ++t) {
    x.at({t, 0}) = 3;
    x.at({t, 1}) = -4;
  }
  const Tensor s = temporal_similarity(x);
  for (double v : s.data()) EXPECT_EQ(v, 25.0);
}

TEST(TemporalSimilarity, MatchesDoubleLoop) {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({9, 5}, rng);
  const Tensor s = temporal_similarity(x), c = temporal_similarity(x, Similarity::cosine);
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 9; ++j) {
      double dot = 0, ni = 0, nj = 0;
      for (std::size_t k = 0; k < 5; ++k) {
        dot += x.at({i, k}) * x.at({j, k});
        ni += x.at({i, k}) * x.at({i, k});
        nj += x.at({j, k}) * x.at({j, k});
      }
      EXPECT_NEAR(s.at({i, j}), dot, 1e-12);
      EXPECT_EQ(s.at({i, j}), s.at({j, i}));
      EXPECT_NEAR(c.at({i, j}), dot / std::sqrt(ni * nj), 1e-12);
    }
}

TEST(KnnAdjacency, LargeKIsFullyConnected) {
  std::mt19937_64 rng(2);
  const Tensor s = random_tensor({5, 5}, rng);
  for (std::size_t k : {4, 5, 9}) {
    const Adjacency a = knn_adjacency(s, k, false);
    for (double v : a.matrix.data()) EXPECT_EQ(v, 1.0);
  }
}

TEST(KnnAdjacency, HandBuiltRanking) {
  // Row i prefers, in order: see the comments.
  const Tensor s({4, 4}, std::vector<double>{
                             9, 1, 5, 3,  // row 0: 2, 3
                             4, 9, 4, 7,  // row 1: 3, then the 0/2 tie goes to 0
                             2, 8, 9, 8,  // row 2: 1/3 tie, both taken
                             6, 0, 5, 9,  // row 3: 0, 2
                         });
  const Tensor expected({4, 4}, std::vector<double>{1, 0, 1, 1, 1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 1, 1});
  EXPECT_EQ(knn_adjacency(s, 2, false).matrix, expected);
  EXPECT_EQ(knn_oracle(s, 2, false), expected);
  // Causal: row 0 only the self-loop, row 1 only 0, row 2 both past frames, row 3 picks 0 and 2.
  const Tensor causal({4, 4}, std::vector<double>{1, 0, 0, 0, 1, 1, 0, 0, 1, 1, 1, 0, 1, 0, 1, 1});
  EXPECT_EQ(knn_adjacency(s, 2, true).matrix, causal);
}

TEST(KnnAdjacency, MatchesOracleAndRowCounts) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> t_dist(2, 20), k_dist(1, 4), tie_dist(0, 3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t t = t_dist(rng), k = k_dist(rng);
    Tensor s = random_tensor({t, t}, rng);
    // Coarse values create ties.
    for (double& v : s.data()) v = static_cast<double>(tie_dist(rng)) + (trial % 2 ? v : 0.0);
    for (bool causal : {false, true}) {
      const Tensor a = knn_adjacency(s, k, causal).matrix;
      ASSERT_EQ(a, knn_oracle(s, k, causal));
      for (std::size_t i = 0; i < t; ++i) {
        double nnz = 0;
        for (std::size_t j = 0; j < t; ++j) nnz += a.at({i, j});
        const std::size_t avail = causal ? i : t - 1;
        EXPECT_EQ(nnz, static_cast<double>(std::min(k, avail) + 1));
      }
    }
  }
}

TEST(KnnAdjacency, ZeroKThrows) { EXPECT_THROW(knn_adjacency(Tensor({3, 3}), 0, false), ConfigError); }

TEST(NormalizeAdjacency, Examples) {
  Adjacency eye{Tensor({3, 3}), false};
  for (std::size_t i = 0; i < 3; ++i) eye.matrix.at({i, i}) = 1;
  EXPECT_EQ(normalize_adjacency(eye), eye.matrix);
  const Adjacency ones{Tensor({2, 2}, 1.0), false};
  const Tensor n = normalize_adjacency(ones);
  for (double v : n.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(NormalizeAdjacency, CausalUsesRowSumsOnBothSides) {
  const Adjacency a{Tensor({2, 2}, std::vector<double>{1, 0, 1, 1}), true};
  const Tensor n = normalize_adjacency(a);
  EXPECT_DOUBLE_EQ(n.at({0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(n.at({1, 0}), 1.0 / std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(n.at({1, 1}), 0.5);
  EXPECT_EQ(n.at({0, 1}), 0.0);
}

TEST(NormalizeAdjacency, SymmetricSpectralRadiusAtMostOne) {
  std::mt19937_64 rng(4);
  std::bernoulli_distribution coin(0.3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t l = 3 + trial % 15;
    Adjacency a{Tensor({l, l}), false};
    for (std::size_t i = 0; i < l; ++i) {
      a.matrix.at({i, i}) = 1;
      for (std::size_t j = i + 1; j < l; ++j) a.matrix.at({i, j}) = a.matrix.at({j, i}) = coin(rng) ? 1 : 0;
    }
    EXPECT_LE(spectral_radius(normalize_adjacency(a)), 1.0 + 1e-9);
  }
  // The bound is attained: D^-1/2 A D^-1/2 has eigenvalue 1 with eigenvector D^1/2 1.
  EXPECT_NEAR(spectral_radius(normalize_adjacency(spatial_adjacency(default_skeleton()))), 1.0, 1e-9);
}

TEST(AdjacencyProvider, DynamicGraphsArePerSample) {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({3, 6, 4}, rng);
  const Tensor a = AdjacencyProvider::dynamic_knn(2, true)(x);
  ASSERT_EQ(a.shape(), (Shape{3, 6, 6}));
  for (std::size_t b = 0; b < 3; ++b) {
    Tensor xb({6, 4});
    for (std::size_t i = 0; i < 24; ++i) xb[i] = x[b * 24 + i];
    const Tensor expected = normalize_adjacency(knn_adjacency(temporal_similarity(xb), 2, true));
    for (std::size_t i = 0; i < 36; ++i) EXPECT_EQ(a[b * 36 + i], expected[i]);
  }
  EXPECT_THROW(AdjacencyProvider::fixed(Tensor({5, 5}))(x), ShapeError);
}

GcnLayerParams random_layer(std::size_t d, std::mt19937_64& rng) {
  GcnLayerParams p = GcnLayerParams::init("g", d, rng);
  p.bn_gamma.value = random_tensor({d}, rng, 0.5, 1.5);
  p.bn_beta.value = random_tensor({d}, rng, -0.3, 0.3);
  return p;
}

TEST(GcnLayer, ZeroWeightsGiveRelu) {
  std::mt19937_64 rng(6);
  GcnLayerParams p = GcnLayerParams::init("g", 4, rng);
  p.w1.value.fill(0.0);
  p.w2.value.fill(0.0);
  const Tensor x = random_tensor({2, 5, 4}, rng);
  const Tensor adj = normalize_adjacency(spatial_adjacency(chain(5)));
  Tape tape(false);
  const Tensor y = gcn_layer(tape.constant(x), adj, p, Mode::train).value();
  EXPECT_EQ(y, ops::activate(x, ops::Activation::relu));
}

TEST(GcnLayer, OutputIsNonNegativeAndShapeChecked) {
  std::mt19937_64 rng(7);
  GcnLayerParams p = random_layer(4, rng);
  const Tensor adj = normalize_adjacency(spatial_adjacency(chain(5)));
  Tape tape(false);
  const Tensor y = gcn_layer(tape.constant(random_tensor({3, 5, 4}, rng, -5, 5)), adj, p, Mode::train).value();
  for (double v : y.data()) EXPECT_GE(v, 0.0);
  EXPECT_THROW(gcn_layer(tape.constant(Tensor({3, 6, 4})), adj, p, Mode::train), ShapeError);
  EXPECT_THROW(gcn_layer(tape.constant(Tensor({3, 5, 3})), adj, p, Mode::train), ShapeError);
}

TEST(GcnLayer, EquivariantUnderJointRelabeling) {
  std::mt19937_64 rng(8);
  GcnLayerParams p = random_layer(4, rng);
  const Tensor adj = normalize_adjacency(spatial_adjacency(default_skeleton()));
  const Tensor x = random_tensor({2, 17, 4}, rng);
  std::vector<std::size_t> perm(17);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor xp({2, 17, 4}), adjp({17, 17});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < 17; ++j)
      for (std::size_t c = 0; c < 4; ++c) xp.at({b, j, c}) = x.at({b, perm[j], c});
  for (std::size_t i = 0; i < 17; ++i)
    for (std::size_t j = 0; j < 17; ++j) adjp.at({i, j}) = adj.at({perm[i], perm[j]});
  Tape tape(false);
  BatchNormState saved = p.bn;
  const Tensor y = gcn_layer(tape.constant(x), adj, p, Mode::train).value();
  p.bn = saved;
  const Tensor yp = gcn_layer(tape.constant(xp), adjp, p, Mode::train).value();
  double worst = 0;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < 17; ++j)
      for (std::size_t c = 0; c < 4; ++c) worst = std::max(worst, std::abs(yp.at({b, j, c}) - y.at({b, perm[j], c})));
  EXPECT_LT(worst, 1e-12);
}

TEST(GcnLayer, GradientMatchesNumeric) {
  std::mt19937_64 rng(9);
  GcnLayerParams p = random_layer(3, rng);
  Param x("x", random_tensor({2, 4, 3}, rng));
  const Tensor adj = AdjacencyProvider::dynamic_knn(2, false)(x.value);
  const Tensor weights = random_tensor({2, 4, 3}, rng);
  std::vector<Param*> params{&x};
  p.visit([&](Param& q) { params.push_back(&q); });
  for (Mode mode : {Mode::train, Mode::eval}) {
    const BatchNormState saved = p.bn;
    const GradCheckResult r = grad_check(
        [&](Tape& t) {
          p.bn = saved;
          return ad::sum(ad::mul(gcn_layer(t.param(x), adj, p, mode), t.constant(weights)));
        },
        params);
    EXPECT_LT(r.max_rel_error, 1e-5) << r.worst_param << "[" << r.worst_index << "]";
  }
}

TEST(GcnStream, ZeroedWeightsAndNormsGiveIdentity) {
  std::mt19937_64 rng(10);
  GcnStreamParams p = GcnStreamParams::init("s", 4, 4, rng);
  // With LN affine zeroed both residual branches see zeros; ReLU(0) and BN(0) vanish.
  for (Param* q : {&p.ln1_gamma, &p.ln1_beta, &p.ln2_gamma, &p.ln2_beta, &p.gcn.w1, &p.gcn.w2, &p.mlp_w1,
                   &p.mlp_b1, &p.mlp_w2, &p.mlp_b2})
    q->value.fill(0.0);
  const Tensor x = random_tensor({2, 5, 4}, rng);
  Tape tape(false);
  const auto provider = AdjacencyProvider::fixed(normalize_adjacency(spatial_adjacency(chain(5))));
  EXPECT_EQ(gcn_stream(tape.constant(x), provider, p, Mode::train).value(), x);
}

TEST(GcnStream, ShapePreserved) {
  std::mt19937_64 rng(11);
  GcnStreamParams p = GcnStreamParams::init("s", 4, 2, rng);
  for (std::size_t len : {1, 2, 243}) {
    Tape tape(false);
    const Tensor y =
        gcn_stream(tape.constant(random_tensor({2, len, 4}, rng)), AdjacencyProvider::dynamic_knn(2, true), p,
                   Mode::train)
            .value();
    EXPECT_EQ(y.shape(), (Shape{2, len, 4}));
    EXPECT_TRUE(y.all_finite());
  }
}

TEST(GcnStream, CausalTemporalStreamIgnoresFuture) {
  std::mt19937_64 rng(12);
  GcnStreamParams p = GcnStreamParams::init("s", 4, 2, rng);
  p.gcn.bn.running_mean = random_tensor({4}, rng);
  const auto provider = AdjacencyProvider::dynamic_knn(2, true);
  const std::size_t len = 12;
  const Tensor x = random_tensor({3, len, 4}, rng);
  Tape tape(false);
  const Tensor y = gcn_stream(tape.constant(x), provider, p, Mode::eval).value();
  for (std::size_t tp = 1; tp < len; ++tp) {
    Tensor xp = x;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t c = 0; c < 4; ++c) xp.at({b, tp, c}) = 10.0 * (c + 1);
    const Tensor yp = gcn_stream(tape.constant(xp), provider, p, Mode::eval).value();
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t t = 0; t < tp; ++t)
        for (std::size_t c = 0; c < 4; ++c) ASSERT_LE(std::abs(yp.at({b, t, c}) - y.at({b, t, c})), 1e-12);
  }
}

TEST(GcnStream, GradientMatchesNumeric) {
  std::mt19937_64 rng(13);
  GcnStreamParams p = GcnStreamParams::init("s", 3, 2, rng);
  Param x("x", random_tensor({2, 5, 3}, rng));
  const Tensor weights = random_tensor({2, 5, 3}, rng);
  std::vector<Param*> params{&x};
  p.visit([&](Param& q) { params.push_back(&q); });
  const BatchNormState saved = p.gcn.bn;
  const auto provider = AdjacencyProvider::dynamic_knn(2, false);
  const GradCheckResult r = grad_check(
      [&](Tape& t) {
        p.gcn.bn = saved;
        return ad::sum(ad::mul(gcn_stream(t.param(x), provider, p, Mode::train), t.constant(weights)));
      },
      params);
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst_param << "[" << r.worst_index << "]";
}

}  // namespace
}  // namespace posemagic
