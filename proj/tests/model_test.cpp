#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "posemagic/cli.hpp"
#include "posemagic/model.hpp"
#include "test_util.hpp"

namespace posemagic {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

ModelConfig tiny(std::size_t blocks, Direction direction = Direction::bidirectional) {
  ModelConfig c;
  c.N = blocks;
  c.d = 8;
  c.d_prime = 16;
  c.n = 4;
  c.J = 5;
  c.skeleton = toy_skeleton(5);
  c.T_train = 6;
  c.direction = direction;
  return c;
}

// Gives every zero-initialized output projection a random value so that each
// stream contributes.
void randomize_residuals(PoseMagicModel& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (MagicBlockParams& b : model.blocks) {
    for (MambaStreamParams* m : {&b.spatial_mamba, &b.temporal_mamba}) {
      m->w_p3.value = random_tensor(m->w_p3.value.shape(), rng, -0.3, 0.3);
    }
    b.fusion_w.value = random_tensor(b.fusion_w.value.shape(), rng, -0.3, 0.3);
  }
}

Tensor random_input(std::size_t t, std::size_t j, std::mt19937_64& rng) {
  Tensor x = random_tensor({t, j, 3}, rng, -0.5, 0.5);
  for (std::size_t i = 2; i < x.size(); i += 3) x[i] = 0.5 + 0.5 * x[i];
  return x;
}

TEST(ModelConfig, Validation) {
  EXPECT_NO_THROW(tiny(1).validate());
  ModelConfig c = tiny(1);
  c.d = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny(1);
  c.J = 17;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny(1);
  c.lambda_v = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(PoseMagicModel(c, 0), ConfigError);
  const ModelConfig defaults;
  EXPECT_EQ(defaults.N, 26u);
  EXPECT_EQ(defaults.d, 128u);
  EXPECT_EQ(defaults.d_prime, 512u);
  EXPECT_EQ(defaults.k, 2u);
}

TEST(Embed, FrameIndexIndependent) {
  PoseMagicModel model(tiny(0), 1);
  std::mt19937_64 rng(2);
  const Tensor frame = random_input(1, 5, rng);
  Tensor x({3, 5, 3});
  for (std::size_t t = 0; t < 3; ++t) std::copy(frame.ptr(), frame.ptr() + 15, x.ptr() + t * 15);
  Tape tape(false);
  const Tensor e = model.embed(tape, x).value();
  ASSERT_EQ(e.shape(), (Shape{1, 3, 5, 8}));
  for (std::size_t t = 1; t < 3; ++t)
    for (std::size_t i = 0; i < 40; ++i) EXPECT_EQ(e[t * 40 + i], e[i]);
}

TEST(Embed, ZeroInputGivesPositionalEmbedding) {
  PoseMagicModel model(tiny(0), 3);
  model.input_b.value.fill(0.0);
  Tape tape(false);
  const Tensor e = model.embed(tape, Tensor({4, 5, 3})).value();
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t i = 0; i < 40; ++i) EXPECT_EQ(e[t * 40 + i], model.pos.value[i]);
}

TEST(Embed, ShapesAndErrors) {
  ModelConfig c = tiny(0);
  c.J = 17;
  c.skeleton = default_skeleton();
  PoseMagicModel model(c, 4);
  for (std::size_t t : {1, 81, 243}) {
    Tape tape(false);
    EXPECT_EQ(model.embed(tape, Tensor({t, 17, 3})).shape(), (Shape{1, t, 17, 8}));
  }
  Tape tape(false);
  EXPECT_THROW(model.embed(tape, Tensor({2, 16, 3})), ShapeError);
  EXPECT_THROW(model.embed(tape, Tensor({2, 17, 2})), ShapeError);
  Tensor bad({2, 17, 3});
  bad[5] = NAN;
  EXPECT_THROW(model.embed(tape, bad), std::invalid_argument);
}

TEST(PositionalEmbedding, IsSpatialOnlyWithSmallGaussianInit) {
  ModelConfig c = tiny(0);
  c.J = 17;
  c.skeleton = default_skeleton();
  c.d = 64;
  PoseMagicModel model(c, 5);
  EXPECT_EQ(model.pos.value.shape(), (Shape{17, 64}));
  double mean = 0, sq = 0;
  for (double v : model.pos.value.data()) {
    mean += v;
    sq += v * v;
  }
  const double n = static_cast<double>(model.pos.value.size());
  EXPECT_NEAR(mean / n, 0.0, 0.005);
  EXPECT_NEAR(std::sqrt(sq / n), 0.02, 0.004);
}

TEST(AdaptiveFusion, Examples) {
  std::mt19937_64 rng(6);
  Tape tape(false);
  const Tensor v = random_tensor({2, 3, 4}, rng);
  const Var w = tape.constant(random_tensor({8, 2}, rng));
  EXPECT_LT(max_abs_diff(adaptive_fusion(tape.constant(v), tape.constant(v), w).value(), v), 1e-15);
  const Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 3, 4}, rng);
  const Tensor avg = adaptive_fusion(tape.constant(a), tape.constant(b), tape.constant(Tensor({8, 2}))).value();
  EXPECT_LT(max_abs_diff(avg, ops::scale(ops::add(a, b), 0.5)), 1e-15);
  EXPECT_THROW(adaptive_fusion(tape.constant(a), tape.constant(Tensor({2, 3, 5})), w), ShapeError);
}

TEST(AdaptiveFusion, ConvexPerPositionWeights) {
  std::mt19937_64 rng(7);
  for (FusionMode mode : {FusionMode::per_position, FusionMode::per_channel}) {
    Tape tape(false);
    const Tensor a = random_tensor({3, 5, 4}, rng, -3, 3), b = random_tensor({3, 5, 4}, rng, -3, 3);
    const Shape ws = mode == FusionMode::per_position ? Shape{8, 2} : Shape{8, 8};
    const Tensor y = adaptive_fusion(tape.constant(a), tape.constant(b), tape.constant(random_tensor(ws, rng, -2, 2)), mode).value();
    for (std::size_t i = 0; i < y.size(); ++i) {
      EXPECT_GE(y[i], std::min(a[i], b[i]) - 1e-12);
      EXPECT_LE(y[i], std::max(a[i], b[i]) + 1e-12);
    }
    if (mode == FusionMode::per_position) {
      // One alpha per position: (y - b) / (a - b) is shared by the 4 channels.
      for (std::size_t p = 0; p < 15; ++p) {
        const double alpha = (y[p * 4] - b[p * 4]) / (a[p * 4] - b[p * 4]);
        for (std::size_t c = 1; c < 4; ++c) {
          EXPECT_NEAR((y[p * 4 + c] - b[p * 4 + c]) / (a[p * 4 + c] - b[p * 4 + c]), alpha, 1e-9);
        }
      }
    }
  }
}

TEST(AdaptiveFusion, GradientMatchesNumeric) {
  std::mt19937_64 rng(8);
  Param a("a", random_tensor({2, 3, 4}, rng)), b("b", random_tensor({2, 3, 4}, rng)),
      w("w", random_tensor({8, 2}, rng));
  const Tensor weights = random_tensor({2, 3, 4}, rng);
  std::vector<Param*> params{&a, &b, &w};
  const GradCheckResult r = grad_check(
      [&](Tape& t) { return ad::sum(ad::mul(adaptive_fusion(t.param(a), t.param(b), t.param(w)), t.constant(weights))); },
      params);
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(MagicBlock, IdentityStreamsGiveIdentity) {
  PoseMagicModel model(tiny(1), 9);
  std::mt19937_64 rng(10);
  MagicBlockParams& b = model.blocks[0];
  b.fusion_w.value = random_tensor(b.fusion_w.value.shape(), rng);
  for (GcnStreamParams* g : {&b.spatial_gcn, &b.temporal_gcn})
    for (Param* q : {&g->ln1_gamma, &g->ln1_beta, &g->ln2_gamma, &g->ln2_beta, &g->mlp_b1, &g->mlp_b2})
      q->value.fill(0.0);
  const Tensor x = random_tensor({2, 4, 5, 8}, rng);
  Tape tape(false);
  const Tensor y = model.magic_block(tape.constant(x), 0, Mode::eval).value();
  EXPECT_LT(max_abs_diff(y, x), 1e-14);
}

TEST(MagicBlock, CausalBlockIgnoresFuture) {
  PoseMagicModel model(tiny(1, Direction::causal), 11);
  randomize_residuals(model, 12);
  std::mt19937_64 rng(13);
  const std::size_t len = 8;
  const Tensor x = random_tensor({1, len, 5, 8}, rng);
  Tape tape(false);
  const Tensor y = model.magic_block(tape.constant(x), 0, Mode::eval).value();
  for (std::size_t tp = 1; tp < len; ++tp) {
    Tensor xp = x;
    for (std::size_t i = 0; i < 40; ++i) xp[tp * 40 + i] += 1.5;
    const Tensor yp = model.magic_block(tape.constant(xp), 0, Mode::eval).value();
    for (std::size_t i = 0; i < tp * 40; ++i) ASSERT_LE(std::abs(yp[i] - y[i]), 1e-12) << "t' " << tp;
  }
}

TEST(MagicBlock, CausalConfigKeepsSpatialMambaBidirectional) {
  PoseMagicModel model(tiny(2, Direction::causal), 14);
  for (const MagicBlockParams& b : model.blocks) {
    EXPECT_TRUE(b.spatial_mamba.bidirectional());
    EXPECT_FALSE(b.temporal_mamba.bidirectional());
  }
  PoseMagicModel bi(tiny(1), 14);
  EXPECT_TRUE(bi.blocks[0].temporal_mamba.bidirectional());
}

TEST(MagicBlock, OneBlockGradientMatchesNumeric) {
  PoseMagicModel model(tiny(1), 15);
  randomize_residuals(model, 16);
  std::mt19937_64 rng(17);
  // Steps of order one, so the state matrices have gradients well above rounding noise.
  for (MambaStreamParams* m : {&model.blocks[0].spatial_mamba, &model.blocks[0].temporal_mamba})
    for (SsmParams* s : {&m->ssm_f, m->ssm_b ? &*m->ssm_b : nullptr})
      if (s) s->delta_bias.value = random_tensor(s->delta_bias.value.shape(), rng, -1.0, 0.5);
  Param x("x", random_tensor({1, 4, 5, 8}, rng));
  const Tensor weights = random_tensor({1, 4, 5, 8}, rng);
  std::vector<Param*> params{&x};
  model.blocks[0].visit([&](Param& p) { params.push_back(&p); });
  const std::vector<BatchNormState> saved{model.blocks[0].spatial_gcn.gcn.bn, model.blocks[0].temporal_gcn.gcn.bn};
  const GradCheckResult r = grad_check(
      [&](Tape& t) {
        model.blocks[0].spatial_gcn.gcn.bn = saved[0];
        model.blocks[0].temporal_gcn.gcn.bn = saved[1];
        return ad::sum(ad::mul(model.magic_block(t.param(x), 0, Mode::train), t.constant(weights)));
      },
      params);
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst_param << "[" << r.worst_index << "]";
}

TEST(Forward, ShapesForAnyLength) {
  PoseMagicModel model(tiny(1), 18);
  std::mt19937_64 rng(19);
  for (std::size_t t : {1, 8, 81, 486}) {
    const Tensor y = model.predict(random_input(t, 5, rng));
    EXPECT_EQ(y.shape(), (Shape{t, 5, 3}));
    EXPECT_TRUE(y.all_finite());
  }
  Tape tape(false);
  EXPECT_EQ(model.forward(tape, Tensor({2, 3, 5, 3}), Mode::eval).shape(), (Shape{2, 3, 5, 3}));
}

TEST(Forward, DeterministicInEvalMode) {
  PoseMagicModel model(tiny(2), 20);
  randomize_residuals(model, 21);
  std::mt19937_64 rng(22);
  const Tensor x = random_input(7, 5, rng);
  EXPECT_EQ(model.predict(x), model.predict(x));
  PoseMagicModel twin(tiny(2), 20);
  randomize_residuals(twin, 21);
  EXPECT_EQ(twin.predict(x), model.predict(x));
}

TEST(Forward, CausalModelIsCausalEndToEnd) {
  PoseMagicModel model(tiny(2, Direction::causal), 23);
  randomize_residuals(model, 24);
  std::mt19937_64 rng(25);
  const std::size_t len = 7;
  const Tensor x = random_input(len, 5, rng);
  const Tensor y = model.predict(x);
  for (std::size_t tp = 1; tp < len; ++tp) {
    Tensor xp = x;
    for (std::size_t i = 0; i < 15; ++i) xp[tp * 15 + i] += 0.7;
    const Tensor yp = model.predict(xp);
    for (std::size_t i = 0; i < tp * 15; ++i) ASSERT_LE(std::abs(yp[i] - y[i]), 1e-12);
    double changed = 0;
    for (std::size_t i = tp * 15; i < (tp + 1) * 15; ++i) changed += std::abs(yp[i] - y[i]);
    EXPECT_GT(changed, 0.0);
  }
  // Prefix outputs agree across lengths.
  const Tensor prefix = model.predict(ops::slice(x, 0, 0, 4));
  for (std::size_t i = 0; i < prefix.size(); ++i) EXPECT_LE(std::abs(prefix[i] - y[i]), 1e-12);
}

TEST(Forward, CausalFutureInputGradientsAreExactlyZero) {
  PoseMagicModel model(tiny(2, Direction::causal), 26);
  randomize_residuals(model, 27);
  std::mt19937_64 rng(28);
  const std::size_t len = 6;
  const Tensor x = random_input(len, 5, rng);
  for (std::size_t t = 0; t < len; ++t) {
    Tape tape;
    const Var in = tape.leaf(x.reshaped({1, len, 5, 3}));
    // Route the input through a leaf so its gradient can be read back.
    const Var b = tape.param(model.input_b);
    Var h = ad::add(ad::linear(in, tape.param(model.input_w), &b), tape.param(model.pos));
    for (std::size_t i = 0; i < model.blocks.size(); ++i) h = model.magic_block(h, i, Mode::eval);
    tape.backward(ad::sum(ad::slice(h, 1, t, 1)));
    const Tensor g = tape.grad(in);
    for (std::size_t i = (t + 1) * 15; i < len * 15; ++i) ASSERT_EQ(g[i], 0.0) << "t " << t;
  }
}

TEST(Forward, BidirectionalModelSeesTheFuture) {
  PoseMagicModel model(tiny(1), 29);
  randomize_residuals(model, 30);
  std::mt19937_64 rng(31);
  const Tensor x = random_input(5, 5, rng);
  Tensor xp = x;
  xp[4 * 15] += 0.5;
  EXPECT_GT(std::abs(model.predict(xp)[0] - model.predict(x)[0]), 0.0);
}

TEST(Forward, FullTinyModelGradientCheck) {
  const GradCheckResult r = model_grad_check(gradcheck_config(), 6, 0);
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst_param << "[" << r.worst_index << "] analytic " << r.analytic
                                   << " numeric " << r.numeric;
  EXPECT_EQ(r.entries, count_params(gradcheck_config()));
}

TEST(CountParams, NoBlocksClosedForm) {
  const ModelConfig c = tiny(0);
  const std::size_t d = 8, dp = 16, j = 5;
  EXPECT_EQ(count_params(c), 3 * d + d + j * d + d * dp + dp + dp * 3 + 3);
}

TEST(CountParams, MatchesConstructedModelAndNames) {
  PoseMagicModel model(tiny(2), 32);
  std::size_t total = 0;
  std::set<std::string> names;
  model.visit_params([&](Param& p) {
    total += p.size();
    EXPECT_TRUE(names.insert(p.name).second) << "duplicate " << p.name;
    EXPECT_EQ(p.grad.shape(), p.value.shape());
  });
  EXPECT_EQ(total, count_params(tiny(2)));
  EXPECT_EQ(model.param_count(), total);
}

TEST(CountParams, ReferenceConfiguration) {
  const ModelConfig bi;
  ModelConfig causal;
  causal.direction = Direction::causal;
  const double count = static_cast<double>(count_params(bi));
  EXPECT_GE(count, 0.8 * 14.42e6);
  EXPECT_LE(count, 1.2 * 14.42e6);
  EXPECT_LT(count_params(causal), count_params(bi));
}

TEST(Model, ZeroGradClearsEveryParam) {
  PoseMagicModel model(tiny(1), 33);
  std::mt19937_64 rng(34);
  Tape tape;
  tape.backward(ad::sum(model.forward(tape, random_input(3, 5, rng), Mode::train)));
  double before = 0;
  for (Param* p : model.params())
    for (double v : p->grad.data()) before += std::abs(v);
  EXPECT_GT(before, 0.0);
  model.zero_grad();
  for (Param* p : model.params())
    for (double v : p->grad.data()) EXPECT_EQ(v, 0.0);
}

}  // namespace
}  // namespace posemagic
