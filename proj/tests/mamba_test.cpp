#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "posemagic/mamba.hpp"
#include "test_util.hpp"

namespace posemagic {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

// Stream params with a nonzero output projection so the gated branch is visible.
MambaStreamParams make_params(std::size_t d, std::size_t n, bool bidirectional, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  MambaStreamParams p = MambaStreamParams::init("m", d, n, bidirectional, rng);
  p.w_p3.value = random_tensor({d, d}, rng, -0.5, 0.5);
  p.norm_gamma.value = random_tensor({d}, rng, 0.5, 1.5);
  p.norm_beta.value = random_tensor({d}, rng, -0.2, 0.2);
  return p;
}

Tensor run(const Tensor& x, MambaStreamParams& p, ScanMethod method = ScanMethod::sequential) {
  Tape tape(false);
  return mamba_stream(tape.constant(x), p, method).value();
}

TEST(MambaStream, ZeroOutputProjectionIsIdentity) {
  std::mt19937_64 rng(1);
  for (bool bidir : {true, false}) {
    MambaStreamParams p = MambaStreamParams::init("m", 6, 4, bidir, rng);
    const Tensor x = random_tensor({2, 7, 6}, rng);
    EXPECT_EQ(run(x, p), x);
  }
}

TEST(MambaStream, ShapeIsPreserved) {
  std::mt19937_64 rng(2);
  for (bool bidir : {true, false}) {
    MambaStreamParams p = make_params(5, 3, bidir, 3);
    for (std::size_t len : {1, 2, 9}) {
      const Tensor y = run(random_tensor({3, len, 5}, rng), p);
      EXPECT_EQ(y.shape(), (Shape{3, len, 5}));
      EXPECT_TRUE(y.all_finite());
    }
  }
}

TEST(MambaStream, WidthMismatchThrows) {
  MambaStreamParams p = make_params(5, 3, true, 4);
  Tape tape(false);
  EXPECT_THROW(mamba_stream(tape.constant(Tensor({1, 4, 6})), p), ShapeError);
  EXPECT_THROW(mamba_stream(tape.constant(Tensor({4, 5})), p), ShapeError);
}

TEST(MambaStream, SingleStepPathsCoincideWithSharedWeights) {
  std::mt19937_64 rng(5);
  MambaStreamParams p = make_params(6, 4, true, 6);
  p.w_b->value = p.w_f.value;
  p.ssm_b->a_log.value = p.ssm_f.a_log.value;
  p.ssm_b->w_b.value = p.ssm_f.w_b.value;
  p.ssm_b->w_c.value = p.ssm_f.w_c.value;
  p.ssm_b->w_delta.value = p.ssm_f.w_delta.value;
  p.ssm_b->delta_bias.value = p.ssm_f.delta_bias.value;
  Tape tape(false);
  const MambaPaths paths = mamba_paths(tape.constant(random_tensor({2, 1, 6}, rng)), p);
  EXPECT_EQ(paths.forward.value(), paths.backward.value());
}

TEST(MambaStream, BackwardPathIsForwardPathOnReversedSequence) {
  std::mt19937_64 rng(7);
  MambaStreamParams p = make_params(4, 3, true, 8);
  p.w_b->value = p.w_f.value;
  p.ssm_b = p.ssm_f;
  const Tensor x = random_tensor({2, 9, 4}, rng);
  Tape tape(false);
  const MambaPaths on_x = mamba_paths(tape.constant(x), p);
  const MambaPaths on_rev = mamba_paths(tape.constant(ops::flip(x, 1)), p);
  EXPECT_LT(max_abs_diff(on_x.backward.value(), ops::flip(on_rev.forward.value(), 1)), 1e-12);
  EXPECT_LT(max_abs_diff(on_x.independent.value(), ops::flip(on_rev.independent.value(), 1)), 1e-12);
}

TEST(MambaStream, UnidirectionalHasNoBackwardPath) {
  MambaStreamParams p = make_params(4, 3, false, 9);
  EXPECT_FALSE(p.w_b.has_value());
  EXPECT_FALSE(p.ssm_b.has_value());
  Tape tape(false);
  EXPECT_FALSE(mamba_paths(tape.constant(Tensor({1, 3, 4})), p).backward.valid());
}

TEST(MambaStream, UnidirectionalEqualsBidirectionalWithSilencedBackwardPath) {
  std::mt19937_64 rng(10);
  MambaStreamParams bi = make_params(6, 4, true, 11);
  bi.w_b->value.fill(0.0);  // gelu(0) = 0 drives ssm_b with zeros, so X_b = 0
  MambaStreamParams uni = bi;
  uni.w_b.reset();
  uni.ssm_b.reset();
  const Tensor x = random_tensor({2, 8, 6}, rng);
  EXPECT_LT(max_abs_diff(run(x, bi), run(x, uni)), 1e-12);
}

TEST(MambaStream, UnidirectionalIsCausalUnderPerturbation) {
  std::mt19937_64 rng(12);
  MambaStreamParams p = make_params(5, 4, false, 13);
  const std::size_t len = 10;
  const Tensor x = random_tensor({2, len, 5}, rng);
  const Tensor y = run(x, p);
  for (std::size_t tp = 0; tp < len; ++tp) {
    Tensor xp = x;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 5; ++c) xp.at({b, tp, c}) += 2.5;
    const Tensor yp = run(xp, p);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t t = 0; t < tp; ++t)
        for (std::size_t c = 0; c < 5; ++c) ASSERT_LE(std::abs(yp.at({b, t, c}) - y.at({b, t, c})), 1e-12);
    EXPECT_GT(std::abs(yp.at({0, tp, 0}) - y.at({0, tp, 0})), 0.0);
  }
}

TEST(MambaStream, UnidirectionalFutureGradientsAreExactlyZero) {
  std::mt19937_64 rng(14);
  MambaStreamParams p = make_params(5, 4, false, 15);
  const std::size_t len = 8;
  const Tensor x = random_tensor({1, len, 5}, rng);
  for (std::size_t t = 0; t < len; ++t) {
    Tape tape;
    const Var in = tape.leaf(x);
    const Var out = mamba_stream(in, p);
    tape.backward(ad::sum(ad::slice(out, 1, t, 1)));
    const Tensor g = tape.grad(in);
    for (std::size_t tf = t + 1; tf < len; ++tf)
      for (std::size_t c = 0; c < 5; ++c) ASSERT_EQ(g.at({0, tf, c}), 0.0) << "t " << t << " t' " << tf;
    double past = 0;
    for (std::size_t c = 0; c < 5; ++c) past += std::abs(g.at({0, t, c}));
    EXPECT_GT(past, 0.0);
  }
}

TEST(MambaStream, BidirectionalSeesTheFuture) {
  std::mt19937_64 rng(16);
  MambaStreamParams p = make_params(5, 4, true, 17);
  const Tensor x = random_tensor({1, 6, 5}, rng);
  Tensor xp = x;
  xp.at({0, 5, 0}) += 1.0;
  EXPECT_GT(std::abs(run(xp, p).at({0, 0, 0}) - run(x, p).at({0, 0, 0})), 0.0);
}

TEST(MambaStream, ScanMethodsAgree) {
  std::mt19937_64 rng(18);
  MambaStreamParams p = make_params(6, 4, true, 19);
  const Tensor x = random_tensor({2, 11, 6}, rng);
  EXPECT_LT(max_abs_diff(run(x, p, ScanMethod::sequential), run(x, p, ScanMethod::parallel)), 1e-12);
}

class MambaGradient : public ::testing::TestWithParam<bool> {};

TEST_P(MambaGradient, MatchesNumericDerivatives) {
  std::mt19937_64 rng(20);
  MambaStreamParams p = make_params(4, 3, GetParam(), 21);
  // Steps of order one, so the state matrices have gradients well above rounding noise.
  for (SsmParams* s : {&p.ssm_f, p.ssm_b ? &*p.ssm_b : nullptr})
    if (s) s->delta_bias.value = random_tensor(s->delta_bias.value.shape(), rng, -1.0, 0.5);
  Param x("x", random_tensor({2, 5, 4}, rng));
  const Tensor weights = random_tensor({2, 5, 4}, rng);
  std::vector<Param*> params{&x};
  p.visit([&](Param& q) { params.push_back(&q); });
  const GradCheckResult r = grad_check(
      [&](Tape& t) { return ad::sum(ad::mul(mamba_stream(t.param(x), p), t.constant(weights))); }, params);
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst_param << "[" << r.worst_index << "] analytic " << r.analytic
                                   << " numeric " << r.numeric;
}

INSTANTIATE_TEST_SUITE_P(Directions, MambaGradient, ::testing::Values(true, false));

TEST(MambaStream, DeepStackStaysFinite) {
  std::mt19937_64 rng(22);
  const Tensor x = random_tensor({1, 16, 8}, rng, -100.0, 100.0);
  for (bool bidir : {true, false}) {
    Tensor h = x;
    for (std::uint64_t block = 0; block < 26; ++block) {
      MambaStreamParams p = make_params(8, 4, bidir, 100 + block);
      h = run(h, p);
    }
    EXPECT_TRUE(h.all_finite());
  }
}

}  // namespace
}  // namespace posemagic
