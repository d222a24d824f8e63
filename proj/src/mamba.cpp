#include "posemagic/mamba.hpp"

#include <cmath>

#include "posemagic/norm.hpp"

namespace posemagic {

namespace {

Param square(const std::string& name, std::size_t d, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor w({d, d});
  for (double& v : w.data()) v = dist(rng);
  return Param(name, std::move(w));
}

}  // namespace

MambaStreamParams MambaStreamParams::init(const std::string& prefix, std::size_t d, std::size_t state_size,
                                          bool bidirectional, std::mt19937_64& rng) {
  MambaStreamParams p;
  p.norm_gamma = Param(prefix + ".norm.gamma", Tensor({d}, 1.0));
  p.norm_beta = Param(prefix + ".norm.beta", Tensor({d}, 0.0));
  p.w_p1 = square(prefix + ".w_p1", d, rng);
  p.w_p2 = square(prefix + ".w_p2", d, rng);
  p.w_f = square(prefix + ".w_f", d, rng);
  if (bidirectional) p.w_b = square(prefix + ".w_b", d, rng);
  p.w_p3 = Param(prefix + ".w_p3", Tensor({d, d}, 0.0));
  p.ssm_f = SsmParams::init(prefix + ".ssm_f", d, state_size, rng);
  if (bidirectional) p.ssm_b = SsmParams::init(prefix + ".ssm_b", d, state_size, rng);
  return p;
}

void MambaStreamParams::visit(const std::function<void(Param&)>& fn) {
  fn(norm_gamma);
  fn(norm_beta);
  fn(w_p1);
  fn(w_p2);
  fn(w_f);
  if (w_b) fn(*w_b);
  fn(w_p3);
  ssm_f.visit(fn);
  if (ssm_b) ssm_b->visit(fn);
}

MambaPaths mamba_paths(const Var& x, MambaStreamParams& params, ScanMethod method) {
  if (x.value().rank() != 3 || x.dim(2) != params.width()) {
    throw ShapeError("mamba: input " + shape_str(x.shape()) + " for width " + std::to_string(params.width()));
  }
  Tape& tape = *x.tape();
  const Var gamma = tape.param(params.norm_gamma);
  const Var beta = tape.param(params.norm_beta);
  const Var normed = layer_norm(x, &gamma, &beta);
  const Var h = ad::matmul(normed, tape.param(params.w_p1));

  MambaPaths paths;
  paths.forward = ssm_forward(ad::gelu(ad::matmul(h, tape.param(params.w_f))), params.ssm_f, method);
  if (params.bidirectional()) {
    const Var rev = ad::gelu(ad::matmul(ad::flip(h, 1), tape.param(*params.w_b)));
    paths.backward = ad::flip(ssm_forward(rev, *params.ssm_b, method), 1);
  }
  paths.independent = ad::gelu(ad::matmul(normed, tape.param(params.w_p2)));
  return paths;
}

Var mamba_stream(const Var& x, MambaStreamParams& params, ScanMethod method) {
  const MambaPaths paths = mamba_paths(x, params, method);
  Var agg = ad::mul(paths.forward, paths.independent);
  if (paths.backward.valid()) agg = ad::add(agg, ad::mul(paths.backward, paths.independent));
  return ad::add(x, ad::matmul(agg, x.tape()->param(params.w_p3)));
}

}  // namespace posemagic
