#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <random>
#include <string>

#include "posemagic/ssm.hpp"

namespace posemagic {

/// Weights of one Mamba stream. The backward path (w_b, ssm_b) exists only in
/// the bidirectional variant.
struct MambaStreamParams {
  Param norm_gamma;  // [d]
  Param norm_beta;   // [d]
  Param w_p1;        // [d, d]
  Param w_p2;        // [d, d]
  Param w_f;         // [d, d]
  std::optional<Param> w_b;
  Param w_p3;  // [d, d]
  SsmParams ssm_f;
  std::optional<SsmParams> ssm_b;

  std::size_t width() const { return w_p1.value.dim(0); }
  bool bidirectional() const { return w_b.has_value(); }

  static MambaStreamParams init(const std::string& prefix, std::size_t d, std::size_t state_size,
                                bool bidirectional, std::mt19937_64& rng);
  void visit(const std::function<void(Param&)>& fn);
};

/// Intermediate paths of a Mamba stream, all [B, L, d]. `backward` is invalid
/// for the unidirectional variant.
struct MambaPaths {
  Var forward;
  Var backward;
  Var independent;
};

MambaPaths mamba_paths(const Var& x, MambaStreamParams& params, ScanMethod method = ScanMethod::sequential);

/// X + (X_f * X_i [+ X_b * X_i]) W_p3 over x [B, L, d]; the scan runs along L.
Var mamba_stream(const Var& x, MambaStreamParams& params, ScanMethod method = ScanMethod::sequential);

}  // namespace posemagic
