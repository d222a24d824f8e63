#pragma once

#include <cstddef>

#include "posemagic/autodiff.hpp"

namespace posemagic {

enum class Mode { train, eval };

inline constexpr double kNormEps = 1e-5;

/// Running statistics of a batch-norm layer. Updated only in train mode.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(Shape{channels}, 0.0), running_var(Shape{channels}, 1.0) {}
};

/// Layer norm over the last axis. gamma/beta are optional [C] affine parameters.
Var layer_norm(const Var& x, const Var* gamma, const Var* beta, double eps = kNormEps);

/// Batch norm over every axis except the last (channel) axis. In train mode the
/// batch statistics normalize the input and are folded into `state`; in eval
/// mode the running statistics are used. A single position in train mode is
/// allowed and degenerates to zero output before the affine step.
Var batch_norm(const Var& x, const Var* gamma, const Var* beta, BatchNormState& state, Mode mode,
               double eps = kNormEps);

}  // namespace posemagic
