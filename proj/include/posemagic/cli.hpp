#pragma once

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <string>
#include <vector>

#include "posemagic/model.hpp"

namespace posemagic {

/// Entry point of the pose_magic tool. Exit codes: 0 ok, 1 runtime failure, 2 usage error.
int run_cli(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err);

/// Frame-by-frame causal inference over a sliding window of the last `window` frames.
class StreamingPredictor {
 public:
  /// Throws ConfigError for a bidirectional model or a zero window.
  StreamingPredictor(PoseMagicModel& model, std::size_t window);

  /// Appends one [J, 3] 2D frame and returns the [J, 3] estimate for it.
  Tensor push(const Tensor& frame);
  std::size_t frames_seen() const { return seen_; }

 private:
  PoseMagicModel& model_;
  std::size_t window_;
  std::deque<Tensor> frames_;
  std::size_t seen_ = 0;
};

struct ScanTiming {
  std::size_t length = 0;
  double ms = 0.0;
};

/// Best-of-`reps` wall time of scan_sequential on random inputs of each length,
/// each rep starting from an evicted cache.
std::vector<ScanTiming> time_scan(const std::vector<std::size_t>& lengths, std::size_t channels,
                                  std::size_t state_size, std::size_t reps, std::uint64_t seed);
/// Least-squares slope of log(ms) against log(length).
double scaling_exponent(const std::vector<ScanTiming>& timings);

/// The tiny configuration used by the gradient check: N=2, d=8, J=5, n=4.
ModelConfig gradcheck_config();
/// Gradient check of the full model under the training loss on one synthetic
/// sequence of `frames` frames.
GradCheckResult model_grad_check(const ModelConfig& config, std::size_t frames, std::uint64_t seed);

}  // namespace posemagic
