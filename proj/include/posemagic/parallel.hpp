#pragma once

#include <cstddef>
#include <functional>

namespace posemagic {

/// Worker cap: POSE_MAGIC_THREADS when set, else the hardware concurrency.
std::size_t worker_count();

/// Splits [0, n) into contiguous chunks run on up to `workers` threads.
/// Runs inline when one worker suffices.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body,
                  std::size_t workers = worker_count());

}  // namespace posemagic
