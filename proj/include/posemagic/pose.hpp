#pragma once

#include <string>

#include "posemagic/tensor.hpp"

namespace posemagic {

enum class PoseKind { pose2d, pose3d };

/// T x J x 3 frames: (x, y, confidence) for 2D, (x, y, z) in millimeters for 3D.
struct PoseSequence {
  std::string id;
  PoseKind kind = PoseKind::pose3d;
  double fps = 50.0;
  Tensor frames;

  std::size_t length() const { return frames.dim(0); }
  std::size_t joints() const { return frames.dim(1); }
};

/// A 2D input and its 3D target of equal shape.
struct PosePair {
  PoseSequence input;
  PoseSequence target;
};

}  // namespace posemagic
