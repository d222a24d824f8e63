#pragma once

#include <istream>
#include <optional>
#include <string>
#include <vector>

#include "posemagic/model.hpp"
#include "posemagic/pose.hpp"
#include "posemagic/training.hpp"

namespace posemagic {

/// JSON-lines pose files: one record {"id", "fps", "kind": "2d"|"3d", "frames": [[[a, b, c] x J] x T]}
/// per line. Blank lines are skipped. 2D confidence is clamped to [0, 1].
/// Errors carry "<source>:<line>" and the record id when known.
std::vector<PoseSequence> read_poses(std::istream& in, PoseKind kind, std::size_t joints,
                                     const std::string& source = "<stream>");
std::vector<PoseSequence> load_poses(const std::string& path, PoseKind kind, const Skeleton& skeleton);
std::string pose_record(const PoseSequence& seq);
void save_poses(const std::string& path, const std::vector<PoseSequence>& sequences);

/// Input and target files of equal ids and shapes, paired in file order.
std::vector<PosePair> pair_poses(std::vector<PoseSequence> inputs, std::vector<PoseSequence> targets);

/// One frame on a stream line: [[x, y, c] x J] or {"joints": [[x, y, c] x J]}. Returns [J, 3].
Tensor parse_frame(const std::string& line, std::size_t joints);
std::string frame_record(std::size_t t, const Tensor& joints);

/// Model config document; every ModelConfig field is optional and the skeleton
/// is embedded as an object. Unknown keys are rejected.
std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);
/// Field-by-field differences, e.g. "d: 32 vs 16". Empty when equal.
std::vector<std::string> config_diff(const ModelConfig& a, const ModelConfig& b);

/// A run file: {"model": {...}, "train": {...}}. A document without either key
/// is read as a bare model config.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);

/// Binary checkpoint: "PMCK", u64 little-endian header length, a JSON header
/// holding the config and a manifest {name, shape, offset} of every parameter
/// and buffer, then little-endian f64 data. Writes go to a temp file that is
/// renamed into place.
void save_checkpoint(PoseMagicModel& model, const std::string& path);
PoseMagicModel load_checkpoint(const std::string& path);
/// Also requires the stored config to equal `expected`; the error lists the differing fields.
PoseMagicModel load_checkpoint(const std::string& path, const ModelConfig& expected);

std::string read_file(const std::string& path);
/// Writes via a temp file and rename.
void write_file_atomic(const std::string& path, const std::string& contents);

}  // namespace posemagic
