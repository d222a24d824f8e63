#include "posemagic/dataio.hpp"

#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace posemagic {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'P', 'M', 'C', 'K'};
constexpr int kCheckpointVersion = 1;

const char* kind_name(PoseKind k) { return k == PoseKind::pose2d ? "2d" : "3d"; }

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
  return v;
}

void put_u64(std::string& out, std::uint64_t v) {
  v = to_le(v);
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

std::uint64_t get_u64(const char* p) {
  std::uint64_t v;
  std::memcpy(&v, p, 8);
  return to_le(v);
}

// Frames [[a, b, c] x J] x T into a [T, J, 3] tensor.
Tensor frames_from_json(const json& frames, std::size_t joints, const std::string& where) {
  if (!frames.is_array()) throw FormatError(where + ": frames must be an array");
  Tensor out({frames.size(), joints, 3});
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const json& f = frames[t];
    if (!f.is_array() || f.size() != joints) {
      throw FormatError(where + ": frame " + std::to_string(t) + " has " +
                        std::to_string(f.is_array() ? f.size() : 0) + " joints, expected " + std::to_string(joints));
    }
    for (std::size_t j = 0; j < joints; ++j) {
      const json& p = f[j];
      if (!p.is_array() || p.size() != 3) {
        throw FormatError(where + ": frame " + std::to_string(t) + " joint " + std::to_string(j) +
                          " must have 3 values");
      }
      for (std::size_t a = 0; a < 3; ++a) {
        if (!p[a].is_number()) throw FormatError(where + ": non-numeric value in frame " + std::to_string(t));
        const double v = p[a].get<double>();
        if (!std::isfinite(v)) throw FormatError(where + ": non-finite value in frame " + std::to_string(t));
        out[(t * joints + j) * 3 + a] = v;
      }
    }
  }
  return out;
}

json frames_to_json(const Tensor& frames) {
  json out = json::array();
  const std::size_t t_count = frames.dim(0), joints = frames.dim(1);
  for (std::size_t t = 0; t < t_count; ++t) {
    json f = json::array();
    for (std::size_t j = 0; j < joints; ++j) {
      const double* p = frames.ptr() + (t * joints + j) * 3;
      f.push_back({p[0], p[1], p[2]});
    }
    out.push_back(std::move(f));
  }
  return out;
}

std::size_t get_count(const json& j, const char* key) {
  const json& v = j.at(key);
  if (!v.is_number_unsigned()) throw ConfigError(std::string("config: ") + key + " must be a non-negative integer");
  return v.get<std::size_t>();
}

double get_real(const json& j, const char* key) {
  const json& v = j.at(key);
  if (!v.is_number()) throw ConfigError(std::string("config: ") + key + " must be a number");
  return v.get<double>();
}

template <class E>
E get_enum(const json& j, const char* key, std::initializer_list<E> options) {
  const json& v = j.at(key);
  if (v.is_string()) {
    for (E e : options) {
      if (to_string(e) == v.get<std::string>()) return e;
    }
  }
  std::string names;
  for (E e : options) names += (names.empty() ? "" : ", ") + to_string(e);
  throw ConfigError(std::string("config: ") + key + " must be one of " + names);
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* what) {
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError(std::string(what) + ": unknown key '" + key + "'");
    }
  }
}

json model_config_json(const ModelConfig& c) {
  return json{{"N", c.N},
              {"d", c.d},
              {"d_prime", c.d_prime},
              {"k", c.k},
              {"J", c.J},
              {"n", c.n},
              {"direction", to_string(c.direction)},
              {"T_train", c.T_train},
              {"lambda_v", c.lambda_v},
              {"mlp_ratio", c.mlp_ratio},
              {"similarity", to_string(c.similarity)},
              {"fusion", to_string(c.fusion)},
              {"scan", to_string(c.scan)},
              {"output_scale", c.output_scale},
              {"skeleton", json::parse(skeleton_to_json(c.skeleton))}};
}

ModelConfig model_config_from(const json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  reject_unknown(j,
                 {"N", "d", "d_prime", "k", "J", "n", "direction", "T_train", "lambda_v", "mlp_ratio", "similarity",
                  "fusion", "scan", "output_scale", "skeleton"},
                 "config");
  ModelConfig c;
  if (j.contains("skeleton")) {
    c.skeleton = skeleton_from_json(j.at("skeleton").dump());
    c.J = c.skeleton.joint_count;
  }
  for (auto [key, field] : {std::pair{"N", &c.N}, std::pair{"d", &c.d}, std::pair{"d_prime", &c.d_prime},
                            std::pair{"k", &c.k}, std::pair{"J", &c.J}, std::pair{"n", &c.n},
                            std::pair{"T_train", &c.T_train}, std::pair{"mlp_ratio", &c.mlp_ratio}}) {
    if (j.contains(key)) *field = get_count(j, key);
  }
  if (j.contains("lambda_v")) c.lambda_v = get_real(j, "lambda_v");
  if (j.contains("output_scale")) c.output_scale = get_real(j, "output_scale");
  if (j.contains("direction")) c.direction = get_enum(j, "direction", {Direction::bidirectional, Direction::causal});
  if (j.contains("similarity")) c.similarity = get_enum(j, "similarity", {Similarity::dot, Similarity::cosine});
  if (j.contains("fusion")) c.fusion = get_enum(j, "fusion", {FusionMode::per_position, FusionMode::per_channel});
  if (j.contains("scan")) c.scan = get_enum(j, "scan", {ScanMethod::sequential, ScanMethod::parallel});
  c.validate();
  return c;
}

TrainConfig train_config_from(const json& j) {
  if (!j.is_object()) throw ConfigError("train config: expected a JSON object");
  reject_unknown(j,
                 {"epochs", "batch_size", "lr", "beta1", "beta2", "eps", "weight_decay", "lr_decay", "seed",
                  "flip_augment", "max_steps", "target_mpjpe"},
                 "train config");
  TrainConfig t;
  if (j.contains("epochs")) t.epochs = get_count(j, "epochs");
  if (j.contains("batch_size")) t.batch_size = get_count(j, "batch_size");
  if (j.contains("max_steps")) t.max_steps = get_count(j, "max_steps");
  if (j.contains("seed")) t.seed = get_count(j, "seed");
  if (j.contains("lr")) t.optimizer.lr = get_real(j, "lr");
  if (j.contains("beta1")) t.optimizer.beta1 = get_real(j, "beta1");
  if (j.contains("beta2")) t.optimizer.beta2 = get_real(j, "beta2");
  if (j.contains("eps")) t.optimizer.eps = get_real(j, "eps");
  if (j.contains("weight_decay")) t.optimizer.weight_decay = get_real(j, "weight_decay");
  if (j.contains("lr_decay")) t.optimizer.lr_decay = get_real(j, "lr_decay");
  if (j.contains("target_mpjpe")) t.target_mpjpe = get_real(j, "target_mpjpe");
  if (j.contains("flip_augment")) {
    if (!j.at("flip_augment").is_boolean()) throw ConfigError("train config: flip_augment must be a boolean");
    t.flip_augment = j.at("flip_augment").get<bool>();
  }
  if (t.batch_size == 0) throw ConfigError("train config: batch_size must be positive");
  return t;
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(what + ": " + e.what());
  }
}

struct Entry {
  std::string name;
  Tensor* tensor;
};

std::vector<Entry> checkpoint_entries(PoseMagicModel& model) {
  std::vector<Entry> out;
  model.visit_params([&](Param& p) { out.push_back({p.name, &p.value}); });
  model.visit_buffers([&](const std::string& name, Tensor& t) { out.push_back({name, &t}); });
  return out;
}

}  // namespace

std::vector<PoseSequence> read_poses(std::istream& in, PoseKind kind, std::size_t joints, const std::string& source) {
  std::vector<PoseSequence> out;
  std::set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError(where + ": malformed JSON: " + e.what());
    }
    if (!rec.is_object() || !rec.contains("frames")) throw FormatError(where + ": record needs a 'frames' array");
    PoseSequence seq;
    seq.kind = kind;
    seq.id = rec.contains("id") && rec["id"].is_string() ? rec["id"].get<std::string>() : "line" + std::to_string(line_no);
    const std::string named = where + ": record '" + seq.id + "'";
    if (rec.contains("kind") && rec["kind"] != kind_name(kind)) {
      throw FormatError(named + " has kind " + rec["kind"].dump() + ", expected \"" + kind_name(kind) + "\"");
    }
    if (rec.contains("fps")) {
      if (!rec["fps"].is_number() || !(rec["fps"].get<double>() > 0.0) || !std::isfinite(rec["fps"].get<double>())) {
        throw FormatError(named + ": fps must be a positive number");
      }
      seq.fps = rec["fps"].get<double>();
    }
    seq.frames = frames_from_json(rec["frames"], joints, named);
    if (seq.frames.dim(0) == 0) throw FormatError(named + " has no frames");
    if (kind == PoseKind::pose2d) {
      for (std::size_t i = 2; i < seq.frames.size(); i += 3) seq.frames[i] = std::clamp(seq.frames[i], 0.0, 1.0);
    }
    if (!ids.insert(seq.id).second) throw FormatError(named + ": duplicate id");
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<PoseSequence> load_poses(const std::string& path, PoseKind kind, const Skeleton& skeleton) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  return read_poses(in, kind, skeleton.joint_count, path);
}

std::string pose_record(const PoseSequence& seq) {
  if (seq.frames.rank() != 3 || seq.frames.dim(2) != 3) {
    throw ShapeError("pose_record: expected [T, J, 3], got " + shape_str(seq.frames.shape()));
  }
  if (!seq.frames.all_finite()) throw std::invalid_argument("pose_record: sequence '" + seq.id + "' is not finite");
  json rec{{"id", seq.id}, {"fps", seq.fps}, {"kind", kind_name(seq.kind)}, {"frames", frames_to_json(seq.frames)}};
  return rec.dump();
}

void save_poses(const std::string& path, const std::vector<PoseSequence>& sequences) {
  std::string out;
  for (const PoseSequence& s : sequences) out += pose_record(s) + "\n";
  write_file_atomic(path, out);
}

std::vector<PosePair> pair_poses(std::vector<PoseSequence> inputs, std::vector<PoseSequence> targets) {
  if (inputs.size() != targets.size()) {
    throw FormatError("pair_poses: " + std::to_string(inputs.size()) + " inputs but " +
                      std::to_string(targets.size()) + " targets");
  }
  std::vector<PosePair> out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].id != targets[i].id) {
      throw FormatError("pair_poses: input '" + inputs[i].id + "' is paired with target '" + targets[i].id + "'");
    }
    if (inputs[i].frames.shape() != targets[i].frames.shape()) {
      throw FormatError("pair_poses: '" + inputs[i].id + "' has input " + shape_str(inputs[i].frames.shape()) +
                        " and target " + shape_str(targets[i].frames.shape()));
    }
    out.push_back({std::move(inputs[i]), std::move(targets[i])});
  }
  return out;
}

Tensor parse_frame(const std::string& line, std::size_t joints) {
  json j = parse_json(line, "frame");
  if (j.is_object()) {
    if (!j.contains("joints")) throw FormatError("frame: object needs a 'joints' array");
    j = j["joints"];
  }
  return frames_from_json(json::array({j}), joints, "frame").reshaped({joints, 3});
}

std::string frame_record(std::size_t t, const Tensor& joints) {
  const Tensor f = joints.reshaped({1, joints.size() / 3, 3});
  return json{{"t", t}, {"joints", frames_to_json(f)[0]}}.dump();
}

std::string model_config_to_json(const ModelConfig& config) { return model_config_json(config).dump(2); }

ModelConfig model_config_from_json(const std::string& text) {
  try {
    return model_config_from(parse_json(text, "config"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

std::vector<std::string> config_diff(const ModelConfig& a, const ModelConfig& b) {
  const json ja = model_config_json(a), jb = model_config_json(b);
  std::vector<std::string> out;
  for (const auto& [key, value] : ja.items()) {
    if (value != jb.at(key)) {
      out.push_back(key == "skeleton" ? "skeleton: definitions differ" : key + ": " + value.dump() + " vs " + jb.at(key).dump());
    }
  }
  return out;
}

RunConfig run_config_from_json(const std::string& text) {
  const json j = parse_json(text, "config");
  RunConfig rc;
  try {
    if (j.is_object() && (j.contains("model") || j.contains("train"))) {
      reject_unknown(j, {"model", "train"}, "config");
      if (j.contains("model")) rc.model = model_config_from(j["model"]);
      if (j.contains("train")) rc.train = train_config_from(j["train"]);
    } else {
      rc.model = model_config_from(j);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return rc;
}

RunConfig load_run_config(const std::string& path) { return run_config_from_json(read_file(path)); }

void save_checkpoint(PoseMagicModel& model, const std::string& path) {
  const std::vector<Entry> entries = checkpoint_entries(model);
  json manifest = json::array();
  std::set<std::string> names;
  std::size_t offset = 0;
  for (const Entry& e : entries) {
    if (!names.insert(e.name).second) throw std::logic_error("save_checkpoint: duplicate tensor name " + e.name);
    manifest.push_back({{"name", e.name}, {"shape", e.tensor->shape()}, {"offset", offset}});
    offset += e.tensor->size();
  }
  const json header{{"version", kCheckpointVersion},
                    {"config", model_config_json(model.config())},
                    {"manifest", manifest},
                    {"values", offset}};
  const std::string text = header.dump();
  std::string out(kMagic, 4);
  put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + 8 * offset);
  for (const Entry& e : entries) {
    for (double v : e.tensor->data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  write_file_atomic(path, out);
}

PoseMagicModel load_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  const std::string where = "checkpoint " + path;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError(where + ": not a checkpoint");
  const std::uint64_t header_len = get_u64(bytes.data() + 4);
  if (header_len > bytes.size() - 12) throw FormatError(where + ": header length exceeds file size");
  const json header = parse_json(bytes.substr(12, header_len), where);
  ModelConfig config;
  std::map<std::string, std::pair<Shape, std::size_t>> manifest;
  std::size_t values = 0;
  try {
    if (header.at("version") != kCheckpointVersion) throw FormatError(where + ": unsupported version " + header.at("version").dump());
    config = model_config_from(header.at("config"));
    values = header.at("values").get<std::size_t>();
    for (const json& m : header.at("manifest")) {
      manifest[m.at("name").get<std::string>()] = {m.at("shape").get<Shape>(), m.at("offset").get<std::size_t>()};
    }
  } catch (const json::exception& e) {
    throw FormatError(where + ": bad header: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(where + ": " + e.what());
  }
  const std::size_t data_bytes = bytes.size() - 12 - header_len;
  if (data_bytes != 8 * values) {
    throw FormatError(where + ": data holds " + std::to_string(data_bytes) + " bytes, manifest expects " +
                      std::to_string(8 * values));
  }

  PoseMagicModel model(config, 0);
  std::vector<std::string> mismatches;
  const std::vector<Entry> entries = checkpoint_entries(model);
  for (const Entry& e : entries) {
    auto it = manifest.find(e.name);
    if (it == manifest.end()) {
      mismatches.push_back(e.name + ": missing from manifest");
    } else if (it->second.first != e.tensor->shape()) {
      mismatches.push_back(e.name + ": manifest " + shape_str(it->second.first) + " vs config " +
                           shape_str(e.tensor->shape()));
    } else if (it->second.second + e.tensor->size() > values) {
      mismatches.push_back(e.name + ": offset past end of data");
    }
  }
  if (manifest.size() != entries.size()) {
    for (const auto& [name, _] : manifest) {
      if (std::none_of(entries.begin(), entries.end(), [&](const Entry& e) { return e.name == name; })) {
        mismatches.push_back(name + ": not part of the configured model");
      }
    }
  }
  if (!mismatches.empty()) {
    std::string msg = where + ": manifest does not match its config:";
    for (const std::string& m : mismatches) msg += "\n  " + m;
    throw FormatError(msg);
  }
  const char* data = bytes.data() + 12 + header_len;
  for (const Entry& e : entries) {
    const std::size_t off = manifest[e.name].second;
    for (std::size_t i = 0; i < e.tensor->size(); ++i) {
      const double v = std::bit_cast<double>(get_u64(data + 8 * (off + i)));
      if (!std::isfinite(v)) throw FormatError(where + ": non-finite value in " + e.name);
      (*e.tensor)[i] = v;
    }
  }
  return model;
}

PoseMagicModel load_checkpoint(const std::string& path, const ModelConfig& expected) {
  PoseMagicModel model = load_checkpoint(path);
  const std::vector<std::string> diff = config_diff(model.config(), expected);
  if (!diff.empty()) {
    std::string msg = "checkpoint " + path + ": config differs (stored vs expected):";
    for (const std::string& d : diff) msg += "\n  " + d;
    throw FormatError(msg);
  }
  return model;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) {
      std::filesystem::remove(tmp);
      throw std::runtime_error("write failed for " + tmp);
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw std::runtime_error("cannot rename " + tmp + " to " + path + ": " + ec.message());
  }
}

}  // namespace posemagic
