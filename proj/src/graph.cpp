#include "posemagic/graph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace posemagic {

namespace {

#include "default_skeleton.inc"

using nlohmann::json;

std::vector<JointPair> pairs_from(const json& j, const char* field) {
  std::vector<JointPair> out;
  if (!j.contains(field)) return out;
  for (const json& p : j.at(field)) {
    if (!p.is_array() || p.size() != 2) throw FormatError(std::string("skeleton: ") + field + " entries must be pairs");
    out.emplace_back(p[0].get<std::size_t>(), p[1].get<std::size_t>());
  }
  return out;
}

Param uniform_param(const std::string& name, Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return Param(name, std::move(t));
}

}  // namespace

void Skeleton::validate() const {
  if (joint_count == 0) throw ConfigError("skeleton: joint_count must be positive");
  if (root >= joint_count) throw ConfigError("skeleton: root " + std::to_string(root) + " out of range");
  for (const auto& [a, b] : edges) {
    if (a >= joint_count || b >= joint_count) {
      throw ConfigError("skeleton: edge [" + std::to_string(a) + ", " + std::to_string(b) + "] out of range for " +
                        std::to_string(joint_count) + " joints");
    }
    if (a == b) throw ConfigError("skeleton: self edge at joint " + std::to_string(a));
  }
  std::vector<int> seen(joint_count, 0);
  for (const auto& [l, r] : left_right_pairs) {
    if (l >= joint_count || r >= joint_count || l == r) {
      throw ConfigError("skeleton: invalid left/right pair [" + std::to_string(l) + ", " + std::to_string(r) + "]");
    }
    if (seen[l]++ || seen[r]++) throw ConfigError("skeleton: joint listed in more than one left/right pair");
  }
  if (!names.empty() && names.size() != joint_count) throw ConfigError("skeleton: names do not match joint_count");
  if (!rest_pose_mm.empty() && rest_pose_mm.size() != joint_count) {
    throw ConfigError("skeleton: rest_pose_mm does not match joint_count");
  }
}

std::vector<std::size_t> Skeleton::mirror_permutation() const {
  if (left_right_pairs.empty()) throw ConfigError("skeleton: no left/right pairs for mirroring");
  std::vector<std::size_t> perm(joint_count);
  std::iota(perm.begin(), perm.end(), 0);
  for (const auto& [l, r] : left_right_pairs) {
    perm[l] = r;
    perm[r] = l;
  }
  return perm;
}

double Skeleton::rest_pose_diagonal() const {
  if (rest_pose_mm.empty()) throw ConfigError("skeleton: no rest pose");
  double sq = 0.0;
  for (int axis = 0; axis < 3; ++axis) {
    double lo = rest_pose_mm[0][axis], hi = lo;
    for (const auto& p : rest_pose_mm) {
      lo = std::min(lo, p[axis]);
      hi = std::max(hi, p[axis]);
    }
    sq += (hi - lo) * (hi - lo);
  }
  return std::sqrt(sq);
}

Skeleton skeleton_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("skeleton: ") + e.what());
  }
  Skeleton s;
  try {
    s.joint_count = j.at("joint_count").get<std::size_t>();
    s.root = j.value("root", std::size_t{0});
    s.edges = pairs_from(j, "edges");
    s.left_right_pairs = pairs_from(j, "left_right_pairs");
    if (j.contains("names")) s.names = j.at("names").get<std::vector<std::string>>();
    if (j.contains("rest_pose_mm")) s.rest_pose_mm = j.at("rest_pose_mm").get<std::vector<std::array<double, 3>>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("skeleton: ") + e.what());
  }
  s.validate();
  return s;
}

std::string skeleton_to_json(const Skeleton& s) {
  json j;
  j["joint_count"] = s.joint_count;
  j["root"] = s.root;
  j["names"] = s.names;
  j["edges"] = json::array();
  for (const auto& [a, b] : s.edges) j["edges"].push_back({a, b});
  j["left_right_pairs"] = json::array();
  for (const auto& [a, b] : s.left_right_pairs) j["left_right_pairs"].push_back({a, b});
  if (!s.rest_pose_mm.empty()) j["rest_pose_mm"] = s.rest_pose_mm;
  return j.dump();
}

Skeleton load_skeleton(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("skeleton: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return skeleton_from_json(ss.str());
}

const Skeleton& default_skeleton() {
  static const Skeleton s = skeleton_from_json(kDefaultSkeletonJson);
  return s;
}

Skeleton toy_skeleton(std::size_t joints) {
  if (joints == 0) throw ConfigError("toy_skeleton: need at least one joint");
  Skeleton s;
  s.joint_count = joints;
  s.rest_pose_mm.push_back({0.0, 0.0, 0.0});
  s.names.push_back("root");
  for (std::size_t j = 1; j < joints; ++j) {
    const bool paired = j + 1 < joints || j % 2 == 0;
    if (!paired) {
      s.edges.push_back({0, j});
      s.rest_pose_mm.push_back({0.0, 150.0, 0.0});
      s.names.push_back("top");
      break;
    }
    const std::size_t depth = (j + 1) / 2;
    const bool left = j % 2 == 1;
    s.edges.push_back({depth == 1 ? 0 : j - 2, j});
    if (!left) s.left_right_pairs.push_back({j - 1, j});
    const double x = 120.0 * static_cast<double>(depth);
    s.rest_pose_mm.push_back({left ? -x : x, -40.0 * static_cast<double>(depth), 10.0 * static_cast<double>(depth)});
    s.names.push_back((left ? "l" : "r") + std::to_string(depth));
  }
  s.validate();
  return s;
}

Adjacency spatial_adjacency(const Skeleton& skeleton) {
  skeleton.validate();
  const std::size_t j = skeleton.joint_count;
  Adjacency adj{Tensor({j, j}), false};
  for (std::size_t i = 0; i < j; ++i) adj.matrix[i * j + i] = 1.0;
  for (const auto& [a, b] : skeleton.edges) {
    adj.matrix[a * j + b] = 1.0;
    adj.matrix[b * j + a] = 1.0;
  }
  return adj;
}

Tensor temporal_similarity(const Tensor& x, Similarity kind) {
  if (x.rank() != 2) throw ShapeError("temporal_similarity: expected [T, d], got " + shape_str(x.shape()));
  const std::size_t t = x.dim(0), d = x.dim(1);
  Tensor s({t, t});
  kernels::gemm_nt(x.ptr(), x.ptr(), s.ptr(), t, d, t);
  // Symmetrize exactly; the kernel may round the two triangles differently.
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < i; ++j) s[j * t + i] = s[i * t + j];
  }
  if (kind == Similarity::cosine) {
    std::vector<double> norm(t);
    for (std::size_t i = 0; i < t; ++i) norm[i] = std::sqrt(s[i * t + i]);
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < t; ++j) {
        const double den = norm[i] * norm[j];
        s[i * t + j] = den > 0.0 ? s[i * t + j] / den : 0.0;
      }
    }
  }
  return s;
}

Adjacency knn_adjacency(const Tensor& similarity, std::size_t k, bool causal) {
  if (similarity.rank() != 2 || similarity.dim(0) != similarity.dim(1)) {
    throw ShapeError("knn_adjacency: similarity must be square, got " + shape_str(similarity.shape()));
  }
  if (k == 0) throw ConfigError("knn_adjacency: k must be at least 1");
  const std::size_t t = similarity.dim(0);
  Adjacency adj{Tensor({t, t}), causal};
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < t; ++i) {
    candidates.clear();
    const std::size_t limit = causal ? i : t;
    for (std::size_t j = 0; j < limit; ++j) {
      if (j != i) candidates.push_back(j);
    }
    const std::size_t take = std::min(k, candidates.size());
    const double* row = similarity.ptr() + i * t;
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take), candidates.end(),
                      [row](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    for (std::size_t c = 0; c < take; ++c) adj.matrix[i * t + candidates[c]] = 1.0;
    adj.matrix[i * t + i] = 1.0;
  }
  return adj;
}

Tensor normalize_adjacency(const Adjacency& adj) {
  const Tensor& a = adj.matrix;
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw ShapeError("normalize_adjacency: matrix must be square, got " + shape_str(a.shape()));
  }
  const std::size_t l = a.dim(0);
  std::vector<double> inv_sqrt(l);
  for (std::size_t i = 0; i < l; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < l; ++j) deg += a[i * l + j];
    if (!(deg > 0.0)) throw std::logic_error("normalize_adjacency: row " + std::to_string(i) + " has zero degree");
    inv_sqrt[i] = 1.0 / std::sqrt(deg);
  }
  Tensor out({l, l});
  for (std::size_t i = 0; i < l; ++i) {
    for (std::size_t j = 0; j < l; ++j) out[i * l + j] = inv_sqrt[i] * a[i * l + j] * inv_sqrt[j];
  }
  return out;
}

double spectral_radius(const Tensor& m, std::size_t iterations, std::uint64_t seed) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) throw ShapeError("spectral_radius: matrix must be square");
  const std::size_t l = m.dim(0);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.5, 1.5);
  std::vector<double> v(l), w(l);
  for (double& x : v) x = dist(rng);
  double estimate = 0.0;
  for (std::size_t it = 0; it < iterations; ++it) {
    double norm_v = 0.0;
    for (double x : v) norm_v += x * x;
    norm_v = std::sqrt(norm_v);
    if (norm_v == 0.0) return 0.0;
    for (double& x : v) x /= norm_v;
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < l; ++i) {
      for (std::size_t j = 0; j < l; ++j) w[i] += m[i * l + j] * v[j];
    }
    double norm_w = 0.0;
    for (double x : w) norm_w += x * x;
    estimate = std::sqrt(norm_w);
    std::swap(v, w);
  }
  return estimate;
}

AdjacencyProvider AdjacencyProvider::fixed(Tensor normalized) {
  AdjacencyProvider p;
  p.fixed_ = std::move(normalized);
  return p;
}

AdjacencyProvider AdjacencyProvider::dynamic_knn(std::size_t k, bool causal, Similarity kind) {
  if (k == 0) throw ConfigError("adjacency: k must be at least 1");
  AdjacencyProvider p;
  p.dynamic_ = true;
  p.k_ = k;
  p.causal_ = causal;
  p.kind_ = kind;
  return p;
}

Tensor AdjacencyProvider::operator()(const Tensor& x) const {
  if (x.rank() != 3) throw ShapeError("adjacency: expected [B, L, d], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), len = x.dim(1), d = x.dim(2);
  if (!dynamic_) {
    if (fixed_.shape() != Shape{len, len}) {
      throw ShapeError("adjacency: fixed matrix " + shape_str(fixed_.shape()) + " for sequence length " +
                       std::to_string(len));
    }
    return fixed_;
  }
  Tensor out({batch, len, len});
  for (std::size_t b = 0; b < batch; ++b) {
    Tensor xb({len, d}, std::vector<double>(x.ptr() + b * len * d, x.ptr() + (b + 1) * len * d));
    const Tensor norm = normalize_adjacency(knn_adjacency(temporal_similarity(xb, kind_), k_, causal_));
    std::copy(norm.ptr(), norm.ptr() + len * len, out.ptr() + b * len * len);
  }
  return out;
}

GcnLayerParams GcnLayerParams::init(const std::string& prefix, std::size_t d, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  GcnLayerParams p;
  p.w1 = uniform_param(prefix + ".w1", {d, d}, bound, rng);
  p.w2 = uniform_param(prefix + ".w2", {d, d}, bound, rng);
  p.bn_gamma = Param(prefix + ".bn.gamma", Tensor({d}, 1.0));
  p.bn_beta = Param(prefix + ".bn.beta", Tensor({d}, 0.0));
  p.bn = BatchNormState(d);
  return p;
}

void GcnLayerParams::visit(const std::function<void(Param&)>& fn) {
  fn(w1);
  fn(w2);
  fn(bn_gamma);
  fn(bn_beta);
}

Var gcn_layer(const Var& x, const Tensor& norm_adj, GcnLayerParams& params, Mode mode) {
  const Tensor& xv = x.value();
  const std::size_t d = params.w1.value.dim(0);
  if (xv.rank() != 3 || xv.dim(2) != d) {
    throw ShapeError("gcn_layer: input " + shape_str(xv.shape()) + " for width " + std::to_string(d));
  }
  const std::size_t len = xv.dim(1);
  const bool shared = norm_adj.shape() == Shape{len, len};
  if (!shared && norm_adj.shape() != Shape{xv.dim(0), len, len}) {
    throw ShapeError("gcn_layer: adjacency " + shape_str(norm_adj.shape()) + " for input " + shape_str(xv.shape()));
  }
  Tape& tape = *x.tape();
  const Var agg = ad::matmul(tape.constant(norm_adj), x);
  const Var inner = ad::add(ad::matmul(agg, tape.param(params.w1)), ad::matmul(x, tape.param(params.w2)));
  const Var gamma = tape.param(params.bn_gamma);
  const Var beta = tape.param(params.bn_beta);
  return ad::relu(ad::add(x, batch_norm(inner, &gamma, &beta, params.bn, mode)));
}

GcnStreamParams GcnStreamParams::init(const std::string& prefix, std::size_t d, std::size_t mlp_ratio,
                                      std::mt19937_64& rng) {
  GcnStreamParams p;
  p.ln1_gamma = Param(prefix + ".ln1.gamma", Tensor({d}, 1.0));
  p.ln1_beta = Param(prefix + ".ln1.beta", Tensor({d}, 0.0));
  p.gcn = GcnLayerParams::init(prefix + ".gcn", d, rng);
  p.ln2_gamma = Param(prefix + ".ln2.gamma", Tensor({d}, 1.0));
  p.ln2_beta = Param(prefix + ".ln2.beta", Tensor({d}, 0.0));
  const std::size_t hidden = d * mlp_ratio;
  p.mlp_w1 = uniform_param(prefix + ".mlp.w1", {d, hidden}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  p.mlp_b1 = Param(prefix + ".mlp.b1", Tensor({hidden}, 0.0));
  p.mlp_w2 = uniform_param(prefix + ".mlp.w2", {hidden, d}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
  p.mlp_b2 = Param(prefix + ".mlp.b2", Tensor({d}, 0.0));
  return p;
}

void GcnStreamParams::visit(const std::function<void(Param&)>& fn) {
  fn(ln1_gamma);
  fn(ln1_beta);
  gcn.visit(fn);
  fn(ln2_gamma);
  fn(ln2_beta);
  fn(mlp_w1);
  fn(mlp_b1);
  fn(mlp_w2);
  fn(mlp_b2);
}

Var gcn_stream(const Var& x, const AdjacencyProvider& adjacency, GcnStreamParams& params, Mode mode) {
  Tape& tape = *x.tape();
  const Tensor adj = adjacency(x.value());
  const Var g1 = tape.param(params.ln1_gamma), b1 = tape.param(params.ln1_beta);
  const Var mid = ad::add(x, gcn_layer(layer_norm(x, &g1, &b1), adj, params.gcn, mode));
  const Var g2 = tape.param(params.ln2_gamma), b2 = tape.param(params.ln2_beta);
  const Var normed = layer_norm(mid, &g2, &b2);
  const Var b1v = tape.param(params.mlp_b1), b2v = tape.param(params.mlp_b2);
  const Var hidden = ad::gelu(ad::linear(normed, tape.param(params.mlp_w1), &b1v));
  return ad::add(mid, ad::linear(hidden, tape.param(params.mlp_w2), &b2v));
}

}  // namespace posemagic
