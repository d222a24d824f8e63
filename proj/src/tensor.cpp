#include "posemagic/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace posemagic {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const long r = static_cast<long>(rank);
  const long a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (numel(shape_) != data_.size()) {
    throw ShapeError("Tensor: shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

std::size_t Tensor::dim(int axis) const { return shape_[normalize_axis(axis, rank(), "dim")]; }

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw ShapeError("at: index rank " + std::to_string(index.size()) + " vs shape " +
                     shape_str(shape_));
  }
  std::size_t off = 0;
  std::size_t d = 0;
  for (std::size_t i : index) {
    if (i >= shape_[d]) throw ShapeError("at: index out of range for shape " + shape_str(shape_));
    off = off * shape_[d] + i;
    ++d;
  }
  return off;
}

double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not a scalar");
  return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != data_.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

namespace {

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> s(shape.size());
  std::size_t acc = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    s[i] = acc;
    acc *= shape[i];
  }
  return s;
}

// Strides of `in` viewed with the (right-aligned) shape `out`; 0 on broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> s(out.size(), 0);
  const auto cs = contiguous_strides(in);
  const std::size_t shift = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i] != 1) s[i + shift] = cs[i];
  }
  return s;
}

// Visits every element of `out` in row-major order with the matching offsets
// into two strided operands.
template <class F>
void for_each_index(const Shape& out, const std::vector<std::size_t>& sa,
                    const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t r = out.size();
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = out[r - 1];
  const std::size_t total = numel(out);
  if (total == 0) return;
  const std::size_t outer = total / inner;
  const std::size_t ia = sa[r - 1], ib = sb[r - 1];
  std::vector<std::size_t> idx(r - 1, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * inner;
    for (std::size_t j = 0; j < inner; ++j) f(base + j, oa + j * ia, ob + j * ib);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <class Op>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Op op) {
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    double* po = out.ptr();
    for (std::size_t i = 0, n = a.size(); i < n; ++i) po[i] = op(pa[i], pb[i]);
    return out;
  }
  Shape shape = ops::broadcast_shape(a.shape(), b.shape(), name);
  Tensor out(shape);
  const auto sa = broadcast_strides(a.shape(), shape);
  const auto sb = broadcast_strides(b.shape(), shape);
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* po = out.ptr();
  for_each_index(shape, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    po[o] = op(pa[ia], pb[ib]);
  });
  return out;
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

namespace ops {

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  for (double& v : out.data()) v *= s;
  return out;
}

Tensor reduce_to(const Tensor& grad, const Shape& target) {
  if (grad.shape() == target) return grad;
  if (broadcast_shape(grad.shape(), target, "reduce_to") != grad.shape()) {
    throw ShapeError("reduce_to: " + shape_str(target) + " does not broadcast to " + shape_str(grad.shape()));
  }
  Tensor out(target);
  const auto st = broadcast_strides(target, grad.shape());
  const auto sg = contiguous_strides(grad.shape());
  const double* pg = grad.ptr();
  double* po = out.ptr();
  for_each_index(grad.shape(), st, sg, [&](std::size_t, std::size_t it, std::size_t ig) { po[it] += pg[ig]; });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const Shape a_lead(a.shape().begin(), a.shape().end() - 2);
  const Shape b_lead(b.shape().begin(), b.shape().end() - 2);
  if (b_lead.empty()) {
    Shape out_shape = a_lead;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out(out_shape);
    kernels::gemm_nn(a.ptr(), b.ptr(), out.ptr(), numel(a_lead) * m, k, n);
    return out;
  }
  Shape lead = broadcast_shape(a_lead, b_lead, "matmul");
  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape);
  const auto sa = broadcast_strides(a_lead, lead);
  const auto sb = broadcast_strides(b_lead, lead);
  for_each_index(lead, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    kernels::gemm_nn(a.ptr() + ia * m * k, b.ptr() + ib * k * n, out.ptr() + o * m * n, m, k, n);
  });
  return out;
}

void for_each_broadcast_batch(const Shape& a_lead, const Shape& b_lead,
                              const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
  const Shape lead = broadcast_shape(a_lead, b_lead, "matmul");
  for_each_index(lead, broadcast_strides(a_lead, lead), broadcast_strides(b_lead, lead), fn);
}

Tensor permute(const Tensor& a, std::span<const std::size_t> perm) {
  if (perm.size() != a.rank()) {
    throw ShapeError("permute: permutation of length " + std::to_string(perm.size()) +
                     " for shape " + shape_str(a.shape()));
  }
  std::vector<bool> seen(perm.size(), false);
  Shape out_shape(perm.size());
  const auto cs = contiguous_strides(a.shape());
  std::vector<std::size_t> in_strides(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= perm.size() || seen[perm[i]]) throw ShapeError("permute: invalid permutation");
    seen[perm[i]] = true;
    out_shape[i] = a.shape()[perm[i]];
    in_strides[i] = cs[perm[i]];
  }
  Tensor out(out_shape);
  const std::vector<std::size_t> zero(perm.size(), 0);
  const double* pa = a.ptr();
  double* po = out.ptr();
  for_each_index(out_shape, in_strides, zero, [&](std::size_t o, std::size_t i, std::size_t) { po[o] = pa[i]; });
  return out;
}

Tensor transpose(const Tensor& a, int axis0, int axis1) {
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[normalize_axis(axis0, a.rank(), "transpose")], perm[normalize_axis(axis1, a.rank(), "transpose")]);
  return permute(a, perm);
}

Tensor reshape(const Tensor& a, Shape shape) { return a.reshaped(std::move(shape)); }

Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "slice");
  if (start + length > a.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") exceeds axis of " + shape_str(a.shape()));
  }
  const AxisSplit s = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = length;
  Tensor out(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    const double* src = a.ptr() + (o * s.len + start) * s.inner;
    std::copy(src, src + length * s.inner, out.ptr() + o * length * s.inner);
  }
  return out;
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const Tensor& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != out_shape.size()) throw ShapeError("concat: rank mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    probe[ax] = 0;
    Shape ref = parts[0].shape();
    ref[ax] = 0;
    if (probe != ref) throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    out_shape[ax] += p.shape()[ax];
  }
  Tensor out(out_shape);
  const AxisSplit so = split_at(out_shape, ax);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t chunk = p.shape()[ax] * so.inner;
    for (std::size_t o = 0; o < so.outer; ++o) {
      std::copy(p.ptr() + o * chunk, p.ptr() + (o + 1) * chunk, out.ptr() + o * so.len * so.inner + offset);
    }
    offset += chunk;
  }
  return out;
}

Tensor flip(const Tensor& a, int axis) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "flip");
  const AxisSplit s = split_at(a.shape(), ax);
  Tensor out(a.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < s.len; ++l) {
      const double* src = a.ptr() + (o * s.len + l) * s.inner;
      std::copy(src, src + s.inner, out.ptr() + (o * s.len + (s.len - 1 - l)) * s.inner);
    }
  }
  return out;
}

Tensor softmax(const Tensor& a, int axis) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "softmax");
  const AxisSplit s = split_at(a.shape(), ax);
  Tensor out(a.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = a[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, a[base + l * s.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double e = std::exp(a[base + l * s.inner] - mx);
        out[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= total;
    }
  }
  return out;
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return Tensor::scalar(total);
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  return Tensor::scalar(sum(a).item() / static_cast<double>(a.size()));
}

Tensor sum_axis(const Tensor& a, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "sum_axis");
  const AxisSplit s = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  }
  Tensor out(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < s.len; ++l) {
      const double* src = a.ptr() + (o * s.len + l) * s.inner;
      double* dst = out.ptr() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  return out;
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

Tensor activate(const Tensor& a, Activation kind) {
  Tensor out(a.shape());
  const double* pa = a.ptr();
  double* po = out.ptr();
  const std::size_t n = a.size();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] > 0.0 ? pa[i] : 0.0;
      break;
    case Activation::gelu:
      for (std::size_t i = 0; i < n; ++i) po[i] = gelu(pa[i]);
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < n; ++i) po[i] = std::tanh(pa[i]);
      break;
    case Activation::softplus:
      for (std::size_t i = 0; i < n; ++i) po[i] = softplus(pa[i]);
      break;
  }
  return out;
}

Tensor activate_grad(const Tensor& x, Activation kind) {
  Tensor out(x.shape());
  const double* px = x.ptr();
  double* po = out.ptr();
  const std::size_t n = x.size();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < n; ++i) po[i] = px[i] > 0.0 ? 1.0 : 0.0;
      break;
    case Activation::gelu:
      for (std::size_t i = 0; i < n; ++i) {
        const double v = px[i];
        po[i] = 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      }
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < n; ++i) {
        const double t = std::tanh(px[i]);
        po[i] = 1.0 - t * t;
      }
      break;
    case Activation::softplus:
      for (std::size_t i = 0; i < n; ++i) {
        const double v = px[i];
        po[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      }
      break;
  }
  return out;
}

}  // namespace ops

namespace kernels {

namespace {

using v8d = double __attribute__((vector_size(64)));

// One R x 16 tile of C: accumulators stay in registers across the whole k loop,
// and every element is summed over p in order, independent of m.
template <std::size_t R>
inline void tile_nn(const double* a, const double* b, double* c, std::size_t k, std::size_t n, std::size_t lda,
                    std::size_t j0) {
  v8d acc[R][2];
  for (std::size_t r = 0; r < R; ++r) acc[r][0] = acc[r][1] = v8d{};
  for (std::size_t p = 0; p < k; ++p) {
    v8d b0, b1;
    std::memcpy(&b0, b + p * n + j0, sizeof b0);
    std::memcpy(&b1, b + p * n + j0 + 8, sizeof b1);
    for (std::size_t r = 0; r < R; ++r) {
      const double x = a[r * lda + p];
      acc[r][0] += x * b0;
      acc[r][1] += x * b1;
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    double* cr = c + r * n + j0;
    for (std::size_t h = 0; h < 2; ++h) {
      v8d cv;
      std::memcpy(&cv, cr + 8 * h, sizeof cv);
      cv += acc[r][h];
      std::memcpy(cr + 8 * h, &cv, sizeof cv);
    }
  }
}

// Columns past the last full tile.
inline void tail_nn(const double* a, const double* b, double* c, std::size_t rows, std::size_t k, std::size_t n,
                    std::size_t j0) {
  const std::size_t w = n - j0;
  double acc[16];
  for (std::size_t r = 0; r < rows; ++r) {
    std::fill(acc, acc + w, 0.0);
    const double* ar = a + r * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double x = ar[p];
      const double* br = b + p * n + j0;
      for (std::size_t j = 0; j < w; ++j) acc[j] += x * br[j];
    }
    double* cr = c + r * n + j0;
    for (std::size_t j = 0; j < w; ++j) cr[j] += acc[j];
  }
}

}  // namespace

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const std::size_t full = n - n % 16;
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    for (std::size_t j0 = 0; j0 < full; j0 += 16) tile_nn<4>(a + i * k, b, c + i * n, k, n, k, j0);
    if (full < n) tail_nn(a + i * k, b, c + i * n, 4, k, n, full);
  }
  for (; i < m; ++i) {
    for (std::size_t j0 = 0; j0 < full; j0 += 16) tile_nn<1>(a + i * k, b, c + i * n, k, n, k, j0);
    if (full < n) tail_nn(a + i * k, b, c + i * n, 1, k, n, full);
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  // Transposing B keeps the inner loop a contiguous axpy.
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  }
  gemm_nn(a, bt.data(), c, m, n, k);
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  std::size_t i = 0;
  // Four input rows per pass over C.
  for (; i + 4 <= m; i += 4) {
    const double* a0 = a + i * k;
    const double* b0 = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double x0 = a0[p], x1 = a0[k + p], x2 = a0[2 * k + p], x3 = a0[3 * k + p];
      double* cr = c + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        cr[j] += x0 * b0[j] + x1 * b0[n + j] + x2 * b0[2 * n + j] + x3 * b0[3 * n + j];
      }
    }
  }
  for (; i < m; ++i) {
    const double* ar = a + i * k;
    const double* br = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double x = ar[p];
      double* cr = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += x * br[j];
    }
  }
}

}  // namespace kernels

}  // namespace posemagic
