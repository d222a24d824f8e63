#include "posemagic/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace posemagic {

Param::Param(std::string name_, Tensor value_)
    : name(std::move(name_)), value(std::move(value_)), grad(value.shape()) {}

void Param::zero_grad() {
  if (grad.shape() != value.shape()) {
    grad = Tensor(value.shape());
  } else {
    grad.fill(0.0);
  }
}

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Tensor* GradSink::grad(std::size_t i) {
  Tape::Node& node = tape_->nodes_[(*parents_)[i]];
  if (!node.requires_grad) return nullptr;
  if (node.grad.shape() != node.value.shape() || node.grad.size() != node.value.size()) {
    node.grad = Tensor(node.value.shape());
  }
  return &node.grad;
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad && grad_enabled_;
  return push(std::move(n));
}

Var Tape::param(Param& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.value = p.value;
  n.param = &p;
  n.requires_grad = grad_enabled_;
  Var v = push(std::move(n));
  param_nodes_.emplace(&p, v.id());
  return v;
}

Var Tape::record(Tensor value, std::vector<Var> parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (const Var& p : parents) {
      if (p.tape() != this) throw std::invalid_argument("Tape::record: parent belongs to a different tape");
      n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
    }
  }
  if (n.requires_grad) {
    n.parents.reserve(parents.size());
    for (const Var& p : parents) n.parents.push_back(p.id());
    n.backward = std::move(backward);
  }
  return push(std::move(n));
}

void Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw std::invalid_argument("backward: loss belongs to a different tape");
  Node& root = nodes_[loss.id()];
  if (root.value.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(root.value.shape()));
  }
  last_visits_ = 0;
  if (!root.requires_grad) return;
  root.grad = Tensor(root.value.shape(), 1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || !node.backward || node.grad.size() != node.value.size()) continue;
    GradSink sink(this, &node.parents);
    node.backward(node.grad, sink);
    ++last_visits_;
  }
  for (Node& node : nodes_) {
    if (node.param == nullptr || node.grad.size() != node.value.size()) continue;
    Param& p = *node.param;
    if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
    double* dst = p.grad.ptr();
    const double* src = node.grad.ptr();
    for (std::size_t k = 0, n = p.grad.size(); k < n; ++k) dst[k] += src[k];
  }
}

Tensor Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() != n.value.size()) return Tensor(n.value.shape());
  return n.grad;
}

namespace {

void accumulate(Tensor* dst, const Tensor& src) {
  if (dst == nullptr) return;
  if (dst->shape() == src.shape()) {
    double* d = dst->ptr();
    const double* s = src.ptr();
    for (std::size_t i = 0, n = src.size(); i < n; ++i) d[i] += s[i];
    return;
  }
  Tensor reduced = ops::reduce_to(src, dst->shape());
  double* d = dst->ptr();
  for (std::size_t i = 0, n = reduced.size(); i < n; ++i) d[i] += reduced[i];
}

Tape& tape_of(const Var& v) {
  if (!v.valid()) throw std::invalid_argument("operation on an unbound Var");
  return *v.tape();
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

}  // namespace

namespace ad {

Var add(const Var& a, const Var& b) {
  return tape_of(a).record(ops::add(a.value(), b.value()), {a, b}, [](const Tensor& g, GradSink& s) {
    accumulate(s.grad(0), g);
    accumulate(s.grad(1), g);
  });
}

Var sub(const Var& a, const Var& b) {
  return tape_of(a).record(ops::sub(a.value(), b.value()), {a, b}, [](const Tensor& g, GradSink& s) {
    accumulate(s.grad(0), g);
    if (Tensor* gb = s.grad(1)) accumulate(gb, ops::scale(g, -1.0));
  });
}

Var mul(const Var& a, const Var& b) {
  return tape_of(a).record(ops::mul(a.value(), b.value()), {a, b}, [a, b](const Tensor& g, GradSink& s) {
    if (Tensor* ga = s.grad(0)) accumulate(ga, ops::mul(g, b.value()));
    if (Tensor* gb = s.grad(1)) accumulate(gb, ops::mul(g, a.value()));
  });
}

Var scale(const Var& a, double k) {
  return tape_of(a).record(ops::scale(a.value(), k), {a}, [k](const Tensor& g, GradSink& s) {
    accumulate(s.grad(0), ops::scale(g, k));
  });
}

Var matmul(const Var& a, const Var& b) {
  return tape_of(a).record(ops::matmul(a.value(), b.value()), {a, b}, [a, b](const Tensor& g, GradSink& s) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t m = av.dim(-2), k = av.dim(-1), n = bv.dim(-1);
    Tensor* ga = s.grad(0);
    Tensor* gb = s.grad(1);
    if (bv.rank() == 2) {
      const std::size_t rows = av.size() / k;
      if (ga) kernels::gemm_nt(g.ptr(), bv.ptr(), ga->ptr(), rows, n, k);
      if (gb) kernels::gemm_tn(av.ptr(), g.ptr(), gb->ptr(), rows, k, n);
      return;
    }
    const Shape a_lead(av.shape().begin(), av.shape().end() - 2);
    const Shape b_lead(bv.shape().begin(), bv.shape().end() - 2);
    ops::for_each_broadcast_batch(a_lead, b_lead, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      const double* go = g.ptr() + o * m * n;
      if (ga) kernels::gemm_nt(go, bv.ptr() + ib * k * n, ga->ptr() + ia * m * k, m, n, k);
      if (gb) kernels::gemm_tn(av.ptr() + ia * m * k, go, gb->ptr() + ib * k * n, m, k, n);
    });
  });
}

Var permute(const Var& a, std::vector<std::size_t> perm) {
  Tensor out = ops::permute(a.value(), perm);
  std::vector<std::size_t> inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
  return tape_of(a).record(std::move(out), {a}, [inverse](const Tensor& g, GradSink& s) {
    accumulate(s.grad(0), ops::permute(g, inverse));
  });
}

Var transpose(const Var& a, int axis0, int axis1) {
  std::vector<std::size_t> perm(a.value().rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[normalize_axis(axis0, perm.size(), "transpose")],
            perm[normalize_axis(axis1, perm.size(), "transpose")]);
  return permute(a, std::move(perm));
}

Var reshape(const Var& a, Shape shape) {
  return tape_of(a).record(ops::reshape(a.value(), std::move(shape)), {a}, [a](const Tensor& g, GradSink& s) {
    if (Tensor* ga = s.grad(0)) accumulate(ga, g.reshaped(a.shape()));
  });
}

Var slice(const Var& a, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, a.value().rank(), "slice");
  return tape_of(a).record(ops::slice(a.value(), axis, start, length), {a},
                           [a, ax, start, length](const Tensor& g, GradSink& s) {
                             Tensor* ga = s.grad(0);
                             if (!ga) return;
                             const AxisSplit sp = split_at(a.shape(), ax);
                             for (std::size_t o = 0; o < sp.outer; ++o) {
                               double* dst = ga->ptr() + (o * sp.len + start) * sp.inner;
                               const double* src = g.ptr() + o * length * sp.inner;
                               for (std::size_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
                             }
                           });
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  std::vector<Tensor> values;
  values.reserve(parts.size());
  for (const Var& p : parts) values.push_back(p.value());
  Tensor out = ops::concat(values, axis);
  const std::size_t ax = normalize_axis(axis, out.rank(), "concat");
  std::vector<std::size_t> lengths;
  for (const Var& p : parts) lengths.push_back(p.value().shape()[ax]);
  return tape_of(parts[0]).record(std::move(out), parts, [ax, lengths](const Tensor& g, GradSink& s) {
    std::size_t start = 0;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
      if (Tensor* gi = s.grad(i)) accumulate(gi, ops::slice(g, static_cast<int>(ax), start, lengths[i]));
      start += lengths[i];
    }
  });
}

Var flip(const Var& a, int axis) {
  return tape_of(a).record(ops::flip(a.value(), axis), {a}, [axis](const Tensor& g, GradSink& s) {
    if (Tensor* ga = s.grad(0)) accumulate(ga, ops::flip(g, axis));
  });
}

Var softmax(const Var& a, int axis) {
  Tensor y = ops::softmax(a.value(), axis);
  const std::size_t ax = normalize_axis(axis, y.rank(), "softmax");
  return tape_of(a).record(y, {a}, [y, ax](const Tensor& g, GradSink& s) {
    Tensor* ga = s.grad(0);
    if (!ga) return;
    const AxisSplit sp = split_at(y.shape(), ax);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        double dot = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) dot += g[base + l * sp.inner] * y[base + l * sp.inner];
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t idx = base + l * sp.inner;
          (*ga)[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Var sum(const Var& a) {
  return tape_of(a).record(ops::sum(a.value()), {a}, [](const Tensor& g, GradSink& s) {
    Tensor* ga = s.grad(0);
    if (!ga) return;
    const double v = g.item();
    for (double& x : ga->data()) x += v;
  });
}

Var mean(const Var& a) {
  const double inv = 1.0 / static_cast<double>(a.value().size());
  return tape_of(a).record(ops::mean(a.value()), {a}, [inv](const Tensor& g, GradSink& s) {
    Tensor* ga = s.grad(0);
    if (!ga) return;
    const double v = g.item() * inv;
    for (double& x : ga->data()) x += v;
  });
}

Var activate(const Var& a, ops::Activation kind) {
  return tape_of(a).record(ops::activate(a.value(), kind), {a}, [a, kind](const Tensor& g, GradSink& s) {
    Tensor* ga = s.grad(0);
    if (!ga) return;
    const Tensor d = ops::activate_grad(a.value(), kind);
    double* dst = ga->ptr();
    for (std::size_t i = 0, n = g.size(); i < n; ++i) dst[i] += g[i] * d[i];
  });
}

Var relu(const Var& a) { return activate(a, ops::Activation::relu); }
Var gelu(const Var& a) { return activate(a, ops::Activation::gelu); }
Var tanh(const Var& a) { return activate(a, ops::Activation::tanh); }
Var softplus(const Var& a) { return activate(a, ops::Activation::softplus); }

Var norm_last(const Var& a) {
  const Tensor& x = a.value();
  if (x.rank() == 0) throw ShapeError("norm_last: scalar input");
  const std::size_t width = x.dim(-1);
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  Tensor out(out_shape);
  for (std::size_t r = 0, rows = out.size(); r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < width; ++c) acc += x[r * width + c] * x[r * width + c];
    out[r] = std::sqrt(acc);
  }
  Tensor norms = out;
  return tape_of(a).record(std::move(out), {a}, [a, norms, width](const Tensor& g, GradSink& s) {
    Tensor* ga = s.grad(0);
    if (!ga) return;
    const Tensor& xv = a.value();
    for (std::size_t r = 0, rows = norms.size(); r < rows; ++r) {
      if (norms[r] == 0.0) continue;
      const double k = g[r] / norms[r];
      for (std::size_t c = 0; c < width; ++c) (*ga)[r * width + c] += k * xv[r * width + c];
    }
  });
}

Var linear(const Var& x, const Var& w, const Var* bias) {
  Var y = matmul(x, w);
  return bias ? add(y, *bias) : y;
}

}  // namespace ad

namespace {

// Ridders' extrapolation of central differences from step h down by halves;
// stops once the tableau error starts growing.
double ridders_derivative(const std::function<double(double)>& central, double h) {
  constexpr std::size_t kTable = 6;
  constexpr double kShrink = 2.0, kSafe = 2.0;
  double table[kTable][kTable];
  table[0][0] = central(h);
  double best = table[0][0];
  double err = std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k < kTable; ++k) {
    h /= kShrink;
    table[0][k] = central(h);
    double fac = kShrink * kShrink;
    for (std::size_t j = 1; j <= k; ++j) {
      table[j][k] = (table[j - 1][k] * fac - table[j - 1][k - 1]) / (fac - 1.0);
      fac *= kShrink * kShrink;
      const double e = std::max(std::abs(table[j][k] - table[j - 1][k]), std::abs(table[j][k] - table[j - 1][k - 1]));
      if (e <= err) {
        err = e;
        best = table[j][k];
      }
    }
    if (std::abs(table[k][k] - table[k - 1][k - 1]) >= kSafe * err) break;
  }
  return best;
}

}  // namespace

GradCheckResult grad_check(const std::function<Var(Tape&)>& f, std::span<Param* const> params, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-4)) {
    throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-4], got " + std::to_string(eps));
  }
  for (Param* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = f(tape);
    tape.backward(loss);
  }
  auto evaluate = [&f] {
    Tape tape(false);
    return f(tape).value().item();
  };
  const double first = evaluate();
  const double second = evaluate();
  if (first != second && !(std::isnan(first) && std::isnan(second))) {
    throw std::runtime_error("grad_check: function is not deterministic (" + std::to_string(first) +
                             " vs " + std::to_string(second) + ")");
  }
  double largest = 0.0;
  for (const Param* p : params) {
    for (double g : p->grad.data()) largest = std::max(largest, std::abs(g));
  }
  const double floor = 1e-8 * std::max(1.0, largest);

  GradCheckResult result;
  for (Param* p : params) {
    const Tensor analytic = p->grad;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double original = p->value[i];
      auto central = [&](double h) {
        p->value[i] = original + h;
        const double plus = evaluate();
        p->value[i] = original - h;
        const double minus = evaluate();
        p->value[i] = original;
        return (plus - minus) / (2.0 * h);
      };
      double numeric = central(eps);
      if (numeric != 0.0) {
        // Large enough that the loss moves by ~1e-8 of itself, capped to stay local.
        const double h = std::clamp(1e-8 * std::abs(first) / std::abs(numeric), eps, 1e-2);
        numeric = ridders_derivative(central, h);
      }
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.entries;
      if (rel > result.max_rel_error || (std::isnan(rel) && !std::isnan(result.max_rel_error))) {
        result.max_rel_error = rel;
        result.worst_param = p->name;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace posemagic
