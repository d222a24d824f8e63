#include "posemagic/ssm.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <memory>

#include "posemagic/parallel.hpp"

namespace posemagic {

namespace {

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

double inverse_softplus(double y) { return y + std::log(-std::expm1(-y)); }

// d/dA [(exp(delta A) - 1) / A] = delta^2 (z e^z - (e^z - 1)) / z^2 with z = delta A.
double zoh_b_grad_a(double delta, double z, double a_bar, double e) {
  if (std::abs(z) < 1e-3) {
    const double series = 0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z / 30.0));
    return delta * delta * series;
  }
  return delta * delta * (z * a_bar - e) / (z * z);
}

}  // namespace

Tensor SsmParams::a() const {
  Tensor out(a_log.value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -std::exp(a_log.value[i]);
  return out;
}

SsmParams SsmParams::init(const std::string& prefix, std::size_t channels, std::size_t state_size,
                          std::mt19937_64& rng) {
  Tensor a(Shape{channels, state_size});
  for (std::size_t d = 0; d < channels; ++d) {
    for (std::size_t i = 0; i < state_size; ++i) a[d * state_size + i] = -static_cast<double>(i + 1);
  }
  return with_state_matrix(prefix, a, state_size, rng);
}

SsmParams SsmParams::with_state_matrix(const std::string& prefix, const Tensor& a, std::size_t state_size,
                                       std::mt19937_64& rng) {
  if (a.rank() != 2 || a.dim(1) != state_size) {
    throw ConfigError("ssm: state matrix of shape " + shape_str(a.shape()) + " for state size " +
                      std::to_string(state_size));
  }
  const std::size_t channels = a.dim(0);
  Tensor a_log(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] < 0.0)) {
      throw ConfigError("ssm: state matrix entries must be strictly negative, found " + std::to_string(a[i]));
    }
    a_log[i] = std::log(-a[i]);
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
  SsmParams p;
  p.a_log = Param(prefix + ".a_log", std::move(a_log));
  p.w_b = Param(prefix + ".w_b", uniform({channels, state_size}, bound, rng));
  p.w_c = Param(prefix + ".w_c", uniform({channels, state_size}, bound, rng));
  p.w_delta = Param(prefix + ".w_delta", uniform({channels, 1}, bound, rng));
  Tensor bias(Shape{channels});
  std::uniform_real_distribution<double> dt(0.001, 0.1);
  for (double& v : bias.data()) v = inverse_softplus(dt(rng));
  p.delta_bias = Param(prefix + ".delta_bias", std::move(bias));
  return p;
}

void SsmParams::visit(const std::function<void(Param&)>& fn) {
  fn(a_log);
  fn(w_b);
  fn(w_c);
  fn(w_delta);
  fn(delta_bias);
}

void ScanInputs::validate() const {
  if (a_bar.rank() != 3 || b_bar_x.shape() != a_bar.shape() || c.rank() != 2 || c.dim(0) != a_bar.dim(0) ||
      c.dim(1) != a_bar.dim(2)) {
    throw ShapeError("scan: inconsistent inputs a_bar " + shape_str(a_bar.shape()) + ", b_bar_x " +
                     shape_str(b_bar_x.shape()) + ", c " + shape_str(c.shape()));
  }
}

Discretized discretize(const Tensor& delta, const Tensor& a, const Tensor& b) {
  if (delta.rank() != 2 || a.rank() != 2 || b.rank() != 2 || a.dim(0) != delta.dim(1) ||
      b.dim(0) != delta.dim(0) || b.dim(1) != a.dim(1)) {
    throw ShapeError("discretize: delta " + shape_str(delta.shape()) + ", A " + shape_str(a.shape()) +
                     ", B " + shape_str(b.shape()));
  }
  const std::size_t len = delta.dim(0), channels = a.dim(0), n = a.dim(1);
  Discretized out{Tensor({len, channels, n}), Tensor({len, channels, n})};
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t d = 0; d < channels; ++d) {
      const double dt = delta[t * channels + d];
      for (std::size_t i = 0; i < n; ++i) {
        const double ad = a[d * n + i];
        const double e = std::expm1(dt * ad);
        const std::size_t k = (t * channels + d) * n + i;
        out.a_bar[k] = 1.0 + e;
        out.b_bar[k] = e / ad * b[t * n + i];
      }
    }
  }
  return out;
}

SelectiveParams selective_params(const Tensor& x, const SsmParams& params) {
  const std::size_t channels = params.channels();
  if (x.rank() != 2 || x.dim(1) != channels) {
    throw ShapeError("selective_params: input " + shape_str(x.shape()) + " for " + std::to_string(channels) +
                     " channels");
  }
  const std::size_t len = x.dim(0);
  SelectiveParams out;
  out.b = ops::matmul(x, params.w_b.value);
  out.c = ops::matmul(x, params.w_c.value);
  const Tensor proj = ops::matmul(x, params.w_delta.value);
  out.delta = Tensor({len, channels});
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t d = 0; d < channels; ++d) {
      out.delta[t * channels + d] = ops::softplus(params.delta_bias.value[d] + proj[t]);
    }
  }
  return out;
}

ScanInputs make_scan_inputs(const Tensor& x, const SelectiveParams& sel, const Tensor& a) {
  Discretized disc = discretize(sel.delta, a, sel.b);
  const std::size_t len = x.dim(0), channels = x.dim(1), n = a.dim(1);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t d = 0; d < channels; ++d) {
      const double xv = x[t * channels + d];
      double* row = disc.b_bar.ptr() + (t * channels + d) * n;
      for (std::size_t i = 0; i < n; ++i) row[i] *= xv;
    }
  }
  return ScanInputs{std::move(disc.a_bar), std::move(disc.b_bar), sel.c};
}

namespace {

// y[t, d] = sum_i c[t, i] h[d, i] for one step.
inline void readout(const double* h, const double* c, double* y, std::size_t channels, std::size_t n) {
  for (std::size_t d = 0; d < channels; ++d) {
    double acc = 0.0;
    const double* hd = h + d * n;
    for (std::size_t i = 0; i < n; ++i) acc += c[i] * hd[i];
    y[d] = acc;
  }
}

}  // namespace

Tensor scan_sequential(const ScanInputs& inp) {
  inp.validate();
  const std::size_t len = inp.length(), channels = inp.channels(), n = inp.state_size();
  const std::size_t width = channels * n;
  Tensor y({len, channels});
  std::vector<double> h(width, 0.0);
  for (std::size_t t = 0; t < len; ++t) {
    const double* a = inp.a_bar.ptr() + t * width;
    const double* bx = inp.b_bar_x.ptr() + t * width;
    for (std::size_t k = 0; k < width; ++k) h[k] = a[k] * h[k] + bx[k];
    readout(h.data(), inp.c.ptr() + t * n, y.ptr() + t * channels, channels, n);
  }
  return y;
}

Tensor scan_states(const ScanInputs& inp) {
  inp.validate();
  const std::size_t len = inp.length(), width = inp.channels() * inp.state_size();
  Tensor h({len, inp.channels(), inp.state_size()});
  for (std::size_t t = 0; t < len; ++t) {
    const double* a = inp.a_bar.ptr() + t * width;
    const double* bx = inp.b_bar_x.ptr() + t * width;
    double* cur = h.ptr() + t * width;
    if (t == 0) {
      for (std::size_t k = 0; k < width; ++k) cur[k] = a[k] * 0.0 + bx[k];
    } else {
      const double* prev = cur - width;
      for (std::size_t k = 0; k < width; ++k) cur[k] = a[k] * prev[k] + bx[k];
    }
  }
  return h;
}

Tensor scan_parallel(const ScanInputs& inp, std::size_t workers) {
  inp.validate();
  const std::size_t len = inp.length(), channels = inp.channels(), n = inp.state_size();
  const std::size_t width = channels * n;
  const std::size_t padded = std::bit_ceil(std::max<std::size_t>(len, 1));
  // Tree nodes, row-major [padded, width]; padding rows hold the identity (1, 0).
  std::vector<double> ta(padded * width, 1.0);
  std::vector<double> tb(padded * width, 0.0);
  std::copy(inp.a_bar.ptr(), inp.a_bar.ptr() + len * width, ta.begin());
  std::copy(inp.b_bar_x.ptr(), inp.b_bar_x.ptr() + len * width, tb.begin());

  Tensor h({len, channels, n});
  parallel_for(width, [&](std::size_t k0, std::size_t k1) {
    // Up-sweep: node[r] <- node[l] then node[r].
    for (std::size_t stride = 1; stride < padded; stride *= 2) {
      for (std::size_t r = 2 * stride - 1; r < padded; r += 2 * stride) {
        const std::size_t l = r - stride;
        double* ar = ta.data() + r * width;
        double* br = tb.data() + r * width;
        const double* al = ta.data() + l * width;
        const double* bl = tb.data() + l * width;
        for (std::size_t k = k0; k < k1; ++k) {
          br[k] = ar[k] * bl[k] + br[k];
          ar[k] = al[k] * ar[k];
        }
      }
    }
    for (std::size_t k = k0; k < k1; ++k) {
      ta[(padded - 1) * width + k] = 1.0;
      tb[(padded - 1) * width + k] = 0.0;
    }
    // Down-sweep: left child receives the parent prefix, right child the
    // parent prefix followed by the left subtree.
    for (std::size_t stride = padded / 2; stride >= 1; stride /= 2) {
      for (std::size_t r = 2 * stride - 1; r < padded; r += 2 * stride) {
        const std::size_t l = r - stride;
        double* ar = ta.data() + r * width;
        double* br = tb.data() + r * width;
        double* al = ta.data() + l * width;
        double* bl = tb.data() + l * width;
        for (std::size_t k = k0; k < k1; ++k) {
          const double sa = al[k], sb = bl[k];
          al[k] = ar[k];
          bl[k] = br[k];
          ar[k] = ar[k] * sa;
          br[k] = sa * br[k] + sb;
        }
      }
      if (stride == 1) break;
    }
    // Inclusive state: the exclusive prefix followed by the element itself.
    for (std::size_t t = 0; t < len; ++t) {
      const double* a = inp.a_bar.ptr() + t * width;
      const double* bx = inp.b_bar_x.ptr() + t * width;
      const double* prefix = tb.data() + t * width;
      double* out = h.ptr() + t * width;
      for (std::size_t k = k0; k < k1; ++k) out[k] = a[k] * prefix[k] + bx[k];
    }
  }, std::min(workers, std::max<std::size_t>(1, width / 64)));

  Tensor y({len, channels});
  for (std::size_t t = 0; t < len; ++t) {
    readout(h.ptr() + t * width, inp.c.ptr() + t * n, y.ptr() + t * channels, channels, n);
  }
  return y;
}

ScanGrads scan_backward(const ScanInputs& inp, const Tensor& upstream) {
  inp.validate();
  const std::size_t len = inp.length(), channels = inp.channels(), n = inp.state_size();
  if (upstream.shape() != Shape{len, channels}) {
    throw ShapeError("scan_backward: upstream " + shape_str(upstream.shape()) + " for output [" +
                     std::to_string(len) + ", " + std::to_string(channels) + "]");
  }
  const std::size_t width = channels * n;
  const Tensor h = scan_states(inp);
  ScanGrads g{Tensor(inp.a_bar.shape()), Tensor(inp.b_bar_x.shape()), Tensor(inp.c.shape())};
  std::vector<double> lambda(width, 0.0);
  for (std::size_t t = len; t-- > 0;) {
    const double* gy = upstream.ptr() + t * channels;
    const double* c = inp.c.ptr() + t * n;
    const double* ht = h.ptr() + t * width;
    double* gc = g.c.ptr() + t * n;
    for (std::size_t d = 0; d < channels; ++d) {
      for (std::size_t i = 0; i < n; ++i) gc[i] += gy[d] * ht[d * n + i];
    }
    // lambda_t = dy_t/dh_t + a_{t+1} lambda_{t+1}
    if (t + 1 < len) {
      const double* a_next = inp.a_bar.ptr() + (t + 1) * width;
      for (std::size_t k = 0; k < width; ++k) lambda[k] *= a_next[k];
    }
    for (std::size_t d = 0; d < channels; ++d) {
      for (std::size_t i = 0; i < n; ++i) lambda[d * n + i] += gy[d] * c[i];
    }
    double* ga = g.a_bar.ptr() + t * width;
    double* gb = g.b_bar_x.ptr() + t * width;
    for (std::size_t k = 0; k < width; ++k) {
      gb[k] = lambda[k];
      ga[k] = t > 0 ? lambda[k] * h[(t - 1) * width + k] : 0.0;
    }
  }
  return g;
}

namespace {

// Fills the scan inputs of sequence s from flat [S, L, *] buffers and the
// stored expm1(delta A) values.
void fill_scan_inputs(ScanInputs& inp, std::size_t s, const double* u, const double* b, const double* c,
                      const double* a, const double* expm, std::size_t len, std::size_t channels, std::size_t n) {
  const std::size_t width = channels * n;
  for (std::size_t t = 0; t < len; ++t) {
    const std::size_t row = s * len + t;
    const double* e = expm + row * width;
    const double* bt = b + row * n;
    double* abar = inp.a_bar.ptr() + t * width;
    double* bbx = inp.b_bar_x.ptr() + t * width;
    for (std::size_t d = 0; d < channels; ++d) {
      const double xv = u[row * channels + d];
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = d * n + i;
        abar[k] = 1.0 + e[k];
        bbx[k] = e[k] / a[k] * bt[i] * xv;
      }
    }
  }
  std::copy(c + s * len * n, c + (s + 1) * len * n, inp.c.ptr());
}

// a_bar and b_bar * x for one step of one sequence.
inline void step_inputs(double* abar, double* bbx, const double* u, const double* b, const double* a,
                        const double* e, std::size_t channels, std::size_t n) {
  for (std::size_t d = 0; d < channels; ++d) {
    const double xv = u[d];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = d * n + i;
      abar[k] = 1.0 + e[k];
      bbx[k] = e[k] / a[k] * b[i] * xv;
    }
  }
}

}  // namespace

namespace ad {

Var selective_scan(const Var& u, const Var& delta, const Var& a_log, const Var& b, const Var& c,
                   ScanMethod method) {
  const Tensor& uv = u.value();
  if (uv.rank() != 3) throw ShapeError("selective_scan: input must be [S, L, D], got " + shape_str(uv.shape()));
  const std::size_t seqs = uv.dim(0), len = uv.dim(1), channels = uv.dim(2);
  const std::size_t n = a_log.value().rank() == 2 ? a_log.value().dim(1) : 0;
  if (delta.shape() != uv.shape() || a_log.shape() != Shape{channels, n} || b.shape() != Shape{seqs, len, n} ||
      c.shape() != Shape{seqs, len, n}) {
    throw ShapeError("selective_scan: u " + shape_str(uv.shape()) + ", delta " + shape_str(delta.shape()) +
                     ", a_log " + shape_str(a_log.shape()) + ", B " + shape_str(b.shape()) + ", C " +
                     shape_str(c.shape()));
  }
  auto a = std::make_shared<Tensor>(a_log.value().shape());
  for (std::size_t i = 0; i < a->size(); ++i) (*a)[i] = -std::exp(a_log.value()[i]);

  const std::size_t width = channels * n;
  // expm1(delta * A) per (s, t, d, i); a_bar = 1 + e reproduces the forward exactly.
  auto expm = std::make_shared<Tensor>(Shape{seqs, len, channels, n});
  const double* dv = delta.value().ptr();
  for (std::size_t row = 0; row < seqs * len; ++row) {
    double* e = expm->ptr() + row * width;
    for (std::size_t d = 0; d < channels; ++d) {
      const double dt = dv[row * channels + d];
      for (std::size_t i = 0; i < n; ++i) e[d * n + i] = std::expm1(dt * (*a)[d * n + i]);
    }
  }

  Tensor y({seqs, len, channels});
  if (method == ScanMethod::parallel) {
    ScanInputs inp{Tensor({len, channels, n}), Tensor({len, channels, n}), Tensor({len, n})};
    for (std::size_t s = 0; s < seqs; ++s) {
      fill_scan_inputs(inp, s, uv.ptr(), b.value().ptr(), c.value().ptr(), a->ptr(), expm->ptr(), len, channels,
                       n);
      const Tensor ys = scan_parallel(inp);
      std::copy(ys.ptr(), ys.ptr() + len * channels, y.ptr() + s * len * channels);
    }
  } else {
    std::vector<double> h(width), abar(width), bbx(width);
    for (std::size_t s = 0; s < seqs; ++s) {
      std::fill(h.begin(), h.end(), 0.0);
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t row = s * len + t;
        step_inputs(abar.data(), bbx.data(), uv.ptr() + row * channels, b.value().ptr() + row * n, a->ptr(),
                    expm->ptr() + row * width, channels, n);
        for (std::size_t k = 0; k < width; ++k) h[k] = abar[k] * h[k] + bbx[k];
        readout(h.data(), c.value().ptr() + row * n, y.ptr() + row * channels, channels, n);
      }
    }
  }

  return u.tape()->record(std::move(y), {u, delta, a_log, b, c},
                          [u, delta, b, c, a, expm, seqs, len, channels, n](const Tensor& g, GradSink& sink) {
    Tensor* gu = sink.grad(0);
    Tensor* gdelta = sink.grad(1);
    Tensor* ga_log = sink.grad(2);
    Tensor* gb = sink.grad(3);
    Tensor* gc = sink.grad(4);
    const double* uv = u.value().ptr();
    const double* dv = delta.value().ptr();
    const double* bv = b.value().ptr();
    const double* cv = c.value().ptr();
    const double* av = a->ptr();
    const std::size_t width = channels * n;
    std::vector<double> ga(width, 0.0);
    // States h_0..h_L per sequence (h_0 = 0) and the running adjoint.
    std::vector<double> h((len + 1) * width), lambda(width), abar(width), bbx(width), abar_next(width);
    for (std::size_t s = 0; s < seqs; ++s) {
      std::fill(h.begin(), h.begin() + width, 0.0);
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t row = s * len + t;
        step_inputs(abar.data(), bbx.data(), uv + row * channels, bv + row * n, av, expm->ptr() + row * width,
                    channels, n);
        const double* prev = h.data() + t * width;
        double* cur = h.data() + (t + 1) * width;
        for (std::size_t k = 0; k < width; ++k) cur[k] = abar[k] * prev[k] + bbx[k];
      }
      std::fill(lambda.begin(), lambda.end(), 0.0);
      for (std::size_t t = len; t-- > 0;) {
        const std::size_t row = s * len + t;
        const double* gy = g.ptr() + row * channels;
        const double* ct = cv + row * n;
        const double* ht = h.data() + (t + 1) * width;
        const double* hprev = h.data() + t * width;
        const double* e = expm->ptr() + row * width;
        const double* bt = bv + row * n;
        if (gc) {
          double* gct = gc->ptr() + row * n;
          for (std::size_t d = 0; d < channels; ++d) {
            for (std::size_t i = 0; i < n; ++i) gct[i] += gy[d] * ht[d * n + i];
          }
        }
        // lambda_t = dy_t/dh_t + a_{t+1} lambda_{t+1}
        if (t + 1 < len) {
          for (std::size_t k = 0; k < width; ++k) lambda[k] *= abar_next[k];
        }
        for (std::size_t d = 0; d < channels; ++d) {
          for (std::size_t i = 0; i < n; ++i) lambda[d * n + i] += gy[d] * ct[i];
        }
        double* gbt = gb ? gb->ptr() + row * n : nullptr;
        for (std::size_t d = 0; d < channels; ++d) {
          const double xv = uv[row * channels + d];
          const double dt = dv[row * channels + d];
          double g_u = 0.0, g_dt = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = d * n + i;
            const double ad = av[k];
            const double ab = 1.0 + e[k];
            const double g_a = lambda[k] * hprev[k];
            const double g_bx = lambda[k];
            const double g_bbar = g_bx * xv;
            g_u += g_bx * (e[k] / ad * bt[i]);
            g_dt += g_a * ad * ab + g_bbar * ab * bt[i];
            ga[k] += g_a * dt * ab + g_bbar * bt[i] * zoh_b_grad_a(dt, dt * ad, ab, e[k]);
            if (gbt) gbt[i] += g_bbar * e[k] / ad;
            abar_next[k] = ab;
          }
          if (gu) (*gu)[row * channels + d] += g_u;
          if (gdelta) (*gdelta)[row * channels + d] += g_dt;
        }
      }
    }
    if (ga_log) {
      for (std::size_t k = 0; k < width; ++k) (*ga_log)[k] += ga[k] * av[k];
    }
  });
}

}  // namespace ad

Var ssm_forward(const Var& x, SsmParams& params, ScanMethod method) {
  Tape& tape = *x.tape();
  if (x.value().rank() != 3 || x.dim(2) != params.channels()) {
    throw ShapeError("ssm: input " + shape_str(x.shape()) + " for " + std::to_string(params.channels()) +
                     " channels");
  }
  const Var b = ad::matmul(x, tape.param(params.w_b));
  const Var c = ad::matmul(x, tape.param(params.w_c));
  const Var proj = ad::matmul(x, tape.param(params.w_delta));  // [S, L, 1]
  const Var delta = ad::softplus(ad::add(proj, tape.param(params.delta_bias)));
  return ad::selective_scan(x, delta, tape.param(params.a_log), b, c, method);
}

}  // namespace posemagic
