#include "posemagic/norm.hpp"

#include <cmath>

namespace posemagic {

namespace {

void check_affine(const Var* p, std::size_t channels, const char* op) {
  if (p && p->value().size() != channels) {
    throw ShapeError(std::string(op) + ": affine parameter of shape " + shape_str(p->shape()) +
                     " for " + std::to_string(channels) + " channels");
  }
}

// y = xhat * gamma + beta, where xhat is stored row-major with `channels` columns.
Tensor apply_affine(const Tensor& xhat, const Var* gamma, const Var* beta, std::size_t channels) {
  Tensor y = xhat;
  const std::size_t rows = xhat.size() / channels;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = y.ptr() + r * channels;
    for (std::size_t c = 0; c < channels; ++c) {
      if (gamma) row[c] *= gamma->value()[c];
      if (beta) row[c] += beta->value()[c];
    }
  }
  return y;
}

std::vector<Var> parents_of(const Var& x, const Var* gamma, const Var* beta) {
  std::vector<Var> parents{x};
  if (gamma) parents.push_back(*gamma);
  if (beta) parents.push_back(*beta);
  return parents;
}

}  // namespace

Var layer_norm(const Var& x, const Var* gamma, const Var* beta, double eps) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t channels = xv.dim(-1);
  check_affine(gamma, channels, "layer_norm");
  check_affine(beta, channels, "layer_norm");
  const std::size_t rows = xv.size() / channels;
  Tensor xhat(xv.shape());
  Tensor inv_std(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.ptr() + r * channels;
    double mu = 0.0;
    for (std::size_t c = 0; c < channels; ++c) mu += in[c];
    mu /= static_cast<double>(channels);
    double var = 0.0;
    for (std::size_t c = 0; c < channels; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(channels);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    double* out = xhat.ptr() + r * channels;
    for (std::size_t c = 0; c < channels; ++c) out[c] = (in[c] - mu) * is;
  }
  Tensor y = apply_affine(xhat, gamma, beta, channels);
  const bool has_gamma = gamma != nullptr, has_beta = beta != nullptr;
  const Var gamma_var = gamma ? *gamma : Var{};
  return x.tape()->record(
      std::move(y), parents_of(x, gamma, beta),
      [xhat, inv_std, channels, rows, has_gamma, has_beta, gamma_var](const Tensor& g, GradSink& s) {
        Tensor* gx = s.grad(0);
        Tensor* gg = has_gamma ? s.grad(1) : nullptr;
        Tensor* gb = has_beta ? s.grad(has_gamma ? 2 : 1) : nullptr;
        std::vector<double> gxhat(channels);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.ptr() + r * channels;
          const double* xr = xhat.ptr() + r * channels;
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::size_t c = 0; c < channels; ++c) {
            if (gg) (*gg)[c] += gr[c] * xr[c];
            if (gb) (*gb)[c] += gr[c];
            gxhat[c] = has_gamma ? gr[c] * gamma_var.value()[c] : gr[c];
            mean_g += gxhat[c];
            mean_gx += gxhat[c] * xr[c];
          }
          if (!gx) continue;
          mean_g /= static_cast<double>(channels);
          mean_gx /= static_cast<double>(channels);
          double* out = gx->ptr() + r * channels;
          for (std::size_t c = 0; c < channels; ++c) {
            out[c] += inv_std[r] * (gxhat[c] - mean_g - xr[c] * mean_gx);
          }
        }
      });
}

Var batch_norm(const Var& x, const Var* gamma, const Var* beta, BatchNormState& state, Mode mode,
               double eps) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("batch_norm: scalar input");
  const std::size_t channels = xv.dim(-1);
  check_affine(gamma, channels, "batch_norm");
  check_affine(beta, channels, "batch_norm");
  if (state.running_mean.size() != channels) {
    throw ShapeError("batch_norm: state has " + std::to_string(state.running_mean.size()) +
                     " channels, input " + shape_str(xv.shape()));
  }
  const std::size_t rows = xv.size() / channels;
  Tensor mean(Shape{channels});
  Tensor var(Shape{channels});
  if (mode == Mode::train) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < channels; ++c) mean[c] += xv[r * channels + c];
    }
    for (std::size_t c = 0; c < channels; ++c) mean[c] /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < channels; ++c) {
        const double d = xv[r * channels + c] - mean[c];
        var[c] += d * d;
      }
    }
    for (std::size_t c = 0; c < channels; ++c) {
      const double biased = var[c] / static_cast<double>(rows);
      const double unbiased = rows > 1 ? var[c] / static_cast<double>(rows - 1) : biased;
      var[c] = biased;
      state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mean[c];
      state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }
  Tensor inv_std(Shape{channels});
  for (std::size_t c = 0; c < channels; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  Tensor xhat(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < channels; ++c) {
      xhat[r * channels + c] = (xv[r * channels + c] - mean[c]) * inv_std[c];
    }
  }
  Tensor y = apply_affine(xhat, gamma, beta, channels);
  const bool has_gamma = gamma != nullptr, has_beta = beta != nullptr;
  const bool training = mode == Mode::train;
  const Var gamma_var = gamma ? *gamma : Var{};
  return x.tape()->record(
      std::move(y), parents_of(x, gamma, beta),
      [xhat, inv_std, channels, rows, has_gamma, has_beta, training, gamma_var](const Tensor& g, GradSink& s) {
        Tensor* gx = s.grad(0);
        Tensor* gg = has_gamma ? s.grad(1) : nullptr;
        Tensor* gb = has_beta ? s.grad(has_gamma ? 2 : 1) : nullptr;
        std::vector<double> sum_g(channels, 0.0), sum_gx(channels, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < channels; ++c) {
            const double gv = g[r * channels + c];
            const double xh = xhat[r * channels + c];
            if (gg) (*gg)[c] += gv * xh;
            if (gb) (*gb)[c] += gv;
            const double gxh = has_gamma ? gv * gamma_var.value()[c] : gv;
            sum_g[c] += gxh;
            sum_gx[c] += gxh * xh;
          }
        }
        if (!gx) return;
        const double inv_rows = 1.0 / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < channels; ++c) {
            const double gv = g[r * channels + c];
            const double gxh = has_gamma ? gv * gamma_var.value()[c] : gv;
            double v = gxh;
            if (training) v -= (sum_g[c] + xhat[r * channels + c] * sum_gx[c]) * inv_rows;
            (*gx)[r * channels + c] += inv_std[c] * v;
          }
        }
      });
}

}  // namespace posemagic
