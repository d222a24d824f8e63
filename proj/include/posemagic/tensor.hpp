#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "posemagic/errors.hpp"

namespace posemagic {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t numel(const Shape& shape);

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty() && shape_.empty(); }
  /// Extent of `axis`; negative axes count from the back.
  std::size_t dim(int axis) const;

  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }
  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::initializer_list<std::size_t> index);
  double at(std::initializer_list<std::size_t> index) const;
  double item() const;

  void fill(double v);
  bool all_finite() const;
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<double> data_;
};

/// Resolves a possibly negative axis against `rank`.
std::size_t normalize_axis(int axis, std::size_t rank, const char* op);

/// Forward kernels. All are pure functions of their arguments.
namespace ops {

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// Sums `grad` down to `target` by reducing over broadcast axes.
Tensor reduce_to(const Tensor& grad, const Shape& target);

/// Matrix product over the last two axes; leading axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Visits the broadcast batch of two leading shapes as (out, a, b) batch indices.
void for_each_broadcast_batch(const Shape& a_lead, const Shape& b_lead,
                              const std::function<void(std::size_t, std::size_t, std::size_t)>& fn);

Tensor permute(const Tensor& a, std::span<const std::size_t> perm);
Tensor transpose(const Tensor& a, int axis0, int axis1);
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor flip(const Tensor& a, int axis);
Tensor softmax(const Tensor& a, int axis);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis, bool keepdim);

enum class Activation { relu, gelu, tanh, softplus };

double softplus(double x);
double gelu(double x);
Tensor activate(const Tensor& a, Activation kind);
/// Elementwise derivative of the activation, evaluated at the pre-activation `x`.
Tensor activate_grad(const Tensor& x, Activation kind);

}  // namespace ops

/// Row-major GEMM kernels used by matmul and its adjoint. All accumulate into C.
namespace kernels {

// C[M,N] += A[M,K] * B[K,N]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n);
// C[M,K] += A[M,N] * B[K,N]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k);
// C[K,N] += A[M,K]^T * B[M,N]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n);

}  // namespace kernels

}  // namespace posemagic
