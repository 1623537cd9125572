#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mea {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles with an explicit shape.
///
/// A tensor of rank 0 is not used; scalars are shape {1}. Every shape entry
/// must be positive and data().size() always equals the product of the shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);
  /// Rectangular identity: ones on the leading diagonal.
  static Tensor eye(std::size_t rows, std::size_t cols);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const double& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const double& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Same data viewed under a different shape of equal size.
  Tensor reshaped(Shape shape) const;
  bool all_finite() const;
  double item() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

void require_rank(const Tensor& t, std::size_t rank, const char* what);
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

// Element-wise arithmetic; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
void axpy(double alpha, const Tensor& x, Tensor& y);

double frobenius_norm(const Tensor& a);
double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
double sum(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Row softmax over the last axis. Leading axes are treated as a batch of
/// matrices formed by the last two axes; with `causal`, entry (r, c) of each
/// matrix is masked when c > r.
Tensor softmax_rows(const Tensor& a, bool causal = false);

/// x / sqrt(mean(x^2) + eps) over the last axis, times `gain`. The gain shape
/// must be a trailing suffix of x's shape (e.g. {d} or {heads, d}).
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps);

/// einsum("n h' d, h' h -> n h d"): synthesizes h heads from h' components.
Tensor head_mix(const Tensor& t, const Tensor& w);

/// Swaps the first two axes of a rank-3 tensor (N x h x d <-> h x N x d).
Tensor swap01(const Tensor& t);

/// Columns [offset, offset + len) of the last axis.
Tensor slice_last(const Tensor& t, std::size_t offset, std::size_t len);

}  // namespace mea
