#include "mea/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "mea/error.hpp"

namespace mea {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor shape entries must be positive: " + shape_str(shape));
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (data_.size() != shape_size(shape_))
    throw DimensionError("data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
}

Tensor Tensor::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) { return eye(n, n); }

Tensor Tensor::eye(std::size_t rows, std::size_t cols) {
  Tensor t({rows, cols});
  for (std::size_t i = 0; i < std::min(rows, cols); ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& x : t.data_) x = dist(rng);
  return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& x : t.data_) x = dist(rng);
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  return shape_[axis];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size())
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

double Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape_));
  return data_[0];
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  for (auto& x : out.data()) x *= s;
  return out;
}

void axpy(double alpha, const Tensor& x, Tensor& y) {
  require_same_shape(x, y, "axpy");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

double frobenius_norm(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x * x;
  return std::sqrt(s);
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double x : a.data()) m = std::max(m, std::abs(x));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return s;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  Tensor out({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

Tensor softmax_rows(const Tensor& a, bool causal) {
  if (a.rank() < 2) throw DimensionError("softmax_rows: rank must be >= 2");
  const std::size_t cols = a.shape().back();
  const std::size_t rows_per_mat = a.shape()[a.rank() - 2];
  const std::size_t rows = a.size() / cols;
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  Tensor out(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = a.data().data() + r * cols;
    double* o = out.data().data() + r * cols;
    const std::size_t row_in_mat = r % rows_per_mat;
    double mx = kNegInf;
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = (causal && c > row_in_mat) ? kNegInf : in[c];
      o[c] = v;
      mx = std::max(mx, v);
    }
    double denom = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = (o[c] == kNegInf) ? 0.0 : std::exp(o[c] - mx);
      denom += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= denom;
  }
  return out;
}

namespace {

void check_gain(const Tensor& x, const Tensor& gain, const char* what) {
  if (gain.rank() > x.rank() ||
      !std::equal(gain.shape().rbegin(), gain.shape().rend(), x.shape().rbegin()))
    throw DimensionError(std::string(what) + ": gain " + shape_str(gain.shape()) +
                         " is not a trailing suffix of " + shape_str(x.shape()));
}

}  // namespace

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  check_gain(x, gain, "rms_norm");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  const std::size_t gsize = gain.size();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * d;
    double ms = 0.0;
    for (std::size_t c = 0; c < d; ++c) ms += in[c] * in[c];
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const std::size_t flat = r * d + c;
      out[flat] = in[c] * inv * gain[flat % gsize];
    }
  }
  return out;
}

Tensor head_mix(const Tensor& t, const Tensor& w) {
  require_rank(t, 3, "head_mix input");
  require_rank(w, 2, "head_mix weights");
  const std::size_t n = t.dim(0), hp = t.dim(1), d = t.dim(2), h = w.dim(1);
  if (w.dim(0) != hp)
    throw DimensionError("head_mix: input has " + std::to_string(hp) + " heads but weights are " +
                         shape_str(w.shape()));
  Tensor out({n, h, d});
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t j = 0; j < h; ++j) {
      double* o = &out.at(p, j, 0);
      for (std::size_t i = 0; i < hp; ++i) {
        const double wij = w.at(i, j);
        const double* in = t.data().data() + (p * hp + i) * d;
        for (std::size_t k = 0; k < d; ++k) o[k] += in[k] * wij;
      }
    }
  return out;
}

Tensor swap01(const Tensor& t) {
  require_rank(t, 3, "swap01");
  const std::size_t a = t.dim(0), b = t.dim(1), c = t.dim(2);
  Tensor out({b, a, c});
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j)
      std::copy_n(t.data().data() + (i * b + j) * c, c, &out.at(j, i, 0));
  return out;
}

Tensor slice_last(const Tensor& t, std::size_t offset, std::size_t len) {
  const std::size_t d = t.shape().back();
  if (len == 0 || offset + len > d)
    throw DimensionError("slice_last: [" + std::to_string(offset) + ", " +
                         std::to_string(offset + len) + ") out of range for " + shape_str(t.shape()));
  Shape shape = t.shape();
  shape.back() = len;
  Tensor out(shape);
  const std::size_t rows = t.size() / d;
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(t.data().data() + r * d + offset, len, out.data().data() + r * len);
  return out;
}

}  // namespace mea
