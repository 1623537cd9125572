#pragma once

#include "mea/tensor.hpp"

namespace mea {

/// Thin SVD a = u * diag(sigma) * vt with r = min(m, n).
struct SvdResult {
  Tensor u;      // m x r, orthonormal columns
  Tensor sigma;  // r, descending, nonnegative
  Tensor vt;     // r x n, orthonormal rows
};

struct SvdOptions {
  int max_sweeps = 100;
  double tolerance = 1e-12;
};

/// One-sided Jacobi SVD. Throws NumericError if the sweep cap is reached
/// before every column pair is orthogonal to `tolerance`.
SvdResult svd(const Tensor& a, const SvdOptions& opts = {});

/// u[:, :k] * diag(sigma[:k]) * vt[:k, :]
Tensor svd_reconstruct(const SvdResult& s, std::size_t k);

}  // namespace mea
