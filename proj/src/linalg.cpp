#include "mea/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mea/error.hpp"

namespace mea {

namespace {

// Columns are stored contiguously (column-major work arrays) so the Jacobi
// rotations touch contiguous memory.
struct ColumnMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;
  double* col(std::size_t j) { return data.data() + j * rows; }
  const double* col(std::size_t j) const { return data.data() + j * rows; }
};

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Completes column j of u (whose norm is zero) to a unit vector orthogonal
// to the columns in `done`.
void complete_column(ColumnMatrix& u, std::size_t j, const std::vector<std::size_t>& done) {
  for (std::size_t e = 0; e < u.rows; ++e) {
    double* c = u.col(j);
    std::fill_n(c, u.rows, 0.0);
    c[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t k : done) {
        const double p = dot(c, u.col(k), u.rows);
        for (std::size_t i = 0; i < u.rows; ++i) c[i] -= p * u.col(k)[i];
      }
    const double nrm = std::sqrt(dot(c, c, u.rows));
    if (nrm > 1e-6) {
      for (std::size_t i = 0; i < u.rows; ++i) c[i] /= nrm;
      return;
    }
  }
  throw NumericError("svd: could not complete orthonormal basis", 0.0);
}

// Requires m >= n.
SvdResult jacobi_tall(const Tensor& a, const SvdOptions& opts) {
  const std::size_t m = a.dim(0), n = a.dim(1);
  ColumnMatrix u{m, n, std::vector<double>(m * n)};
  ColumnMatrix v{n, n, std::vector<double>(n * n, 0.0)};
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) u.col(j)[i] = a.at(i, j);
  for (std::size_t j = 0; j < n; ++j) v.col(j)[j] = 1.0;

  bool converged = false;
  double worst = 0.0;
  for (int sweep = 0; sweep < opts.max_sweeps && !converged; ++sweep) {
    converged = true;
    worst = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        double* up = u.col(p);
        double* uq = u.col(q);
        const double alpha = dot(up, up, m);
        const double beta = dot(uq, uq, m);
        const double gamma = dot(up, uq, m);
        if (gamma == 0.0) continue;
        const double off = std::abs(gamma) / std::sqrt(alpha * beta);
        worst = std::max(worst, off);
        if (off <= opts.tolerance) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = up[i], y = uq[i];
          up[i] = c * x - s * y;
          uq[i] = s * x + c * y;
        }
        double* vp = v.col(p);
        double* vq = v.col(q);
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i], y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
  }
  if (!converged)
    throw NumericError("svd: one-sided Jacobi did not converge within " +
                           std::to_string(opts.max_sweeps) + " sweeps",
                       worst);

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) norms[j] = std::sqrt(dot(u.col(j), u.col(j), m));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  const double scale_ref = norms[order[0]];
  const double zero_cut = std::max(scale_ref, 1.0) * 1e-300;
  SvdResult out{Tensor({m, n}), Tensor({n}), Tensor({n, n})};
  ColumnMatrix uo{m, n, std::vector<double>(m * n)};
  std::vector<std::size_t> done;
  std::vector<std::size_t> deficient;
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t j = order[r];
    out.sigma[r] = norms[j];
    if (norms[j] > zero_cut) {
      for (std::size_t i = 0; i < m; ++i) uo.col(r)[i] = u.col(j)[i] / norms[j];
      done.push_back(r);
    } else {
      out.sigma[r] = 0.0;
      deficient.push_back(r);
    }
    for (std::size_t i = 0; i < n; ++i) out.vt.at(r, i) = v.col(j)[i];
  }
  for (std::size_t r : deficient) {
    complete_column(uo, r, done);
    done.push_back(r);
  }
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t r = 0; r < n; ++r) out.u.at(i, r) = uo.col(r)[i];
  return out;
}

}  // namespace

SvdResult svd(const Tensor& a, const SvdOptions& opts) {
  require_rank(a, 2, "svd");
  if (!a.all_finite()) throw ContractError("svd: input has non-finite entries");
  if (a.dim(0) >= a.dim(1)) return jacobi_tall(a, opts);
  SvdResult t = jacobi_tall(transpose(a), opts);
  return SvdResult{transpose(t.vt), std::move(t.sigma), transpose(t.u)};
}

Tensor svd_reconstruct(const SvdResult& s, std::size_t k) {
  const std::size_t m = s.u.dim(0), r = s.sigma.size(), n = s.vt.dim(1);
  if (k > r) throw ContractError("svd_reconstruct: rank exceeds available singular values");
  Tensor out({m, n});
  for (std::size_t t = 0; t < k; ++t)
    for (std::size_t i = 0; i < m; ++i) {
      const double ui = s.u.at(i, t) * s.sigma[t];
      if (ui == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) += ui * s.vt.at(t, j);
    }
  return out;
}

}  // namespace mea
