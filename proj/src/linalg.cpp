#include "clover/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "clover/simd/kernels.hpp"

namespace clover {

Tensor SVDFactors::reconstruct() const {
  Tensor us = u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= s[j];
  return matmul(us, v);
}

QRFactors householder_qr(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("householder_qr: expected a matrix, got " + shape_to_string(a.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  if (m < n) {
    throw ShapeError("householder_qr: need rows >= cols, got " + shape_to_string(a.shape()));
  }

  // Rows of `work` are the columns of a, so reflections act on contiguous memory.
  Tensor work = transpose(a);
  std::vector<std::vector<double>> reflectors(n);

  for (std::size_t k = 0; k < n; ++k) {
    auto col = work.row(k).subspan(k);
    const double norm = std::sqrt(simd::dot(col, col));
    if (norm == 0.0) continue;  // H_k = I
    const double alpha = col[0] > 0.0 ? -norm : norm;
    std::vector<double> v(col.begin(), col.end());
    v[0] -= alpha;
    const double vnorm = std::sqrt(simd::dot(v, v));
    if (vnorm == 0.0) continue;
    simd::scal(1.0 / vnorm, v);
    for (std::size_t j = k; j < n; ++j) {
      auto target = work.row(j).subspan(k);
      simd::axpy(-2.0 * simd::dot(v, target), v, target);
    }
    // Column k is now alpha*e_1 up to rounding; store it exactly.
    col[0] = alpha;
    std::fill(col.begin() + 1, col.end(), 0.0);
    reflectors[k] = std::move(v);
  }

  Tensor r({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) r(i, j) = work(j, i);

  // Q = H_0 ... H_{n-1} [I_n; 0], built column-wise in the rows of qt.
  Tensor qt({n, m});
  for (std::size_t j = 0; j < n; ++j) qt(j, j) = 1.0;
  for (std::size_t k = n; k-- > 0;) {
    const auto& v = reflectors[k];
    if (v.empty()) continue;
    for (std::size_t j = 0; j < n; ++j) {
      auto target = qt.row(j).subspan(k);
      simd::axpy(-2.0 * simd::dot(v, target), v, target);
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (r(i, i) < 0.0) {
      for (std::size_t j = i; j < n; ++j) r(i, j) = -r(i, j);
      simd::scal(-1.0, qt.row(i));
    }
  }
  return {transpose(qt), std::move(r)};
}

namespace {

double vector_norm(std::span<const double> x) {
  double big = 0.0;
  for (double v : x) big = std::max(big, std::abs(v));
  if (big == 0.0) return 0.0;
  double sum = 0.0;
  for (double v : x) {
    const double r = v / big;
    sum += r * r;
  }
  return big * std::sqrt(sum);
}

// Flip column j of u (stored as row j of ut) and row j of v so the first
// entry of magnitude above 1e-12 is positive.
void normalize_sign(Tensor& ut, Tensor& v, std::size_t j) {
  for (double x : ut.row(j)) {
    if (std::abs(x) > 1e-12) {
      if (x < 0.0) {
        simd::scal(-1.0, ut.row(j));
        simd::scal(-1.0, v.row(j));
      }
      return;
    }
  }
}

// Replace row j of ut with a unit vector orthogonal to every row in `basis`,
// picking the standard basis vector with the largest residual.
void complete_basis(Tensor& ut, std::size_t j, const std::vector<std::size_t>& basis) {
  const std::size_t m = ut.cols();
  std::vector<double> best;
  double best_norm = -1.0;
  std::vector<double> cand(m);
  for (std::size_t k = 0; k < m; ++k) {
    std::fill(cand.begin(), cand.end(), 0.0);
    cand[k] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t b : basis) simd::axpy(-simd::dot(ut.row(b), cand), ut.row(b), cand);
    }
    const double nrm = vector_norm(cand);
    if (nrm > best_norm + 1e-12) {
      best_norm = nrm;
      best = cand;
    }
  }
  simd::scal(1.0 / best_norm, best);
  std::copy(best.begin(), best.end(), ut.row(j).begin());
}

SVDFactors jacobi_svd_tall(const Tensor& a, const JacobiOptions& options) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor bt = transpose(a);  // rows are the working columns
  Tensor vt = Tensor::identity(n);

  double residual = 0.0;
  bool converged = false;
  for (int sweep = 0; sweep < options.max_sweeps && !converged; ++sweep) {
    converged = true;
    residual = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double alpha = simd::dot(bt.row(p), bt.row(p));
        const double beta = simd::dot(bt.row(q), bt.row(q));
        const double gamma = simd::dot(bt.row(p), bt.row(q));
        if (gamma == 0.0) continue;
        const double scale = std::sqrt(alpha) * std::sqrt(beta);
        residual = std::max(residual, std::abs(gamma) / scale);
        if (std::abs(gamma) <= options.tolerance * scale) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        double t;
        if (std::abs(zeta) > 1e150) {
          t = 0.5 / zeta;
        } else {
          t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        }
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        simd::rotate(c, s, bt.row(p), bt.row(q));
        simd::rotate(c, s, vt.row(p), vt.row(q));
      }
    }
  }
  if (!converged) {
    std::ostringstream os;
    os << "jacobi_svd: no convergence after " << options.max_sweeps << " sweeps, off-diagonal residual "
       << residual;
    throw ConvergenceError(os.str(), residual);
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) sigma[j] = vector_norm(bt.row(j));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  Tensor ut({n, m});
  Tensor v({n, n});
  Tensor s({n});
  std::vector<std::size_t> good;
  std::vector<std::size_t> empty;
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = order[j];
    std::copy(vt.row(src).begin(), vt.row(src).end(), v.row(j).begin());
    const double sv = sigma[src];
    if (sv > 0.0 && std::isnormal(sv)) {
      s[j] = sv;
      auto dst = ut.row(j);
      std::copy(bt.row(src).begin(), bt.row(src).end(), dst.begin());
      simd::scal(1.0 / sv, dst);
      good.push_back(j);
    } else {
      empty.push_back(j);
    }
  }
  for (std::size_t j : empty) {
    complete_basis(ut, j, good);
    good.push_back(j);
  }
  for (std::size_t j = 0; j < n; ++j) normalize_sign(ut, v, j);
  return {transpose(ut), std::move(s), std::move(v)};
}

}  // namespace

SVDFactors jacobi_svd(const Tensor& a, const JacobiOptions& options) {
  if (a.rank() != 2) throw ShapeError("jacobi_svd: expected a matrix, got " + shape_to_string(a.shape()));
  if (a.rows() >= a.cols()) return jacobi_svd_tall(a, options);
  // Wide input: a^T = U S V  =>  a = V^T S U^T.
  SVDFactors t = jacobi_svd_tall(transpose(a), options);
  Tensor v = transpose(t.u);  // [r, n]
  Tensor ut_rows = t.v;       // rows are the columns of the new u
  for (std::size_t j = 0; j < t.s.size(); ++j) normalize_sign(ut_rows, v, j);
  return {transpose(ut_rows), std::move(t.s), std::move(v)};
}

SVDFactors product_svd(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("product_svd: incompatible factors " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  const std::size_t d = a.cols();
  if (d > a.rows() || d > b.cols()) {
    throw ShapeError("product_svd: inner extent " + std::to_string(d) + " exceeds outer extents of " +
                     shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  }
  const QRFactors left = householder_qr(a);
  const QRFactors right = householder_qr(transpose(b));
  const SVDFactors core = jacobi_svd(matmul(left.r, transpose(right.r)));

  Tensor ut = transpose(matmul(left.q, core.u));
  Tensor v = matmul(core.v, transpose(right.q));
  for (std::size_t j = 0; j < d; ++j) normalize_sign(ut, v, j);
  return {transpose(ut), core.s, std::move(v)};
}

double orthonormality_error(const Tensor& q) {
  if (q.rank() != 2) throw ShapeError("orthonormality_error: expected a matrix");
  const Tensor qt = transpose(q);
  double err = 0.0;
  for (std::size_t i = 0; i < qt.rows(); ++i) {
    for (std::size_t j = 0; j < qt.rows(); ++j) {
      const double g = simd::dot(qt.row(i), qt.row(j)) - (i == j ? 1.0 : 0.0);
      err = std::max(err, std::abs(g));
    }
  }
  return err;
}

double row_orthonormality_error(const Tensor& q) { return orthonormality_error(transpose(q)); }

}  // namespace clover
