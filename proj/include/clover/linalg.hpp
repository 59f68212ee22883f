#pragma once

// Householder QR, one-sided Jacobi SVD, and the thin SVD of a rank-d product
// computed without forming it.

#include <stdexcept>
#include <string>

#include "clover/tensor.hpp"

namespace clover {

struct QRFactors {
  Tensor q;  // [m, n], orthonormal columns
  Tensor r;  // [n, n], upper triangular, diag >= 0
};

struct SVDFactors {
  Tensor u;  // [m, r], orthonormal columns
  Tensor s;  // [r], nonincreasing, >= 0
  Tensor v;  // [r, n], orthonormal rows

  std::size_t rank() const { return s.size(); }
  // u * diag(s) * v
  Tensor reconstruct() const;
};

class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double residual) : std::runtime_error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

// Thin QR of a tall matrix (m >= n).
QRFactors householder_qr(const Tensor& a);

struct JacobiOptions {
  double tolerance = 1e-14;
  int max_sweeps = 60;
};

// Thin SVD, r = min(m, n). Columns of u are sign-normalized so their first
// entry of magnitude above 1e-12 is positive; v rows follow.
SVDFactors jacobi_svd(const Tensor& a, const JacobiOptions& options = {});

// Thin SVD of a·b for a: [D, d], b: [d, D'] with d <= min(D, D'). Returns r = d.
SVDFactors product_svd(const Tensor& a, const Tensor& b);

// max |q^T q - I|
double orthonormality_error(const Tensor& q);

// max |q q^T - I| for a matrix with orthonormal rows.
double row_orthonormality_error(const Tensor& q);

}  // namespace clover
