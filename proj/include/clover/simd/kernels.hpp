#pragma once

// Inner-loop kernels with a scalar reference and SIMD variants chosen at
// runtime. Every variant reproduces the scalar rounding sequence exactly:
// no FMA, and dot products use four interleaved partial sums in all backends.

#include <cstddef>
#include <span>
#include <string_view>

namespace clover::simd {

enum class Backend { scalar, avx2, neon };

std::string_view backend_name(Backend b);

// Best backend the running CPU supports.
Backend detect_backend();
bool backend_available(Backend b);

Backend active_backend();
// Throws std::invalid_argument if `b` is not available on this CPU/build.
void set_backend(Backend b);

// y[i] += a * x[i]
void axpy(double a, std::span<const double> x, std::span<double> y);

// Four-lane striped sum of x[i]*y[i]; tail elements added sequentially after
// the lane reduction (l0 + l1) + (l2 + l3).
double dot(std::span<const double> x, std::span<const double> y);

// Plane rotation: x' = c*x - s*y, y' = s*x + c*y.
void rotate(double c, double s, std::span<double> x, std::span<double> y);

// x[i] *= a
void scal(double a, std::span<double> x);

// Raw per-backend entry points, for equivalence tests.
struct KernelTable {
  void (*axpy)(double, const double*, double*, std::size_t);
  double (*dot)(const double*, const double*, std::size_t);
  void (*rotate)(double, double, double*, double*, std::size_t);
  void (*scal)(double, double*, std::size_t);
};

const KernelTable& kernels_for(Backend b);

}  // namespace clover::simd
