#include "clover/simd/kernels.hpp"

#include <atomic>
#include <cassert>
#include <stdexcept>
#include <string>

namespace clover::simd {

#define CLOVER_DECLARE_BACKEND(ns)                                   \
  namespace ns {                                                     \
  void axpy(double, const double*, double*, std::size_t);            \
  double dot(const double*, const double*, std::size_t);             \
  void rotate(double, double, double*, double*, std::size_t);        \
  void scal(double, double*, std::size_t);                           \
  }

CLOVER_DECLARE_BACKEND(scalar)
#if defined(CLOVER_HAVE_AVX2)
CLOVER_DECLARE_BACKEND(avx2)
#endif
#if defined(CLOVER_HAVE_NEON)
CLOVER_DECLARE_BACKEND(neon)
#endif

#undef CLOVER_DECLARE_BACKEND

namespace {

constexpr KernelTable kScalar{scalar::axpy, scalar::dot, scalar::rotate, scalar::scal};
#if defined(CLOVER_HAVE_AVX2)
constexpr KernelTable kAvx2{avx2::axpy, avx2::dot, avx2::rotate, avx2::scal};
#endif
#if defined(CLOVER_HAVE_NEON)
constexpr KernelTable kNeon{neon::axpy, neon::dot, neon::rotate, neon::scal};
#endif

std::atomic<const KernelTable*>& active_table() {
  static std::atomic<const KernelTable*> table{&kernels_for(detect_backend())};
  return table;
}

std::atomic<Backend>& active_tag() {
  static std::atomic<Backend> tag{detect_backend()};
  return tag;
}

}  // namespace

std::string_view backend_name(Backend b) {
  switch (b) {
    case Backend::scalar: return "scalar";
    case Backend::avx2: return "avx2";
    case Backend::neon: return "neon";
  }
  return "unknown";
}

bool backend_available(Backend b) {
  switch (b) {
    case Backend::scalar: return true;
    case Backend::avx2:
#if defined(CLOVER_HAVE_AVX2)
      return __builtin_cpu_supports("avx2");
#else
      return false;
#endif
    case Backend::neon:
#if defined(CLOVER_HAVE_NEON)
      return true;
#else
      return false;
#endif
  }
  return false;
}

Backend detect_backend() {
  if (backend_available(Backend::avx2)) return Backend::avx2;
  if (backend_available(Backend::neon)) return Backend::neon;
  return Backend::scalar;
}

const KernelTable& kernels_for(Backend b) {
  if (!backend_available(b)) {
    throw std::invalid_argument("simd backend not available: " + std::string(backend_name(b)));
  }
  switch (b) {
#if defined(CLOVER_HAVE_AVX2)
    case Backend::avx2: return kAvx2;
#endif
#if defined(CLOVER_HAVE_NEON)
    case Backend::neon: return kNeon;
#endif
    default: return kScalar;
  }
}

Backend active_backend() { return active_tag().load(std::memory_order_relaxed); }

void set_backend(Backend b) {
  const KernelTable& table = kernels_for(b);
  active_table().store(&table, std::memory_order_relaxed);
  active_tag().store(b, std::memory_order_relaxed);
}

void axpy(double a, std::span<const double> x, std::span<double> y) {
  assert(x.size() == y.size());
  active_table().load(std::memory_order_relaxed)->axpy(a, x.data(), y.data(), x.size());
}

double dot(std::span<const double> x, std::span<const double> y) {
  assert(x.size() == y.size());
  return active_table().load(std::memory_order_relaxed)->dot(x.data(), y.data(), x.size());
}

void rotate(double c, double s, std::span<double> x, std::span<double> y) {
  assert(x.size() == y.size());
  active_table().load(std::memory_order_relaxed)->rotate(c, s, x.data(), y.data(), x.size());
}

void scal(double a, std::span<double> x) {
  active_table().load(std::memory_order_relaxed)->scal(a, x.data(), x.size());
}

}  // namespace clover::simd
