#pragma once

// Dense row-major float64 tensors and the handful of primitives attention
// needs: matmul, transpose, masked row softmax.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace clover {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor identity(std::size_t n);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-D access; no rank check in release builds.
  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * shape_[1], shape_[1]); }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * shape_[1], shape_[1]);
  }

  // Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  // Leading-axis slab: for shape [a, b, c] returns the [b, c] matrix at index i.
  Tensor slab(std::size_t i) const;
  void set_slab(std::size_t i, const Tensor& m);

  bool all_finite() const;
  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// C = A·B with a fixed i-k-j loop nest: each output element accumulates its
// k-terms in increasing order starting from +0.0.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

double frobenius_norm(const Tensor& a);
double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
double relative_frobenius_error(const Tensor& approx, const Tensor& exact);

struct MaskSpec {
  enum class Kind { none, causal, sliding_window, explicit_grid };

  Kind kind = Kind::none;
  std::size_t window = 0;  // sliding_window only
  Tensor grid;             // explicit_grid only: [n, n], nonzero = allowed

  static MaskSpec none() { return {}; }
  static MaskSpec causal() { return {Kind::causal, 0, {}}; }
  static MaskSpec sliding_window(std::size_t width);
  static MaskSpec explicit_grid(Tensor grid);

  // Sliding windows are causal: key j is visible from query i iff j <= i and i - j < window.
  bool allows(std::size_t query, std::size_t key) const;
  void validate(std::size_t seq_len) const;
  std::string name() const;
};

// `none`, `causal`, `window:W`.
MaskSpec parse_mask(const std::string& text);

// Softmax over the last axis of a [..., n_q, n_k] tensor with disallowed keys
// pinned to exactly zero.
Tensor softmax_rows(const Tensor& logits, const MaskSpec& mask = MaskSpec::none());

// Byte-level FNV-1a over the float payload and shape.
std::uint64_t checksum(const Tensor& t);

}  // namespace clover
