#include "clover/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "clover/simd/kernels.hpp"

namespace clover {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
  for (auto e : shape_) {
    if (e == 0) throw ShapeError("tensor extents must be positive: " + shape_to_string(shape_));
  }
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto e : shape_) {
    if (e == 0) throw ShapeError("tensor extents must be positive: " + shape_to_string(shape_));
  }
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_to_string(shape_));
  }
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged rows in from_rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::slab(std::size_t i) const {
  if (rank() < 2 || i >= shape_[0]) {
    throw ShapeError("slab " + std::to_string(i) + " out of range for " + shape_to_string(shape_));
  }
  Shape inner(shape_.begin() + 1, shape_.end());
  const std::size_t n = shape_numel(inner);
  return Tensor(std::move(inner), std::vector<double>(data_.begin() + i * n, data_.begin() + (i + 1) * n));
}

void Tensor::set_slab(std::size_t i, const Tensor& m) {
  Shape inner(shape_.begin() + 1, shape_.end());
  if (i >= shape_.at(0) || m.shape() != inner) {
    throw ShapeError("set_slab: " + shape_to_string(m.shape()) + " into " + shape_to_string(shape_));
  }
  std::copy(m.values().begin(), m.values().end(), data_.begin() + i * m.size());
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

namespace {

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + ": expected a matrix, got " + shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner extents differ, " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols();
  Tensor c({m, b.cols()});
  for (std::size_t i = 0; i < m; ++i) {
    auto out = c.row(i);
    for (std::size_t p = 0; p < k; ++p) simd::axpy(a(i, p), b.row(p), out);
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor c = a;
  simd::axpy(1.0, b.data(), c.data());
  return c;
}

Tensor subtract(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "subtract");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor c = a;
  simd::scal(factor, c.data());
  return c;
}

double frobenius_norm(const Tensor& a) {
  // Scaled sum of squares so tiny and huge entries neither underflow nor overflow.
  const double big = max_abs(a);
  if (big == 0.0) return 0.0;
  double sum = 0.0;
  for (double v : a.values()) {
    const double r = v / big;
    sum += r * r;
  }
  return big * std::sqrt(sum);
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double relative_frobenius_error(const Tensor& approx, const Tensor& exact) {
  const double denom = frobenius_norm(exact);
  const double num = frobenius_norm(subtract(approx, exact));
  return denom == 0.0 ? num : num / denom;
}

MaskSpec MaskSpec::sliding_window(std::size_t width) {
  if (width == 0) throw std::invalid_argument("sliding window width must be positive");
  return {Kind::sliding_window, width, {}};
}

MaskSpec MaskSpec::explicit_grid(Tensor grid) {
  if (grid.rank() != 2 || grid.rows() != grid.cols()) {
    throw ShapeError("explicit mask grid must be square, got " + shape_to_string(grid.shape()));
  }
  return {Kind::explicit_grid, 0, std::move(grid)};
}

bool MaskSpec::allows(std::size_t query, std::size_t key) const {
  switch (kind) {
    case Kind::none: return true;
    case Kind::causal: return key <= query;
    case Kind::sliding_window: return key <= query && query - key < window;
    case Kind::explicit_grid: return grid(query, key) != 0.0;
  }
  return false;
}

void MaskSpec::validate(std::size_t seq_len) const {
  if (kind == Kind::sliding_window && window == 0) {
    throw std::invalid_argument("sliding window width must be positive");
  }
  if (kind != Kind::explicit_grid) return;
  if (grid.rank() != 2 || grid.rows() != seq_len || grid.cols() != seq_len) {
    throw ShapeError("explicit mask grid " + shape_to_string(grid.shape()) + " does not match sequence length " +
                     std::to_string(seq_len));
  }
  for (std::size_t i = 0; i < seq_len; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < seq_len && !any; ++j) any = grid(i, j) != 0.0;
    if (!any) throw std::invalid_argument("mask row " + std::to_string(i) + " allows no keys");
  }
}

std::string MaskSpec::name() const {
  switch (kind) {
    case Kind::none: return "none";
    case Kind::causal: return "causal";
    case Kind::sliding_window: return "window:" + std::to_string(window);
    case Kind::explicit_grid: return "explicit";
  }
  return "unknown";
}

MaskSpec parse_mask(const std::string& text) {
  if (text == "none") return MaskSpec::none();
  if (text == "causal") return MaskSpec::causal();
  if (text.rfind("window:", 0) == 0) {
    const std::string num = text.substr(7);
    std::size_t pos = 0;
    unsigned long long w = 0;
    try {
      w = std::stoull(num, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != num.size() || w == 0) throw std::invalid_argument("bad window width in mask '" + text + "'");
    return MaskSpec::sliding_window(static_cast<std::size_t>(w));
  }
  throw std::invalid_argument("unknown mask '" + text + "' (expected none, causal or window:W)");
}

Tensor softmax_rows(const Tensor& logits, const MaskSpec& mask) {
  if (logits.rank() < 2) throw ShapeError("softmax_rows: need at least 2 axes, got " + shape_to_string(logits.shape()));
  const std::size_t nq = logits.dim(logits.rank() - 2);
  const std::size_t nk = logits.dim(logits.rank() - 1);
  if (mask.kind != MaskSpec::Kind::none) {
    if (nq != nk) throw ShapeError("softmax_rows: masks need square logits, got " + shape_to_string(logits.shape()));
    if (mask.kind == MaskSpec::Kind::explicit_grid &&
        (mask.grid.rank() != 2 || mask.grid.rows() != nq || mask.grid.cols() != nk)) {
      throw ShapeError("explicit mask grid " + shape_to_string(mask.grid.shape()) + " does not match logits " +
                       shape_to_string(logits.shape()));
    }
  }
  Tensor out(logits.shape());
  const std::size_t batches = logits.size() / (nq * nk);
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  for (std::size_t bt = 0; bt < batches; ++bt) {
    for (std::size_t i = 0; i < nq; ++i) {
      const std::size_t base = (bt * nq + i) * nk;
      double peak = kNegInf;
      for (std::size_t j = 0; j < nk; ++j) {
        if (mask.allows(i, j)) peak = std::max(peak, logits[base + j]);
      }
      if (peak == kNegInf) {
        throw std::invalid_argument("softmax_rows: row " + std::to_string(i) + " of block " + std::to_string(bt) +
                                    " has no allowed keys");
      }
      double total = 0.0;
      for (std::size_t j = 0; j < nk; ++j) {
        const double e = mask.allows(i, j) ? std::exp(logits[base + j] - peak) : 0.0;
        out[base + j] = e;
        total += e;
      }
      const double inv = 1.0 / total;
      for (std::size_t j = 0; j < nk; ++j) out[base + j] *= inv;
    }
  }
  return out;
}

std::uint64_t checksum(const Tensor& t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (auto e : t.shape()) {
    const std::uint64_t v = e;
    feed(&v, sizeof v);
  }
  feed(t.values().data(), t.size() * sizeof(double));
  return h;
}

}  // namespace clover
