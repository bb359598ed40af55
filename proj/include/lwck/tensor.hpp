#pragma once

// Dense tensor / matrix containers and the multilinear primitives shared by
// the decomposition, convolution and planning code.
//
// Storage is row-major double precision. Both containers are immutable once
// built; every operation returns a fresh value.

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lwck {

using Dims = std::vector<std::size_t>;

inline std::size_t element_count(std::span<const std::size_t> dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string dims_to_string(std::span<const std::size_t> dims) {
  std::string s;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(dims[i]);
  }
  return s;
}

class Tensor {
 public:
  Tensor() = default;

  /// Zero-filled tensor of the given extents.
  explicit Tensor(Dims dims) : dims_(std::move(dims)) {
    validate_dims();
    data_.assign(element_count(dims_), 0.0);
  }

  Tensor(Dims dims, std::vector<double> data) : dims_(std::move(dims)), data_(std::move(data)) {
    validate_dims();
    if (data_.size() != element_count(dims_))
      throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                  " does not match dims " + dims_to_string(dims_));
  }

  /// Builds a tensor by evaluating `f(flat_index)` for every element.
  template <typename F>
  static Tensor generate(Dims dims, F&& f) {
    const std::size_t n = element_count(dims);
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = f(i);
    return Tensor(std::move(dims), std::move(data));
  }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t dim(std::size_t mode) const { return dims_.at(mode); }
  std::size_t order() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::span<const double> data() const noexcept { return data_; }
  bool empty() const noexcept { return dims_.empty(); }

  double operator[](std::size_t flat) const { return data_[flat]; }

  /// Row-major flat offset of a multi-index.
  std::size_t offset(std::span<const std::size_t> idx) const {
    if (idx.size() != dims_.size()) throw std::invalid_argument("index arity does not match tensor order");
    std::size_t off = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (idx[k] >= dims_[k]) throw std::out_of_range("tensor index out of range");
      off = off * dims_[k] + idx[k];
    }
    return off;
  }

  double at(std::span<const std::size_t> idx) const { return data_[offset(idx)]; }
  double at(std::initializer_list<std::size_t> idx) const {
    return at(std::span<const std::size_t>(idx.begin(), idx.size()));
  }

  /// Same data viewed under different extents with equal element count.
  Tensor reshaped(Dims dims) const { return Tensor(std::move(dims), data_); }

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  void validate_dims() const {
    if (dims_.empty()) throw std::invalid_argument("tensor order must be at least 1");
    for (auto d : dims_)
      if (d == 0) throw std::invalid_argument("tensor dims must be positive, got " + dims_to_string(dims_));
  }

  Dims dims_;
  std::vector<double> data_;
};

class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {
    if (rows == 0 || cols == 0) throw std::invalid_argument("matrix extents must be positive");
  }

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0) throw std::invalid_argument("matrix extents must be positive");
    if (data_.size() != rows * cols)
      throw std::invalid_argument("matrix data length does not match " + std::to_string(rows) + "x" +
                                  std::to_string(cols));
  }

  template <typename F>
  static Matrix generate(std::size_t rows, std::size_t cols, F&& f) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) m.data_[i * cols + j] = f(i, j);
    return m;
  }

  static Matrix identity(std::size_t n) {
    return generate(n, n, [](std::size_t i, std::size_t j) { return i == j ? 1.0 : 0.0; });
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::span<const double> data() const noexcept { return data_; }

  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::vector<double> column(std::size_t j) const {
    std::vector<double> c(rows_);
    for (std::size_t i = 0; i < rows_; ++i) c[i] = (*this)(i, j);
    return c;
  }

  Tensor as_tensor() const { return Tensor({rows_, cols_}, data_); }

  friend bool operator==(const Matrix& a, const Matrix& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double sum_of_squares(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

inline double frobenius_norm(const Tensor& t) { return std::sqrt(sum_of_squares(t.data())); }
inline double frobenius_norm(const Matrix& m) { return std::sqrt(sum_of_squares(m.data())); }

inline Tensor matrix_to_tensor(const Matrix& m) { return m.as_tensor(); }

inline Matrix tensor_to_matrix(const Tensor& t) {
  if (t.order() != 2) throw std::invalid_argument("expected a 2nd-order tensor");
  return Matrix(t.dim(0), t.dim(1), std::vector<double>(t.data().begin(), t.data().end()));
}

namespace detail {

// Strides of the row-major layout.
inline std::vector<std::size_t> strides(const Dims& dims) {
  std::vector<std::size_t> s(dims.size(), 1);
  for (std::size_t k = dims.size(); k-- > 1;) s[k - 1] = s[k] * dims[k];
  return s;
}

inline void check_mode(const Dims& dims, std::size_t mode) {
  if (mode >= dims.size())
    throw std::out_of_range("mode " + std::to_string(mode) + " out of range for order-" +
                            std::to_string(dims.size()) + " tensor");
}

}  // namespace detail

/// Mode-`mode` matricization. Row index is the `mode` index; the column index
/// enumerates the remaining modes in ascending order, row-major (the last
/// remaining mode varies fastest). For a 3rd-order X(i,j,k):
///   mode 0 -> column j*K + k,  mode 1 -> column i*K + k,  mode 2 -> column i*J + j.
/// This matches khatri_rao(B, C) row ordering, so X_(0) = A * khatri_rao(B, C)^T.
inline Matrix unfold(const Tensor& t, std::size_t mode) {
  const auto& dims = t.dims();
  detail::check_mode(dims, mode);
  const std::size_t rows = dims[mode];
  const std::size_t cols = t.size() / rows;
  const auto st = detail::strides(dims);

  // Split the layout into (outer, mode, inner) blocks: flat = (o*rows + m)*inner + i
  // and the unfolded column is o*inner + i.
  const std::size_t inner = st[mode];
  const std::size_t outer = t.size() / (rows * inner);
  std::vector<double> out(t.size());
  auto src = t.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t m = 0; m < rows; ++m)
      for (std::size_t i = 0; i < inner; ++i) out[m * cols + o * inner + i] = src[(o * rows + m) * inner + i];
  return Matrix(rows, cols, std::move(out));
}

/// Inverse of unfold for a tensor of extents `dims`.
inline Tensor fold(const Matrix& m, std::size_t mode, const Dims& dims) {
  detail::check_mode(dims, mode);
  if (m.rows() != dims[mode] || m.rows() * m.cols() != element_count(dims))
    throw std::invalid_argument("matrix shape incompatible with fold target " + dims_to_string(dims));
  const std::size_t rows = dims[mode];
  const std::size_t inner = detail::strides(dims)[mode];
  const std::size_t outer = element_count(dims) / (rows * inner);
  std::vector<double> out(element_count(dims));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < inner; ++i) out[(o * rows + r) * inner + i] = m(r, o * inner + i);
  return Tensor(dims, std::move(out));
}

/// Column-wise Kronecker product; row index of the result is ia * b.rows() + ib.
inline Matrix khatri_rao(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols())
    throw std::invalid_argument("khatri_rao: column counts differ (" + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.cols()) + ")");
  const std::size_t rank = a.cols();
  std::vector<double> out(a.rows() * b.rows() * rank);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j)
      for (std::size_t r = 0; r < rank; ++r) out[(i * b.rows() + j) * rank + r] = a(i, r) * b(j, r);
  return Matrix(a.rows() * b.rows(), rank, std::move(out));
}

/// D x D x S x T kernel -> D^2 x S x T with spatial index j*D + i.
/// Row-major storage makes this a relabelling of extents.
inline Tensor reshape_kernel(const Tensor& k) {
  if (k.order() != 4) throw std::invalid_argument("reshape_kernel expects a 4th-order D x D x S x T kernel");
  if (k.dim(0) != k.dim(1)) throw std::invalid_argument("reshape_kernel expects square spatial dims");
  return k.reshaped({k.dim(0) * k.dim(1), k.dim(2), k.dim(3)});
}

inline Tensor unreshape_kernel(const Tensor& k3) {
  if (k3.order() != 3) throw std::invalid_argument("unreshape_kernel expects a 3rd-order D^2 x S x T tensor");
  const auto d = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(k3.dim(0)))));
  if (d * d != k3.dim(0)) throw std::invalid_argument("leading extent is not a perfect square");
  return k3.reshaped({d, d, k3.dim(1), k3.dim(2)});
}

/// ||x - y||_F / ||x||_F.
inline double relative_error(const Tensor& x, const Tensor& y) {
  if (x.dims() != y.dims())
    throw std::invalid_argument("relative_error: dims differ (" + dims_to_string(x.dims()) + " vs " +
                                dims_to_string(y.dims()) + ")");
  const double ref = frobenius_norm(x);
  if (ref == 0.0) throw std::invalid_argument("relative_error: reference tensor is zero");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    s += d * d;
  }
  return std::sqrt(s) / ref;
}

inline double distance(const Tensor& x, const Tensor& y) {
  if (x.dims() != y.dims()) throw std::invalid_argument("distance: dims differ");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline Tensor scaled(const Tensor& t, double alpha) {
  return Tensor::generate(t.dims(), [&](std::size_t i) { return alpha * t[i]; });
}

inline Tensor add(const Tensor& a, const Tensor& b, double beta = 1.0) {
  if (a.dims() != b.dims()) throw std::invalid_argument("add: dims differ");
  return Tensor::generate(a.dims(), [&](std::size_t i) { return a[i] + beta * b[i]; });
}

/// Moves the axes of `t` so that result axis k is source axis perm[k].
inline Tensor permute(const Tensor& t, std::span<const std::size_t> perm) {
  const auto& src_dims = t.dims();
  if (perm.size() != src_dims.size()) throw std::invalid_argument("permute: wrong permutation length");
  Dims out_dims(perm.size());
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t k = 0; k < perm.size(); ++k) {
    if (perm[k] >= perm.size() || seen[perm[k]]) throw std::invalid_argument("permute: not a permutation");
    seen[perm[k]] = true;
    out_dims[k] = src_dims[perm[k]];
  }
  const auto src_st = detail::strides(src_dims);
  std::vector<double> out(t.size());
  std::vector<std::size_t> idx(perm.size(), 0);
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < perm.size(); ++k) off += idx[k] * src_st[perm[k]];
    out[flat] = t[off];
    for (std::size_t k = perm.size(); k-- > 0;) {
      if (++idx[k] < out_dims[k]) break;
      idx[k] = 0;
    }
  }
  return Tensor(std::move(out_dims), std::move(out));
}

inline Tensor permute(const Tensor& t, std::initializer_list<std::size_t> perm) {
  return permute(t, std::span<const std::size_t>(perm.begin(), perm.size()));
}

}  // namespace lwck
