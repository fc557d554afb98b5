#pragma once

#include <cassert>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace lgmae {

// Row-major 2D buffer. The single tensor type used throughout: token
// sequences are [n, C], weights are [in, out], flattened frames are rows.
template <typename T>
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, T(0)) {}
  Matrix(int r, int c, T fill) : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

  T* row(int i) { return data.data() + static_cast<size_t>(i) * cols; }
  const T* row(int i) const { return data.data() + static_cast<size_t>(i) * cols; }
  T& at(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
  const T& at(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }
  size_t size() const { return data.size(); }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }
  void zero() { fill(T(0)); }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// Multiply-accumulate instrumentation. Thread-local so instrumented runs
// are single-threaded by construction; analytic counters must match these
// totals exactly on matmul terms.
struct MacCounter {
  static thread_local bool enabled;
  static thread_local std::uint64_t macs;

  static void reset() { macs = 0; }
  static void add(std::uint64_t n) {
    if (enabled) macs += n;
  }
};

inline thread_local bool MacCounter::enabled = false;
inline thread_local std::uint64_t MacCounter::macs = 0;

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

// out = a * b, [n,k] x [k,m]. ikj order so the inner loop runs over
// contiguous rows of b and out.
template <typename T>
void matmul(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  require_shape(a.cols == b.rows, "matmul: inner dims differ");
  out.rows = a.rows;
  out.cols = b.cols;
  out.data.assign(static_cast<size_t>(a.rows) * b.cols, T(0));
  const int n = a.rows, k = a.cols, m = b.cols;
  for (int i = 0; i < n; ++i) {
    T* __restrict__ orow = out.row(i);
    const T* __restrict__ arow = a.row(i);
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* __restrict__ brow = b.row(p);
      for (int j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  MacCounter::add(static_cast<std::uint64_t>(n) * k * m);
}

// out = a^T * b, a: [k,n], b: [k,m] -> [n,m]. Outer-product accumulation.
template <typename T>
void matmul_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  require_shape(a.rows == b.rows, "matmul_tn: leading dims differ");
  out.rows = a.cols;
  out.cols = b.cols;
  out.data.assign(static_cast<size_t>(a.cols) * b.cols, T(0));
  const int k = a.rows, n = a.cols, m = b.cols;
  for (int p = 0; p < k; ++p) {
    const T* __restrict__ arow = a.row(p);
    const T* __restrict__ brow = b.row(p);
    for (int i = 0; i < n; ++i) {
      const T av = arow[i];
      T* __restrict__ orow = out.row(i);
      for (int j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  MacCounter::add(static_cast<std::uint64_t>(k) * n * m);
}

// acc += a^T * b. Weight-gradient form: the inner dimension k is a token
// count, usually far smaller than the weight matrix, so the loop nest keeps
// each accumulator row hot across all k instead of sweeping the whole
// accumulator once per row of a.
template <typename T>
void matmul_tn_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& acc) {
  require_shape(a.rows == b.rows, "matmul_tn_acc: leading dims differ");
  require_shape(acc.rows == a.cols && acc.cols == b.cols, "matmul_tn_acc: acc shape");
  const int k = a.rows, n = a.cols, m = b.cols;
  for (int i = 0; i < n; ++i) {
    T* __restrict__ orow = acc.row(i);
    for (int p = 0; p < k; ++p) {
      const T av = a.at(p, i);
      const T* __restrict__ brow = b.row(p);
      for (int j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  MacCounter::add(static_cast<std::uint64_t>(k) * n * m);
}

// out = a * b^T, a: [n,k], b: [m,k] -> [n,m]. Row-dot form.
template <typename T>
void matmul_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  require_shape(a.cols == b.cols, "matmul_nt: trailing dims differ");
  out.rows = a.rows;
  out.cols = b.rows;
  out.data.assign(static_cast<size_t>(a.rows) * b.rows, T(0));
  const int n = a.rows, k = a.cols, m = b.rows;
  for (int i = 0; i < n; ++i) {
    const T* __restrict__ arow = a.row(i);
    T* __restrict__ orow = out.row(i);
    for (int j = 0; j < m; ++j) {
      const T* __restrict__ brow = b.row(j);
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      orow[j] = acc;
    }
  }
  MacCounter::add(static_cast<std::uint64_t>(n) * k * m);
}

template <typename T>
void add_inplace(Matrix<T>& a, const Matrix<T>& b) {
  require_shape(a.same_shape(b), "add_inplace: shape mismatch");
  for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

template <typename T>
void add_row_inplace(Matrix<T>& a, const std::vector<T>& bias) {
  require_shape(static_cast<size_t>(a.cols) == bias.size(), "add_row_inplace: bias length");
  for (int i = 0; i < a.rows; ++i) {
    T* r = a.row(i);
    for (int j = 0; j < a.cols; ++j) r[j] += bias[j];
  }
}

template <typename T>
void scale_inplace(Matrix<T>& a, T s) {
  for (auto& v : a.data) v *= s;
}

template <typename T>
Matrix<T> concat_rows(const Matrix<T>& a, const Matrix<T>& b) {
  require_shape(a.cols == b.cols, "concat_rows: column mismatch");
  Matrix<T> out(a.rows + b.rows, a.cols);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.data.size());
  return out;
}

// Named view into one parameter tensor. Weights structs enumerate these so
// the optimizer, checkpoint writer and gradient accumulators all share one
// registry; enumeration order is part of the checkpoint contract.
template <typename T>
struct ParamRef {
  std::string name;
  T* data = nullptr;
  size_t size = 0;
  std::vector<int> dims;
};

template <typename T>
void add_param(std::vector<ParamRef<T>>& out, const std::string& name, Matrix<T>& m) {
  out.push_back({name, m.data.data(), m.data.size(), {m.rows, m.cols}});
}

template <typename T>
void add_param(std::vector<ParamRef<T>>& out, const std::string& name, std::vector<T>& v) {
  out.push_back({name, v.data(), v.size(), {static_cast<int>(v.size())}});
}

}  // namespace lgmae
