#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include "slotdiff/rng.hpp"

namespace slotdiff {

template <typename S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<MatrixRM<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const MatrixRM<S>>;
template <typename S>
using VecMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;
template <typename S>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;

inline int64_t numel_of(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: nonpositive dimension");
    n *= d;
  }
  return n;
}

// 64-byte-aligned storage keeps Eigen's vectorized kernels on one code path
// regardless of heap history, so results are bit-stable run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(size_t n) {
    if (n == 0) return nullptr;
    void* p = ::operator new(n * sizeof(T), std::align_val_t(64));
    return static_cast<T*>(p);
  }
  void deallocate(T* p, size_t) noexcept { ::operator delete(p, std::align_val_t(64)); }
  bool operator==(const AlignedAllocator&) const { return true; }
  bool operator!=(const AlignedAllocator&) const { return false; }
};

template <typename T>
using AlignedVec = std::vector<T, AlignedAllocator<T>>;

// Dense row-major N-d array. The universal value type of the library;
// float for runtime compute, double for oracles and gradient checks.
template <typename S>
struct Tensor {
  std::vector<int> shape;
  AlignedVec<S> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> shp)
      : shape(std::move(shp)), data(size_t(numel_of(shape)), S(0)) {}
  Tensor(std::vector<int> shp, std::initializer_list<S> d)
      : shape(std::move(shp)), data(d.begin(), d.end()) {
    if (int64_t(data.size()) != numel_of(shape))
      throw std::invalid_argument("tensor: shape/data mismatch");
  }

  static Tensor zeros(std::vector<int> shp) { return Tensor(std::move(shp)); }
  static Tensor full(std::vector<int> shp, S v) {
    Tensor t(std::move(shp));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(S v) { return Tensor({1}, {v}); }
  static Tensor randn(std::vector<int> shp, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shp));
    for (auto& v : t.data) v = S(rng.normal() * stddev);
    return t;
  }

  int rank() const { return int(shape.size()); }
  int dim(int i) const { return shape[size_t(i)]; }
  int64_t numel() const { return int64_t(data.size()); }
  bool empty() const { return data.empty(); }

  int rows() const { return shape.at(0); }
  int cols() const {
    if (rank() == 1) return 1;
    int64_t c = 1;
    for (size_t i = 1; i < shape.size(); ++i) c *= shape[i];
    return int(c);
  }

  S& operator[](int64_t i) { return data[size_t(i)]; }
  S operator[](int64_t i) const { return data[size_t(i)]; }
  S& at(int i, int j) { return data[size_t(i) * cols() + j]; }
  S at(int i, int j) const { return data[size_t(i) * cols() + j]; }
  // 4-d accessor for [N, C, H, W] layouts.
  S& at4(int n, int c, int h, int w) {
    int C = shape[1], H = shape[2], W = shape[3];
    return data[size_t(((n * C + c) * H + h)) * W + w];
  }
  S at4(int n, int c, int h, int w) const {
    int C = shape[1], H = shape[2], W = shape[3];
    return data[size_t(((n * C + c) * H + h)) * W + w];
  }

  // 2-d Eigen view collapsing trailing axes into columns.
  MatMap<S> mat() { return MatMap<S>(data.data(), rows(), cols()); }
  ConstMatMap<S> mat() const { return ConstMatMap<S>(data.data(), rows(), cols()); }
  MatMap<S> mat_as(int r, int c) {
    if (int64_t(r) * c != numel()) throw std::invalid_argument("tensor: bad mat view");
    return MatMap<S>(data.data(), r, c);
  }
  ConstMatMap<S> mat_as(int r, int c) const {
    if (int64_t(r) * c != numel()) throw std::invalid_argument("tensor: bad mat view");
    return ConstMatMap<S>(data.data(), r, c);
  }
  VecMap<S> vec() { return VecMap<S>(data.data(), Eigen::Index(numel())); }
  ConstVecMap<S> vec() const { return ConstVecMap<S>(data.data(), Eigen::Index(numel())); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = T(data[i]);
    return out;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename S>
Tensor<S> from_rows(std::initializer_list<std::initializer_list<S>> rows_in) {
  int r = int(rows_in.size());
  int c = int(rows_in.begin()->size());
  Tensor<S> t({r, c});
  int64_t i = 0;
  for (const auto& row : rows_in) {
    if (int(row.size()) != c) throw std::invalid_argument("from_rows: ragged rows");
    for (S v : row) t.data[size_t(i++)] = v;
  }
  return t;
}

template <typename S>
Tensor<S> from_vec(std::initializer_list<S> vals) {
  Tensor<S> t({int(vals.size())});
  int64_t i = 0;
  for (S v : vals) t.data[size_t(i++)] = v;
  return t;
}

}  // namespace slotdiff
