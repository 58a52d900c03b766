#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace twoway {

template <class T>
using MatrixX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<MatrixX<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const MatrixX<T>>;

// Dense row-major tensor. Rank 1 maps to a [1, n] row, rank 2 to [rows, cols].
template <class T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int r, int c) : shape{r, c}, data(static_cast<std::size_t>(r) * c, T(0)) {
    if (r <= 0 || c <= 0) throw std::invalid_argument("Tensor: extents must be positive");
  }
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    for (int e : shape)
      if (e <= 0) throw std::invalid_argument("Tensor: extents must be positive");
    data.assign(count(), T(0));
  }

  std::size_t count() const {
    std::size_t n = 1;
    for (int e : shape) n *= static_cast<std::size_t>(e);
    return shape.empty() ? 0 : n;
  }
  bool empty() const { return shape.empty(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int rows() const { return rank() == 0 ? 0 : (rank() == 1 ? 1 : shape[0]); }
  int cols() const { return rank() == 0 ? 0 : (rank() == 1 ? shape[0] : shape[1]); }

  MatMap<T> map() { return MatMap<T>(data.data(), rows(), cols()); }
  ConstMatMap<T> map() const { return ConstMatMap<T>(data.data(), rows(), cols()); }

  bool all_finite() const { return map().allFinite(); }

  static Tensor full(int r, int c, T v) {
    Tensor t(r, c);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor row(std::vector<T> v) {
    Tensor t;
    t.shape = {static_cast<int>(v.size())};
    t.data = std::move(v);
    return t;
  }
};

}  // namespace twoway
