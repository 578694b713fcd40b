#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dsd/error.hpp"
#include "dsd/rng.hpp"

namespace dsd {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("tensor dimension must be positive, got " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

// Dense row-major real tensor. Plain storage; finiteness is enforced by
// the operations that consume it, not by the container.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_numel(shape)) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
  }

  static Tensor zeros(Shape s) {
    const std::size_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }

  static Tensor full(Shape s, double v) {
    const std::size_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor uniform(Shape s, double lo, double hi, Rng& rng) {
    Tensor t = zeros(std::move(s));
    for (double& x : t.data) x = rng.uniform(lo, hi);
    return t;
  }

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }

  // Last-axis length and the product of the leading axes; the layout all
  // last-axis ops (concat, slice, affine broadcast) work in.
  int last_dim() const { return shape.empty() ? 1 : shape.back(); }
  int lead_count() const {
    return shape.empty() ? 1 : static_cast<int>(numel()) / shape.back();
  }

  bool is_scalar() const { return numel() == 1; }

  double& at(int i) { return data[static_cast<std::size_t>(i)]; }
  double at(int i) const { return data[static_cast<std::size_t>(i)]; }
  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * last_dim() + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * last_dim() + c]; }

  bool all_finite() const {
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

using EigenMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstEigenMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline ConstEigenMap as_matrix(const Tensor& t, int rows, int cols) {
  return ConstEigenMap(t.data.data(), rows, cols);
}

inline EigenMap as_matrix(Tensor& t, int rows, int cols) {
  return EigenMap(t.data.data(), rows, cols);
}

// y = x . w for rank-2 tensors.
inline Tensor matmul(const Tensor& x, const Tensor& w) {
  if (x.rank() != 2 || w.rank() != 2 || x.shape[1] != w.shape[0]) {
    throw ShapeError("matmul shape mismatch: " + shape_str(x.shape) + " x " + shape_str(w.shape));
  }
  Tensor y = Tensor::zeros({x.shape[0], w.shape[1]});
  as_matrix(y, x.shape[0], w.shape[1]).noalias() =
      as_matrix(x, x.shape[0], x.shape[1]) * as_matrix(w, w.shape[0], w.shape[1]);
  return y;
}

// Accumulating gemm helpers for the backward pass: out += a . b etc.
inline void add_matmul(Tensor& out, const Tensor& a, const Tensor& b) {
  as_matrix(out, a.shape[0], b.shape[1]).noalias() +=
      as_matrix(a, a.shape[0], a.shape[1]) * as_matrix(b, b.shape[0], b.shape[1]);
}

inline void add_matmul_tn(Tensor& out, const Tensor& a, const Tensor& b) {
  as_matrix(out, a.shape[1], b.shape[1]).noalias() +=
      as_matrix(a, a.shape[0], a.shape[1]).transpose() * as_matrix(b, b.shape[0], b.shape[1]);
}

inline void add_matmul_nt(Tensor& out, const Tensor& a, const Tensor& b) {
  as_matrix(out, a.shape[0], b.shape[0]).noalias() +=
      as_matrix(a, a.shape[0], a.shape[1]) * as_matrix(b, b.shape[0], b.shape[1]).transpose();
}

}  // namespace dsd
