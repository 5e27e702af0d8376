#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gcnas {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major array of doubles. Rank-1 tensors behave as a single row in
// the 2-D operators.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_numel(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) { return Tensor({rows, cols}, fill); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> v;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw ShapeError("ragged matrix literal");
      v.insert(v.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(v));
  }
  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }
  static Tensor scalar(double v) { return Tensor({1, 1}, v); }

  std::size_t rank() const { return shape.size(); }
  std::size_t numel() const { return data.size(); }
  std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  std::size_t cols() const {
    if (shape.size() == 2) return shape[1];
    return shape.size() == 1 ? shape[0] : 1;
  }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  double item() const {
    if (data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape));
    return data[0];
  }

  bool operator==(const Tensor&) const = default;
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape, 0.0); }

inline Tensor transpose(const Tensor& t) {
  const std::size_t r = t.rows(), c = t.cols();
  Tensor out = Tensor::matrix(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = t.data[i * c + j];
  return out;
}

// C = A·B for 2-D operands, optionally with A and/or B transposed.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool ta = false, bool tb = false) {
  const std::size_t ar = ta ? a.cols() : a.rows(), ac = ta ? a.rows() : a.cols();
  const std::size_t br = tb ? b.cols() : b.rows(), bc = tb ? b.rows() : b.cols();
  if (ac != br) throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape) + " x " + shape_str(b.shape));
  Tensor out = Tensor::matrix(ar, bc);
  const std::size_t lda = a.cols(), ldb = b.cols();
  const double* A = a.data.data();
  const double* B = b.data.data();
  double* C = out.data.data();
  if (!ta && !tb) {
    for (std::size_t i = 0; i < ar; ++i) {
      double* crow = C + i * bc;
      for (std::size_t k = 0; k < ac; ++k) {
        const double aik = A[i * lda + k];
        const double* brow = B + k * ldb;
        for (std::size_t j = 0; j < bc; ++j) crow[j] += aik * brow[j];
      }
    }
  } else if (ta && !tb) {
    for (std::size_t k = 0; k < ac; ++k) {
      const double* arow = A + k * lda;
      const double* brow = B + k * ldb;
      for (std::size_t i = 0; i < ar; ++i) {
        const double aki = arow[i];
        double* crow = C + i * bc;
        for (std::size_t j = 0; j < bc; ++j) crow[j] += aki * brow[j];
      }
    }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < ar; ++i) {
      const double* arow = A + i * lda;
      for (std::size_t j = 0; j < bc; ++j) {
        const double* brow = B + j * ldb;
        double acc = 0.0;
        for (std::size_t k = 0; k < ac; ++k) acc += arow[k] * brow[k];
        C[i * bc + j] = acc;
      }
    }
  } else {
    for (std::size_t i = 0; i < ar; ++i)
      for (std::size_t j = 0; j < bc; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < ac; ++k) acc += A[k * lda + i] * B[j * ldb + k];
        C[i * bc + j] = acc;
      }
  }
  return out;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

inline double max_abs(const std::vector<double>& a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.data.begin(), t.data.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace gcnas
