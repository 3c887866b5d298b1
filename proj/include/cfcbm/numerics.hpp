#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cfcbm/error.hpp"

namespace cfcbm {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(rows_, cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("ragged matrix initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  std::string shape() const { return shape_string(rows_, cols_); }
  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

  static std::string shape_string(std::size_t r, std::size_t c) {
    return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}

/// a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: cannot multiply " + a.shape() + " by " + b.shape());
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

/// a^T * b without materializing the transpose.
inline Matrix matmul_transpose_a(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_transpose_a: cannot multiply transpose of " + a.shape() +
                         " by " + b.shape());
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const auto a_row = a.row(k);
    const auto b_row = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a_row[i];
      if (aki == 0.0) continue;
      auto out_row = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aki * b_row[j];
    }
  }
  return out;
}

/// a * b^T without materializing the transpose.
inline Matrix matmul_transpose_b(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_transpose_b: cannot multiply " + a.shape() +
                         " by transpose of " + b.shape());
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto a_row = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto b_row = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a_row[k] * b_row[k];
      out(i, j) = acc;
    }
  }
  return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "hadamard");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

inline double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Matrix sigmoid(const Matrix& x) {
  Matrix out = x;
  for (auto& v : out.values()) v = sigmoid(v);
  return out;
}

inline bool all_finite(const Matrix& m) noexcept {
  return std::all_of(m.values().begin(), m.values().end(),
                     [](double v) { return std::isfinite(v); });
}

struct CrossEntropy {
  double loss = 0.0;
  std::vector<double> grad;  // softmax(logits) - onehot(label)
};

/// Softmax cross-entropy of one logit row, with the log-sum-exp shifted by the row max.
inline CrossEntropy softmax_cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) {
    throw IndexError("softmax_cross_entropy: label " + std::to_string(label) +
                     " out of range for " + std::to_string(logits.size()) + " classes");
  }
  const double shift = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  CrossEntropy out;
  out.grad.resize(logits.size());
  for (std::size_t c = 0; c < logits.size(); ++c) {
    out.grad[c] = std::exp(logits[c] - shift);
    denom += out.grad[c];
  }
  out.loss = std::log(denom) - (logits[label] - shift);
  for (auto& g : out.grad) g /= denom;
  out.grad[label] -= 1.0;
  return out;
}

/// Index of the largest entry; ties resolve to the lowest index.
inline std::size_t argmax(std::span<const double> v) noexcept {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

struct AdamState {
  Matrix first_moment;
  Matrix second_moment;
  std::uint64_t step_count = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_shape(std::size_t rows, std::size_t cols, double lr) {
    AdamState s;
    s.first_moment = Matrix(rows, cols);
    s.second_moment = Matrix(rows, cols);
    s.lr = lr;
    return s;
  }
};

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(Matrix& params, const Matrix& grads, AdamState& state) {
  require_same_shape(params, grads, "adam_step");
  require_same_shape(params, state.first_moment, "adam_step first moment");
  require_same_shape(params, state.second_moment, "adam_step second moment");
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g * g;
    const double m_hat = m / correction1;
    const double v_hat = v / correction2;
    params[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

/// Central-difference gradient of a scalar function of a matrix.
template <typename F>
Matrix finite_difference_gradient(F&& f, const Matrix& at, double h) {
  Matrix grad(at.rows(), at.cols());
  Matrix probe = at;
  for (std::size_t i = 0; i < at.size(); ++i) {
    const double original = probe[i];
    probe[i] = original + h;
    const double up = f(static_cast<const Matrix&>(probe));
    probe[i] = original - h;
    const double down = f(static_cast<const Matrix&>(probe));
    probe[i] = original;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace cfcbm
