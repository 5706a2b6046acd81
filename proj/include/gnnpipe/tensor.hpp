#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "gnnpipe/rng.hpp"

namespace gnnpipe {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Row-major dense matrix. Carries activations, weights and gradients
// throughout the system. T is float for training, double for oracle and
// gradient-check paths.
template <typename T>
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(size_t rows, size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  DenseMatrix(size_t rows, size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw ShapeError("DenseMatrix: data length " + std::to_string(data_.size()) +
                       " != rows*cols " + std::to_string(rows_ * cols_));
  }

  size_t rows() const { return rows_; }
  size_t cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T* row(size_t i) { return data_.data() + i * cols_; }
  const T* row(size_t i) const { return data_.data() + i * cols_; }

  T& operator()(size_t i, size_t j) { return data_[i * cols_ + j]; }
  const T& operator()(size_t i, size_t j) const { return data_[i * cols_ + j]; }

  bool same_shape(const DenseMatrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  DenseMatrix<U> cast() const {
    DenseMatrix<U> out(rows_, cols_);
    for (size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  static DenseMatrix identity(size_t n) {
    DenseMatrix m(n, n);
    for (size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  bool operator==(const DenseMatrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
  }

 private:
  size_t rows_ = 0;
  size_t cols_ = 0;
  std::vector<T> data_;
};

using MatrixF = DenseMatrix<float>;
using MatrixD = DenseMatrix<double>;

template <typename T>
DenseMatrix<T> matmul(const DenseMatrix<T>& a, const DenseMatrix<T>& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  DenseMatrix<T> c(a.rows(), b.cols());
  // ikj loop order keeps the inner loop contiguous in b and c.
  for (size_t i = 0; i < a.rows(); ++i) {
    const T* arow = a.row(i);
    T* crow = c.row(i);
    for (size_t k = 0; k < a.cols(); ++k) {
      const T aik = arow[k];
      if (aik == T(0)) continue;
      const T* brow = b.row(k);
      for (size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

template <typename T>
DenseMatrix<T> transpose(const DenseMatrix<T>& a) {
  DenseMatrix<T> t(a.cols(), a.rows());
  for (size_t i = 0; i < a.rows(); ++i)
    for (size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

template <typename T>
DenseMatrix<T> add(const DenseMatrix<T>& a, const DenseMatrix<T>& b) {
  if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
  DenseMatrix<T> c = a;
  for (size_t i = 0; i < c.size(); ++i) c.data()[i] += b.data()[i];
  return c;
}

template <typename T>
DenseMatrix<T> scale(const DenseMatrix<T>& a, T s) {
  DenseMatrix<T> c = a;
  for (size_t i = 0; i < c.size(); ++i) c.data()[i] *= s;
  return c;
}

template <typename T>
DenseMatrix<T> relu(const DenseMatrix<T>& a) {
  DenseMatrix<T> c = a;
  for (size_t i = 0; i < c.size(); ++i) c.data()[i] = std::max(c.data()[i], T(0));
  return c;
}

// Subgradient at 0 is taken as 0, so the mask is strictly pre > 0.
template <typename T>
DenseMatrix<T> relu_backward(const DenseMatrix<T>& pre_activation, const DenseMatrix<T>& upstream) {
  if (!pre_activation.same_shape(upstream)) throw ShapeError("relu_backward: shape mismatch");
  DenseMatrix<T> g(upstream.rows(), upstream.cols());
  for (size_t i = 0; i < g.size(); ++i)
    g.data()[i] = pre_activation.data()[i] > T(0) ? upstream.data()[i] : T(0);
  return g;
}

// Row-wise softmax with log-sum-exp stabilization.
template <typename T>
DenseMatrix<T> softmax_rows(const DenseMatrix<T>& logits) {
  DenseMatrix<T> p(logits.rows(), logits.cols());
  for (size_t i = 0; i < logits.rows(); ++i) {
    const T* z = logits.row(i);
    T* pr = p.row(i);
    T zmax = z[0];
    for (size_t j = 1; j < logits.cols(); ++j) zmax = std::max(zmax, z[j]);
    T sum = T(0);
    for (size_t j = 0; j < logits.cols(); ++j) {
      pr[j] = std::exp(z[j] - zmax);
      sum += pr[j];
    }
    for (size_t j = 0; j < logits.cols(); ++j) pr[j] /= sum;
  }
  return p;
}

// Masked mean softmax cross-entropy. Rows in `mask` (vertex indices into the
// logits) contribute; other rows get zero gradient. The gradient row is
// (softmax(z) - y) / |mask|, which is exactly the (Z - Y) output-layer term
// scaled by the mean.
template <typename T>
struct LossResult {
  double loss = 0.0;
  DenseMatrix<T> grad;
};

template <typename T>
LossResult<T> softmax_cross_entropy(const DenseMatrix<T>& logits,
                                    const DenseMatrix<T>& labels_onehot,
                                    const std::vector<uint32_t>& mask) {
  if (!logits.same_shape(labels_onehot)) throw ShapeError("softmax_cross_entropy: shape mismatch");
  if (mask.empty()) throw std::invalid_argument("softmax_cross_entropy: empty mask");
  LossResult<T> out;
  out.grad = DenseMatrix<T>(logits.rows(), logits.cols());
  const double inv_mask = 1.0 / static_cast<double>(mask.size());
  for (uint32_t r : mask) {
    if (r >= logits.rows()) throw std::invalid_argument("softmax_cross_entropy: mask row out of range");
    const T* z = logits.row(r);
    const T* y = labels_onehot.row(r);
    size_t label = logits.cols();
    for (size_t j = 0; j < logits.cols(); ++j) {
      if (y[j] == T(1)) {
        if (label != logits.cols()) throw std::invalid_argument("softmax_cross_entropy: label row not one-hot");
        label = j;
      } else if (y[j] != T(0)) {
        throw std::invalid_argument("softmax_cross_entropy: label row not one-hot");
      }
    }
    if (label == logits.cols()) throw std::invalid_argument("softmax_cross_entropy: label row not one-hot");

    double zmax = z[0];
    for (size_t j = 1; j < logits.cols(); ++j) zmax = std::max(zmax, static_cast<double>(z[j]));
    double sum = 0.0;
    for (size_t j = 0; j < logits.cols(); ++j) sum += std::exp(static_cast<double>(z[j]) - zmax);
    const double lse = zmax + std::log(sum);
    out.loss += (lse - static_cast<double>(z[label])) * inv_mask;
    T* g = out.grad.row(r);
    for (size_t j = 0; j < logits.cols(); ++j) {
      double p = std::exp(static_cast<double>(z[j]) - lse);
      g[j] = static_cast<T>((p - static_cast<double>(y[j])) * inv_mask);
    }
  }
  return out;
}

// Glorot uniform: i.i.d. on [-b, b] with b = sqrt(6 / (rows + cols)).
template <typename T>
DenseMatrix<T> xavier_init(size_t rows, size_t cols, uint64_t seed) {
  if (rows == 0 || cols == 0) throw std::invalid_argument("xavier_init: zero dimension");
  const double b = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Rng rng(seed);
  DenseMatrix<T> w(rows, cols);
  for (size_t i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(rng.next_uniform(-b, b));
  return w;
}

// He: i.i.d. normal with std = sqrt(2 / rows).
template <typename T>
DenseMatrix<T> he_init(size_t rows, size_t cols, uint64_t seed) {
  if (rows == 0 || cols == 0) throw std::invalid_argument("he_init: zero dimension");
  const double sd = std::sqrt(2.0 / static_cast<double>(rows));
  Rng rng(seed);
  DenseMatrix<T> w(rows, cols);
  for (size_t i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(sd * rng.next_normal());
  return w;
}

enum class OptimizerKind : uint8_t { vanilla_sgd, adam };

template <typename T>
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::vanilla_sgd;
  double learning_rate = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  uint64_t step_count = 0;
  std::vector<T> adam_m;
  std::vector<T> adam_v;
};

// One optimizer update. Mutates `state` (moments and step counter) and
// returns the new parameter matrix.
template <typename T>
DenseMatrix<T> optimizer_step(OptimizerState<T>& state, const DenseMatrix<T>& params,
                              const DenseMatrix<T>& grads) {
  if (!params.same_shape(grads)) throw ShapeError("optimizer_step: shape mismatch");
  DenseMatrix<T> out = params;
  state.step_count += 1;
  if (state.kind == OptimizerKind::vanilla_sgd) {
    const T lr = static_cast<T>(state.learning_rate);
    for (size_t i = 0; i < out.size(); ++i) out.data()[i] -= lr * grads.data()[i];
    return out;
  }
  if (state.adam_m.size() != params.size()) state.adam_m.assign(params.size(), T(0));
  if (state.adam_v.size() != params.size()) state.adam_v.assign(params.size(), T(0));
  const double b1 = state.adam_beta1, b2 = state.adam_beta2;
  const double bias1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
  const double bias2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
  for (size_t i = 0; i < out.size(); ++i) {
    const double g = static_cast<double>(grads.data()[i]);
    const double m = b1 * static_cast<double>(state.adam_m[i]) + (1.0 - b1) * g;
    const double v = b2 * static_cast<double>(state.adam_v[i]) + (1.0 - b2) * g * g;
    state.adam_m[i] = static_cast<T>(m);
    state.adam_v[i] = static_cast<T>(v);
    const double mhat = m / bias1;
    const double vhat = v / bias2;
    out.data()[i] -= static_cast<T>(state.learning_rate * mhat / (std::sqrt(vhat) + state.adam_eps));
  }
  return out;
}

}  // namespace gnnpipe
