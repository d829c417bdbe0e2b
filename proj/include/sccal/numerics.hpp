#pragma once

// Dense row-major float matrices and the handful of kernels the calibration
// pipeline is built from. Storage is 32-bit; every reduction accumulates in
// 64-bit so results are deterministic and comparable against double oracles.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sccal/error.hpp"

namespace sccal {

class Tensor2D {
 public:
  Tensor2D() = default;
  Tensor2D(std::size_t rows, std::size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Tensor2D: data length " + std::to_string(data_.size()) +
                       " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  static Tensor2D identity(std::size_t n) {
    Tensor2D t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0f;
    return t;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<float>& data() noexcept { return data_; }
  const std::vector<float>& data() const noexcept { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  bool same_shape(const Tensor2D& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Tensor2D&, const Tensor2D&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

// N x N pairwise cosine similarity of one layer's tokens.
struct SimilarityMap {
  std::size_t n = 0;
  Tensor2D values;
};

inline double dot(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

inline double norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

// a (m x k) * b (k x n)
inline Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Tensor2D out(a.rows(), b.cols());
  std::vector<double> acc(b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < a.cols(); ++p) {
      const double av = a(i, p);
      if (av == 0.0) continue;
      const auto brow = b.row(p);
      for (std::size_t j = 0; j < b.cols(); ++j) acc[j] += av * brow[j];
    }
    for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) = static_cast<float>(acc[j]);
  }
  return out;
}

// a (m x k) * b^T where b is (n x k)
inline Tensor2D matmul_bt(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_bt: inner dims " + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.cols()));
  }
  Tensor2D out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = static_cast<float>(dot(arow, b.row(j)));
  }
  return out;
}

// x * weight^T + bias, with weight stored (out x in) as in the checkpoint.
inline Tensor2D linear(const Tensor2D& x, const Tensor2D& weight, std::span<const float> bias) {
  if (!bias.empty() && bias.size() != weight.rows()) {
    throw ShapeError("linear: bias length " + std::to_string(bias.size()) + " != " +
                     std::to_string(weight.rows()));
  }
  Tensor2D out = matmul_bt(x, weight);
  if (!bias.empty()) {
    for (std::size_t i = 0; i < out.rows(); ++i) {
      auto r = out.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
    }
  }
  return out;
}

inline Tensor2D transpose(const Tensor2D& m) {
  Tensor2D t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

inline Tensor2D add(const Tensor2D& a, const Tensor2D& b) {
  if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
  Tensor2D out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

inline Tensor2D scaled(const Tensor2D& a, float s) {
  Tensor2D out = a;
  for (float& v : out.data()) v *= s;
  return out;
}

inline Tensor2D row_softmax(const Tensor2D& m, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw ParameterError("row_softmax: temperature must be positive");
  Tensor2D out(m.rows(), m.cols());
  std::vector<double> e(m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto r = m.row(i);
    if (r.empty()) continue;
    const double mx = *std::max_element(r.begin(), r.end()) / temperature;
    double sum = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) {
      e[j] = std::exp(r[j] / temperature - mx);
      sum += e[j];
    }
    auto o = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) o[j] = static_cast<float>(e[j] / sum);
  }
  return out;
}

// Zero-norm rows get similarity 0 to everything except themselves (1).
inline SimilarityMap cosine_similarity_map(const Tensor2D& x) {
  const std::size_t n = x.rows();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) norms[i] = norm(x.row(i));
  SimilarityMap s{n, Tensor2D(n, n)};
  for (std::size_t p = 0; p < n; ++p) {
    s.values(p, p) = 1.0f;
    for (std::size_t q = p + 1; q < n; ++q) {
      float v = 0.0f;
      if (norms[p] > 0.0 && norms[q] > 0.0) {
        double c = dot(x.row(p), x.row(q)) / (norms[p] * norms[q]);
        v = static_cast<float>(std::clamp(c, -1.0, 1.0));
      }
      s.values(p, q) = v;
      s.values(q, p) = v;
    }
  }
  return s;
}

inline Tensor2D layer_norm(const Tensor2D& x, std::span<const float> gain, std::span<const float> bias,
                           double eps = 1e-5) {
  if (gain.size() != x.cols() || bias.size() != x.cols()) {
    throw ParameterError("layer_norm: gain/bias length must equal " + std::to_string(x.cols()));
  }
  if (!(eps > 0.0)) throw ParameterError("layer_norm: eps must be positive");
  Tensor2D out(x.rows(), x.cols());
  const double d = static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto r = x.row(i);
    double mean = 0.0;
    for (float v : r) mean += v;
    mean /= d;
    double var = 0.0;
    for (float v : r) var += (v - mean) * (v - mean);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    auto o = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j)
      o[j] = static_cast<float>((r[j] - mean) * inv * gain[j] + bias[j]);
  }
  return out;
}

// Symmetric eigen-decomposition by cyclic Jacobi rotations. `a` is n x n,
// row-major. Returns eigenvalues (descending) and eigenvectors as columns.
struct SymmetricEigen {
  std::vector<double> values;
  std::vector<double> vectors;  // n x n, column j is the j-th eigenvector
  std::size_t n = 0;
  double vector(std::size_t row, std::size_t col) const { return vectors[row * n + col]; }
};

inline SymmetricEigen symmetric_eigen(std::vector<double> a, std::size_t n, int max_sweeps = 100) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  auto A = [&](std::size_t i, std::size_t j) -> double& { return a[i * n + j]; };

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0, total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        total += A(i, j) * A(i, j);
        if (i != j) off += A(i, j) * A(i, j);
      }
    if (off <= 1e-30 * std::max(total, 1e-300)) break;

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = A(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (A(q, q) - A(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = A(k, p), akq = A(k, q);
          A(k, p) = c * akp - s * akq;
          A(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = A(p, k), aqk = A(q, k);
          A(p, k) = c * apk - s * aqk;
          A(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return A(x, x) > A(y, y); });

  SymmetricEigen out;
  out.n = n;
  out.values.resize(n);
  out.vectors.assign(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = order[j];
    out.values[j] = A(src, src);
    // Sign convention: largest-magnitude component positive.
    std::size_t arg = 0;
    for (std::size_t k = 1; k < n; ++k)
      if (std::abs(v[k * n + src]) > std::abs(v[arg * n + src])) arg = k;
    const double sign = v[arg * n + src] < 0 ? -1.0 : 1.0;
    for (std::size_t k = 0; k < n; ++k) out.vectors[k * n + j] = sign * v[k * n + src];
  }
  return out;
}

struct PcaResult {
  Tensor2D projections;                 // N x k
  std::vector<double> explained_variance;  // length k, descending
  double total_variance = 0.0;          // trace of the covariance
};

inline PcaResult pca(const Tensor2D& x, std::size_t k) {
  const std::size_t n = x.rows(), d = x.cols();
  if (k == 0 || k > std::min(n, d)) {
    throw ParameterError("pca: k=" + std::to_string(k) + " outside [1, min(N, D)=" +
                         std::to_string(std::min(n, d)) + "]");
  }
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x(i, j);
  for (double& m : mean) m /= static_cast<double>(n);

  std::vector<double> centered(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) centered[i * d + j] = x(i, j) - mean[j];

  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  std::vector<double> cov(d * d, 0.0);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += centered[i * d + a] * centered[i * d + b];
      cov[a * d + b] = cov[b * d + a] = acc / denom;
    }
  double trace = 0.0;
  for (std::size_t a = 0; a < d; ++a) trace += cov[a * d + a];

  const SymmetricEigen eig = symmetric_eigen(std::move(cov), d);
  PcaResult out{Tensor2D(n, k), {}, trace};
  for (std::size_t c = 0; c < k; ++c) {
    out.explained_variance.push_back(std::max(eig.values[c], 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += centered[i * d + j] * eig.vector(j, c);
      out.projections(i, c) = static_cast<float>(acc);
    }
  }
  return out;
}

inline Tensor2D pca_project(const Tensor2D& x, std::size_t k) { return pca(x, k).projections; }

}  // namespace sccal
