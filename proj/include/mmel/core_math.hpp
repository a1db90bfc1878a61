#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string_view>
#include <vector>

#include "mmel/errors.hpp"
#include "mmel/tensor.hpp"

namespace mmel {

// m×k · k×n, plain row-major accumulation in i-k-j order.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  a.require_rank(2);
  b.require_rank(2);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data().data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      const double* brow = b.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// a · bᵀ for a: m×k, b: n×k.
inline Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  a.require_rank(2);
  b.require_rank(2);
  if (a.cols() != b.cols())
    throw DimensionError("matmul_transposed inner extents differ: " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "^T");
  const std::size_t m = a.rows(), n = b.rows(), k = a.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a(i, p) * b(j, p);
      out(i, j) = acc;
    }
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

// Row-wise bias add, bias length == cols.
inline void add_row_bias(Tensor& x, const Tensor& bias) {
  if (bias.size() != x.cols()) throw DimensionError("bias length does not match columns");
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) += bias[c];
}

inline std::vector<double> softmax_temp(std::span<const double> v, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("softmax temperature must be positive");
  if (v.empty()) return {};
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp((v[i] - mx) / temperature);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

inline std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gamma,
                                      std::span<const double> beta, double eps) {
  if (gamma.size() != x.size() || beta.size() != x.size())
    throw DimensionError("layer_norm: gamma/beta length must equal input length");
  if (eps < 0.0) throw ParameterError("layer_norm: eps must be non-negative");
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double rstd = 1.0 / std::sqrt(var + eps);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gamma[i] * (x[i] - mean) * rstd + beta[i];
  return out;
}

// Applies layer_norm to every row of a matrix.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              double eps) {
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto y = layer_norm(x.row(r), gamma.data(), beta.data(), eps);
    std::copy(y.begin(), y.end(), out.row(r).begin());
  }
  return out;
}

enum class Activation { relu, softplus, sigmoid, gelu_tanh };

inline Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "softplus") return Activation::softplus;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "gelu_tanh") return Activation::gelu_tanh;
  throw ParameterError("unknown activation kind: " + std::string(name));
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double activate(Activation kind, double x) {
  switch (kind) {
    case Activation::relu:
      return x > 0.0 ? x : 0.0;
    case Activation::softplus:
      return x > 30.0 ? x : std::log1p(std::exp(x));
    case Activation::sigmoid:
      return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    case Activation::gelu_tanh:
      return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
  }
  throw ParameterError("unknown activation kind");
}

inline Tensor activate(Activation kind, const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data()) v = activate(kind, v);
  return out;
}

inline double softplus(double x) { return activate(Activation::softplus, x); }
inline double sigmoid(double x) { return activate(Activation::sigmoid, x); }

// d/dx of the tanh-approximated GELU.
inline double gelu_tanh_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// Trapezoidal integral of a piecewise-linear curve sampled at xs ⊂ [0,1].
inline double trapezoid_auc(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2)
    throw DimensionError("trapezoid_auc needs matching xs/ys with at least two points");
  if (xs.front() != 0.0 || xs.back() != 1.0)
    throw OrderingError("trapezoid_auc: xs must start at 0 and end at 1");
  double area = 0.0;
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (!(xs[i] > xs[i - 1])) throw OrderingError("trapezoid_auc: xs must be strictly ascending");
    area += 0.5 * (ys[i] + ys[i - 1]) * (xs[i] - xs[i - 1]);
  }
  return area;
}

// ((x - min) / (max - min))^(1/beta); a constant map becomes all zeros.
inline std::vector<double> minmax_gamma(std::span<const double> map, double beta) {
  if (!(beta >= 1.0)) throw ParameterError("minmax_gamma: beta must be >= 1");
  std::vector<double> out(map.size(), 0.0);
  if (map.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(map.begin(), map.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return out;
  const double range = hi - lo;
  const double expo = 1.0 / beta;
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double t = (map[i] - lo) / range;
    out[i] = beta == 1.0 ? t : std::pow(t, expo);
  }
  return out;
}

// Fractional (average-on-ties) ranks, 1-based.
inline std::vector<double> fractional_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("pearson: length mismatch");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw UndefinedCorrelationError("correlation undefined: zero variance");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline double spearman_rank(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("spearman_rank: length mismatch");
  if (a.size() < 3) throw DimensionError("spearman_rank needs at least 3 values");
  const auto ra = fractional_ranks(a);
  const auto rb = fractional_ranks(b);
  return pearson(ra, rb);
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw EvaluationError("median of empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace mmel
