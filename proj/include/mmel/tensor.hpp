#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mmel/errors.hpp"

namespace mmel {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major array of doubles. Constructing from data rejects NaN/Inf;
// element writes through the accessors are not re-checked.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    check_shape();
    if (!std::isfinite(fill)) throw ParameterError("tensor fill value is not finite");
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (shape_numel(shape_) != data_.size())
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    for (double v : data_)
      if (!std::isfinite(v)) throw ParameterError("tensor data contains a non-finite value");
  }

  static Tensor vector(std::vector<double> data) {
    const std::size_t n = data.size();
    return Tensor({n}, std::move(data));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  std::size_t rows() const {
    require_rank(2);
    return shape_[0];
  }
  std::size_t cols() const {
    require_rank(2);
    return shape_[1];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<double> row(std::size_t r) {
    return std::span<double>(data_).subspan(r * shape_[1], shape_[1]);
  }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * shape_[1], shape_[1]);
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void require_rank(std::size_t r) const {
    if (shape_.size() != r)
      throw DimensionError("expected rank " + std::to_string(r) + " tensor, got " +
                           shape_str(shape_));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    for (std::size_t e : shape_)
      if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

}  // namespace mmel
