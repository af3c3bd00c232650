#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace connex {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LoadError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Tensor extents, stored inline (rank <= 4).
class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;
  using value_type = std::size_t;
  using iterator = std::size_t*;
  using const_iterator = const std::size_t*;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) {
    for (std::size_t d : dims) push_back(d);
  }
  explicit Shape(const std::vector<std::size_t>& dims) {
    for (std::size_t d : dims) push_back(d);
  }

  std::size_t size() const noexcept { return rank_; }
  bool empty() const noexcept { return rank_ == 0; }
  std::size_t& operator[](std::size_t i) noexcept { return dims_[i]; }
  std::size_t operator[](std::size_t i) const noexcept { return dims_[i]; }
  std::size_t at(std::size_t i) const {
    if (i >= rank_) throw ShapeError("shape: axis " + std::to_string(i) + " out of range for rank " + std::to_string(rank_));
    return dims_[i];
  }
  std::size_t back() const noexcept { return dims_[rank_ - 1]; }
  iterator begin() noexcept { return dims_.data(); }
  iterator end() noexcept { return dims_.data() + rank_; }
  const_iterator begin() const noexcept { return dims_.data(); }
  const_iterator end() const noexcept { return dims_.data() + rank_; }

  void push_back(std::size_t d) {
    if (rank_ == kMaxRank) throw ShapeError("shape: rank above " + std::to_string(kMaxRank));
    dims_[rank_++] = d;
  }
  void erase(const_iterator pos) {
    std::copy(pos + 1, static_cast<const_iterator>(end()), begin() + (pos - begin()));
    --rank_;
  }

  friend bool operator==(const Shape& a, const Shape& b) noexcept {
    return a.rank_ == b.rank_ && std::equal(a.begin(), a.end(), b.begin());
  }

 private:
  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) out += (i ? "," : "") + std::to_string(shape[i]);
  return out + "]";
}

/// Dense row-major tensor of doubles. Rank 0 is a scalar.
class Tensor {
 public:
  Tensor() : values_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    check_extents();
    if (values_.size() != shape_size(shape_))
      throw ShapeError("tensor: " + std::to_string(values_.size()) +
                       " values for shape " + shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return values_.size(); }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  const std::vector<double>& data() const noexcept { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  double& at(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }

  double item() const {
    if (values_.size() != 1)
      throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not a scalar");
    return values_[0];
  }

  bool all_finite() const noexcept {
    for (double v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != values_.size())
      throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape));
    return Tensor(std::move(shape), values_);
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  void check_extents() const {
    for (std::size_t e : shape_)
      if (e == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> values_;
};

}  // namespace connex
