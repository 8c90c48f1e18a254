#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "comem/error.hpp"

namespace comem {

/// Dimensions of a dense row-major tensor. Rank 1 is a vector, rank 2 a
/// matrix; convolution kernels use rank 3 (taps x in x out).
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) { validate(); }

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_.at(i); }
  const std::vector<std::size_t>& dims() const { return dims_; }

  std::size_t numel() const {
    return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>());
  }

  // Matrix view: a vector of length n is treated as a 1 x n row.
  std::size_t rows() const { return rank() == 1 ? 1 : dims_.at(0); }
  std::size_t cols() const { return dims_.back(); }

  bool operator==(const Shape& other) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i) os << 'x';
      os << dims_[i];
    }
    os << ']';
    return os.str();
  }

 private:
  void validate() const {
    if (dims_.empty()) throw DimensionError("shape must have rank >= 1");
    for (auto d : dims_) {
      if (d == 0) throw DimensionError("shape dimensions must be positive, got " + str());
    }
  }

  std::vector<std::size_t> dims_;
};

inline Shape vec_shape(std::size_t n) { return Shape{n}; }
inline Shape mat_shape(std::size_t r, std::size_t c) { return Shape{r, c}; }

/// Owning dense tensor. Invariant: data().size() == shape().numel().
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_.numel(), T(0)) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_.str());
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * shape_.cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_.cols() + c]; }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

}  // namespace comem
