#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace condense {

using Shape = std::vector<std::size_t>;

/// Structured error raised when operand shapes are incompatible with a primitive.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& primitive, const std::vector<Shape>& shapes);
  const std::string& primitive() const { return primitive_; }

 private:
  std::string primitive_;
};

/// Raised when an input violates an operation's documented precondition.
class ContractError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major array. Shape product always equals data length.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor", {shape_, Shape{data_.size()}});
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }
  static Tensor vector(std::initializer_list<T> v) {
    return Tensor(Shape{v.size()}, std::vector<T>(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  /// Extent counted from the back: dim_back(1) is the last axis.
  std::size_t dim_back(std::size_t k) const { return shape_.at(shape_.size() - k); }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }
  T item() const {
    if (data_.size() != 1) throw ShapeError("item", {shape_});
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) throw ShapeError("reshape", {shape_, shape});
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Row `r` of a rank-2 tensor.
template <typename T>
std::span<const T> row(const Tensor<T>& m, std::size_t r) {
  const std::size_t cols = m.shape().back();
  return m.data().subspan(r * cols, cols);
}

}  // namespace condense
