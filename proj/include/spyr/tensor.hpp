#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "spyr/error.hpp"

namespace spyr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of rank 0..4. Rank-4 tensors are laid out N x C x H x W.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    require(shape_.size() <= 4, "shape", "tensor rank must be <= 4, got " + shape_str(shape_));
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(shape_.size() <= 4, "shape", "tensor rank must be <= 4, got " + shape_str(shape_));
    require(data_.size() == shape_size(shape_), "shape",
            "data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& raw() noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  T& at(std::size_t h, std::size_t w) { return data_[h * shape_[1] + w]; }
  const T& at(std::size_t h, std::size_t w) const { return data_[h * shape_[1] + w]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  T item() const {
    require(data_.size() == 1, "shape", "item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    require(shape_size(shape) == data_.size(), "shape",
            "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// Selects sample `n` of an N x ... tensor as a 1 x ... tensor.
template <typename T>
Tensor<T> sample(const Tensor<T>& t, std::size_t n) {
  require(t.rank() >= 1 && n < t.dim(0), "shape", "sample index out of range");
  Shape s = t.shape();
  const std::size_t stride = t.size() / s[0];
  s[0] = 1;
  auto first = t.data().begin() + static_cast<std::ptrdiff_t>(n * stride);
  return Tensor<T>(s, std::vector<T>(first, first + static_cast<std::ptrdiff_t>(stride)));
}

/// Stacks equally-shaped 1 x ... tensors along dimension 0.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  require(!items.empty(), "shape", "stack of zero tensors");
  Shape s = items.front().shape();
  std::vector<T> data;
  data.reserve(items.front().size() * items.size());
  std::size_t n = 0;
  for (const auto& t : items) {
    Shape ts = t.shape();
    require(ts.size() == s.size() && std::equal(ts.begin() + 1, ts.end(), s.begin() + 1), "shape",
            "stack shape mismatch " + shape_str(ts) + " vs " + shape_str(s));
    n += ts[0];
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  s[0] = n;
  return Tensor<T>(s, std::move(data));
}

/// Ensures an image is N x C x H x W; a C x H x W image becomes a batch of one.
template <typename T>
Tensor<T> as_batch(const Tensor<T>& image) {
  if (image.rank() == 3) return image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  require(image.rank() == 4, "shape", "image must be C x H x W or N x C x H x W, got " + shape_str(image.shape()));
  return image;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "shape", "max_abs_diff shape mismatch");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
  return m;
}

}  // namespace spyr
