#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bisenet/errors.hpp"

namespace bisenet {

/// NCHW extent. All four dimensions are at least 1.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool valid() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }

  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

/// Dense 4-D row-major array. Value type, copies deep.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape) {
    if (!shape.valid()) {
      throw ConfigError("tensor dimensions must be >= 1, got " +
                        to_string(shape));
    }
    data_.assign(shape.numel(), fill);
  }
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (!shape.valid() || data_.size() != shape.numel()) {
      throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + to_string(shape));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) *
               shape_.w + w;
  }
  T& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const {
    return data_[index(n, c, h, w)];
  }

  /// Pointer to the (n, c) spatial plane.
  T* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const T* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_{};
  std::vector<T> data_;
};

/// Learnable parameter with gradient slot.
template <typename T>
struct ParamTensor {
  Tensor<T> value;
  Tensor<T> grad;
  // True for batch-norm scale/shift and biases: no weight decay.
  bool decay_exempt = false;

  ParamTensor() = default;
  ParamTensor(Tensor<T> v, bool exempt)
      : value(std::move(v)), grad(value.shape()), decay_exempt(exempt) {}

  void zero_grad() { grad.fill(T(0)); }
};

/// Batch-norm running statistics. Not learnable, but checkpointed.
template <typename T>
struct RunningStats {
  std::vector<T> mean;
  std::vector<T> var;
  bool initialized = false;

  RunningStats() = default;
  explicit RunningStats(int channels)
      : mean(channels, T(0)), var(channels, T(1)), initialized(true) {}
};

/// Integer class map (n, h, w).
struct LabelMap {
  int n = 1;
  int h = 1;
  int w = 1;
  std::vector<std::int32_t> data;

  LabelMap() = default;
  LabelMap(int n_, int h_, int w_, std::int32_t fill = 0)
      : n(n_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * h_ * w_, fill) {}

  std::int32_t& at(int b, int y, int x) {
    return data[(static_cast<std::size_t>(b) * h + y) * w + x];
  }
  std::int32_t at(int b, int y, int x) const {
    return data[(static_cast<std::size_t>(b) * h + y) * w + x];
  }
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

}  // namespace bisenet
