#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "cwflow/errors.hpp"

namespace cwflow {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense n-dimensional float32 array, row-major. The universal value type for
// images, volumes and parameters.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, float value);
  static Tensor scalar(float value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& vec() { return data_; }
  const std::vector<float>& vec() const { return data_; }

  float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // Index helpers for the common low-rank cases.
  float& at(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  float at(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  float& at(int i, int j, int k) {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  float at(int i, int j, int k) const {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  Tensor reshaped(Shape new_shape) const;

  bool all_finite() const;
  void check_finite(const std::string& context) const;

  // 64-bit accumulating reductions; log-likelihood bookkeeping relies on these.
  double sum64() const;
  double sum_squares64() const;
  float max_value() const;
  float min_value() const;

 private:
  Shape shape_;
  std::vector<float> data_;
};

double dot64(const Tensor& a, const Tensor& b);

}  // namespace cwflow
