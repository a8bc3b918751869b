#include "cwflow/tensor.hpp"

#include <cmath>
#include <sstream>

namespace cwflow {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DataError("tensor shape has non-positive dimension " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0f);
}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
    throw DataError("tensor data length " + std::to_string(data_.size()) +
                    " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::full(Shape shape, float value) {
  Tensor t(std::move(shape));
  for (auto& v : t.data_) v = value;
  return t;
}

Tensor Tensor::reshaped(Shape new_shape) const {
  if (shape_numel(new_shape) != size()) {
    throw DataError("reshape from " + shape_str(shape_) + " to " + shape_str(new_shape) +
                    " changes element count");
  }
  return Tensor(std::move(new_shape), data_);
}

bool Tensor::all_finite() const {
  for (float v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::check_finite(const std::string& context) const {
  if (!all_finite()) throw NumericError("non-finite values in " + context);
}

double Tensor::sum64() const {
  double acc = 0.0;
  for (float v : data_) acc += v;
  return acc;
}

double Tensor::sum_squares64() const {
  double acc = 0.0;
  for (float v : data_) acc += static_cast<double>(v) * v;
  return acc;
}

float Tensor::max_value() const {
  float m = data_.empty() ? 0.0f : data_[0];
  for (float v : data_) m = v > m ? v : m;
  return m;
}

float Tensor::min_value() const {
  float m = data_.empty() ? 0.0f : data_[0];
  for (float v : data_) m = v < m ? v : m;
  return m;
}

double dot64(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DataError("dot64 size mismatch");
  double acc = 0.0;
  const float* pa = a.data();
  const float* pb = b.data();
  for (int64_t i = 0; i < a.size(); ++i) acc += static_cast<double>(pa[i]) * pb[i];
  return acc;
}

}  // namespace cwflow
