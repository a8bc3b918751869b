#include "cwflow/haar.hpp"

#include <cmath>

namespace cwflow {

namespace {

const float kInvSqrt2 = static_cast<float>(1.0 / std::sqrt(2.0));

void check_down_input(const Tensor& v) {
  if (v.rank() < 1) throw DataError("haar_down_axial: empty tensor");
  if (v.dim(0) % 2 != 0) {
    throw DataError("haar_down_axial: axial size " + std::to_string(v.dim(0)) + " is odd");
  }
}

Shape half_shape(const Shape& s) {
  Shape h = s;
  h[0] /= 2;
  return h;
}

Shape double_shape(const Shape& s) {
  Shape d = s;
  d[0] *= 2;
  return d;
}

}  // namespace

HaarPair haar_down_axial(const Tensor& v) {
  check_down_input(v);
  const int64_t inner = v.size() / v.dim(0);
  HaarPair out{Tensor(half_shape(v.shape())), Tensor(half_shape(v.shape()))};
  const int pairs = v.dim(0) / 2;
  for (int k = 0; k < pairs; ++k) {
    const float* even = v.data() + (2 * k) * inner;
    const float* odd = v.data() + (2 * k + 1) * inner;
    float* a = out.approx.data() + k * inner;
    float* d = out.detail.data() + k * inner;
    for (int64_t i = 0; i < inner; ++i) {
      a[i] = (even[i] + odd[i]) * kInvSqrt2;
      d[i] = (even[i] - odd[i]) * kInvSqrt2;
    }
  }
  return out;
}

Tensor haar_up_axial(const Tensor& approx, const Tensor& detail) {
  if (!approx.same_shape(detail)) {
    throw DataError("haar_up_axial: approx " + shape_str(approx.shape()) + " vs detail " +
                    shape_str(detail.shape()));
  }
  const int64_t inner = approx.size() / approx.dim(0);
  Tensor v(double_shape(approx.shape()));
  for (int k = 0; k < approx.dim(0); ++k) {
    const float* a = approx.data() + k * inner;
    const float* d = detail.data() + k * inner;
    float* even = v.data() + (2 * k) * inner;
    float* odd = v.data() + (2 * k + 1) * inner;
    for (int64_t i = 0; i < inner; ++i) {
      even[i] = (a[i] + d[i]) * kInvSqrt2;
      odd[i] = (a[i] - d[i]) * kInvSqrt2;
    }
  }
  return v;
}

Tensor haar_up_axial(const HaarPair& pair) { return haar_up_axial(pair.approx, pair.detail); }

namespace ad {

std::pair<Var, Var> haar_down_axial(Var volume) {
  const Tensor& v = volume.value();
  check_down_input(v);
  HaarPair pair = cwflow::haar_down_axial(v);
  const int64_t inner = v.size() / v.dim(0);
  const int pairs = v.dim(0) / 2;

  auto scatter = [inner, pairs](const Tensor& g, Tensor* pg, float odd_sign) {
    for (int k = 0; k < pairs; ++k) {
      const float* gs = g.data() + k * inner;
      float* even = pg->data() + (2 * k) * inner;
      float* odd = pg->data() + (2 * k + 1) * inner;
      for (int64_t i = 0; i < inner; ++i) {
        even[i] += gs[i] * kInvSqrt2;
        odd[i] += odd_sign * gs[i] * kInvSqrt2;
      }
    }
  };

  Var approx = volume.tape()->make(
      std::move(pair.approx), {volume},
      [scatter](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
                const std::vector<const Tensor*>&) {
        if (pg[0]) scatter(g, pg[0], 1.0f);
      },
      "haar_down.approx");
  Var detail = volume.tape()->make(
      std::move(pair.detail), {volume},
      [scatter](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
                const std::vector<const Tensor*>&) {
        if (pg[0]) scatter(g, pg[0], -1.0f);
      },
      "haar_down.detail");
  return {approx, detail};
}

Var haar_up_axial(Var approx, Var detail) {
  Tensor v = cwflow::haar_up_axial(approx.value(), detail.value());
  const int64_t inner = approx.value().size() / approx.shape()[0];
  const int pairs = approx.shape()[0];
  return approx.tape()->make(
      std::move(v), {approx, detail},
      [inner, pairs](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
                     const std::vector<const Tensor*>&) {
        for (int k = 0; k < pairs; ++k) {
          const float* even = g.data() + (2 * k) * inner;
          const float* odd = g.data() + (2 * k + 1) * inner;
          if (pg[0]) {
            float* a = pg[0]->data() + k * inner;
            for (int64_t i = 0; i < inner; ++i) a[i] += (even[i] + odd[i]) * kInvSqrt2;
          }
          if (pg[1]) {
            float* d = pg[1]->data() + k * inner;
            for (int64_t i = 0; i < inner; ++i) d[i] += (even[i] - odd[i]) * kInvSqrt2;
          }
        }
      },
      "haar_up");
}

}  // namespace ad

}  // namespace cwflow
