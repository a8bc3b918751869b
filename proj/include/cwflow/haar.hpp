#pragma once

#include <utility>

#include "cwflow/autodiff.hpp"
#include "cwflow/tensor.hpp"

namespace cwflow {

// Orthonormal 1D Haar transform along the leading (axial/depth) dimension.
// approx_k = (v_{2k} + v_{2k+1})/sqrt(2), detail_k = (v_{2k} - v_{2k+1})/sqrt(2).
// The map is orthogonal, so it preserves energy and contributes exactly 0 to
// any log-determinant.
struct HaarPair {
  Tensor approx;
  Tensor detail;
};

HaarPair haar_down_axial(const Tensor& volume);
Tensor haar_up_axial(const HaarPair& pair);
Tensor haar_up_axial(const Tensor& approx, const Tensor& detail);

// Recording variants used inside differentiated losses.
namespace ad {
std::pair<Var, Var> haar_down_axial(Var volume);
Var haar_up_axial(Var approx, Var detail);
}  // namespace ad

}  // namespace cwflow
