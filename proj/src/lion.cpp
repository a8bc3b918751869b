#include "cwflow/lion.hpp"

namespace cwflow {

void LionConfig::validate() const {
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw DataError("lion: beta1/beta2 must lie in [0,1)");
  }
  if (lr < 0.0 || weight_decay < 0.0) throw DataError("lion: lr/weight_decay must be >= 0");
}

void lion_step(Tensor& param, const Tensor& grad, LionState& state, const LionConfig& cfg) {
  if (!param.same_shape(grad)) {
    throw DataError("lion_step: grad shape " + shape_str(grad.shape()) + " vs param " +
                    shape_str(param.shape()));
  }
  if (state.momentum.empty()) state.momentum = Tensor(param.shape());
  if (!state.momentum.same_shape(param)) throw DataError("lion_step: momentum shape mismatch");

  const float b1 = static_cast<float>(cfg.beta1);
  const float b2 = static_cast<float>(cfg.beta2);
  const float lr = static_cast<float>(cfg.lr);
  const float wd = static_cast<float>(cfg.weight_decay);

  float* p = param.data();
  const float* g = grad.data();
  float* m = state.momentum.data();
  for (int64_t i = 0; i < param.size(); ++i) {
    const float c = b1 * m[i] + (1.0f - b1) * g[i];
    const float update = c > 0.0f ? 1.0f : (c < 0.0f ? -1.0f : 0.0f);
    p[i] -= lr * (update + wd * p[i]);
    m[i] = b2 * m[i] + (1.0f - b2) * g[i];
  }
}

Lion::Lion(std::vector<Parameter*> params, LionConfig cfg)
    : params_(std::move(params)), states_(params_.size()), cfg_(cfg) {
  cfg_.validate();
}

void Lion::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    lion_step(params_[i]->value, params_[i]->gradient, states_[i], cfg_);
  }
}

}  // namespace cwflow
