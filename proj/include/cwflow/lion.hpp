#pragma once

#include <vector>

#include "cwflow/autodiff.hpp"
#include "cwflow/tensor.hpp"

namespace cwflow {

struct LionConfig {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double lr = 1e-4;
  double weight_decay = 1e-5;

  void validate() const;
};

// Momentum for one parameter. update = sign(beta1*m + (1-beta1)*g);
// p <- p - lr*(update + weight_decay*p); m <- beta2*m + (1-beta2)*g.
struct LionState {
  Tensor momentum;
};

void lion_step(Tensor& param, const Tensor& grad, LionState& state, const LionConfig& cfg);

// Optimizer over a parameter set; states aligned to the parameter order.
class Lion {
 public:
  Lion(std::vector<Parameter*> params, LionConfig cfg);
  void step();
  const LionConfig& config() const { return cfg_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<LionState> states_;
  LionConfig cfg_;
};

}  // namespace cwflow
