#pragma once

#include <string>
#include <variant>
#include <vector>

#include "cwflow/autodiff.hpp"
#include "cwflow/rng.hpp"
#include "cwflow/tensor.hpp"

namespace cwflow::flow {

// Latent tensor plus accumulated log|det J| for one flow pass. log_det is the
// recorded scalar used in losses; log_det64 carries the same quantity
// accumulated in 64-bit for reporting.
struct FlowOutput {
  ad::Var z;
  ad::Var log_det;
  double log_det64 = 0.0;
};

// 2D convolution layer (odd square kernel, same padding).
struct Conv2dLayer {
  Parameter weight;  // [Co,Ci,k,k]
  Parameter bias;    // [Co]

  Conv2dLayer() = default;
  Conv2dLayer(const std::string& name, int in_ch, int out_ch, int kernel, Rng& rng,
              bool zero_init);
  ad::Var apply(ad::Tape& t, ad::Var x);
  void collect(std::vector<Parameter*>& out);
};

struct Conv1dLayer {
  Parameter weight;  // [Co,Ci,k]
  Parameter bias;    // [Co]

  Conv1dLayer() = default;
  Conv1dLayer(const std::string& name, int in_ch, int out_ch, int kernel, Rng& rng,
              bool zero_init);
  ad::Var apply(ad::Tape& t, ad::Var x);
  void collect(std::vector<Parameter*>& out);
};

// Two 3x3 convolutions with a ReLU between. The final layer is
// zero-initialized so a freshly built block is the identity map.
struct CondNet {
  Conv2dLayer c1, c2;

  CondNet() = default;
  CondNet(const std::string& name, int in_ch, int hidden, int out_ch, Rng& rng);
  ad::Var apply(ad::Tape& t, ad::Var cond);
  void collect(std::vector<Parameter*>& out);
};

// Conditional affine ("CAT") block: scaling and translation computed from the
// condition and applied elementwise. Scales are soft-clamped:
// s = clamp * (2/pi) * arctan(s_raw).
struct CondAffineLayer {
  std::string name;
  CondNet net;  // cond -> [2C,H,W], split into (s_raw, t)
  double clamp = 1.9;
  int channels = 0;

  FlowOutput forward(ad::Tape& t, ad::Var x, ad::Var cond);
  ad::Var inverse(ad::Tape& t, ad::Var y, ad::Var cond);
};

// Conditional coupling block: the first half of the channels passes through
// and, together with the condition, parameterizes an affine map of the
// second half.
struct CondCouplingLayer {
  std::string name;
  CondNet net;  // [C/2 + cond_ch] -> [C, H, W], split into (s_raw, t)
  double clamp = 1.9;
  int channels = 0;

  FlowOutput forward(ad::Tape& t, ad::Var x, ad::Var cond);
  ad::Var inverse(ad::Tape& t, ad::Var y, ad::Var cond);
};

// Fixed random permutation along a stored axis. Volume preserving.
struct PermuteLayer {
  std::string name;
  int axis = 0;
  std::vector<int> perm;
  std::vector<int> inverse_perm;

  PermuteLayer() = default;
  PermuteLayer(std::string name_, int axis_, std::vector<int> perm_);
  ad::Var forward(ad::Tape& t, ad::Var x) const;
  ad::Var inverse(ad::Tape& t, ad::Var y) const;
};

using FlowLayer = std::variant<PermuteLayer, CondAffineLayer, CondCouplingLayer>;

enum class BlockType { Affine, Coupling };

struct FlowStackConfig {
  Shape data_shape;     // [C,H,W] of the tensors this stack transforms
  int cond_channels = 0;
  int blocks = 6;
  int hidden_channels = 14;
  BlockType block_type = BlockType::Affine;
  double clamp = 1.9;
};

// Ordered invertible layers with exact log-determinant accounting.
class FlowStack {
 public:
  FlowStack() = default;
  FlowStack(const std::string& name, const FlowStackConfig& cfg, Rng& rng);

  FlowOutput forward(ad::Tape& t, ad::Var x, ad::Var cond);
  ad::Var inverse(ad::Tape& t, ad::Var z, ad::Var cond);

  std::vector<Parameter*> params();
  // Non-trainable state (permutations), serialized alongside parameters.
  std::vector<std::pair<std::string, Tensor>> buffers() const;
  void load_buffer(const std::string& name, const Tensor& data);

  const std::vector<FlowLayer>& layers() const { return layers_; }
  std::vector<FlowLayer>& layers() { return layers_; }

 private:
  std::vector<FlowLayer> layers_;
};

// Per-dimension negative log-likelihood of a flow output under a standard
// normal base: (sum(z^2)/2 + (N/2) ln(2*pi) - log_det + rho*||theta||^2) / N.
ad::Var nll(ad::Tape& t, const FlowOutput& out, const std::vector<Parameter*>& params = {},
            double rho = 0.0);
double nll_value(const Tensor& z, double log_det, const std::vector<Parameter*>& params = {},
                 double rho = 0.0);

}  // namespace cwflow::flow
