#include "cwflow/flow.hpp"

#include <cmath>

namespace cwflow::flow {

namespace {

Tensor he_init(const Shape& shape, int fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / std::max(1, fan_in));
  return rng.normal_tensor(shape, 0.0, stddev);
}

}  // namespace

Conv2dLayer::Conv2dLayer(const std::string& name, int in_ch, int out_ch, int kernel, Rng& rng,
                         bool zero_init) {
  Shape wshape{out_ch, in_ch, kernel, kernel};
  Tensor w = zero_init ? Tensor(wshape) : he_init(wshape, in_ch * kernel * kernel, rng);
  weight = Parameter(name + "/weight", std::move(w));
  bias = Parameter(name + "/bias", Tensor({out_ch}));
}

ad::Var Conv2dLayer::apply(ad::Tape& t, ad::Var x) {
  return ad::bias_add(ad::conv2d(x, t.param(weight), ad::Padding::Same), t.param(bias));
}

void Conv2dLayer::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

Conv1dLayer::Conv1dLayer(const std::string& name, int in_ch, int out_ch, int kernel, Rng& rng,
                         bool zero_init) {
  Shape wshape{out_ch, in_ch, kernel};
  Tensor w = zero_init ? Tensor(wshape) : he_init(wshape, in_ch * kernel, rng);
  weight = Parameter(name + "/weight", std::move(w));
  bias = Parameter(name + "/bias", Tensor({out_ch}));
}

ad::Var Conv1dLayer::apply(ad::Tape& t, ad::Var x) {
  return ad::bias_add(ad::conv1d(x, t.param(weight), ad::Padding::Same), t.param(bias));
}

void Conv1dLayer::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

CondNet::CondNet(const std::string& name, int in_ch, int hidden, int out_ch, Rng& rng)
    : c1(name + "/c1", in_ch, hidden, 3, rng, false),
      c2(name + "/c2", hidden, out_ch, 3, rng, true) {}

ad::Var CondNet::apply(ad::Tape& t, ad::Var cond) {
  return c2.apply(t, ad::relu(c1.apply(t, cond)));
}

void CondNet::collect(std::vector<Parameter*>& out) {
  c1.collect(out);
  c2.collect(out);
}

namespace {

// s = clamp * (2/pi) * arctan(s_raw)
ad::Var soft_clamp(ad::Var s_raw, double clamp) {
  return ad::mul_scalar(ad::atan_op(s_raw), clamp * 2.0 / M_PI);
}

}  // namespace

FlowOutput CondAffineLayer::forward(ad::Tape& t, ad::Var x, ad::Var cond) {
  try {
    ad::Var raw = net.apply(t, cond);
    if (raw.shape()[0] != 2 * channels) {
      throw DataError("condition net produced " + std::to_string(raw.shape()[0]) +
                      " channels, expected " + std::to_string(2 * channels));
    }
    auto [s_raw, trans] = ad::split0(raw, channels);
    if (!(s_raw.value().same_shape(x.value()))) {
      throw DataError("scale shape " + shape_str(s_raw.shape()) + " vs input " +
                      shape_str(x.shape()));
    }
    ad::Var s = soft_clamp(s_raw, clamp);
    ad::Var y = ad::add(ad::mul(x, ad::exp_op(s)), trans);
    FlowOutput out;
    out.z = y;
    out.log_det = ad::sum(s);
    out.log_det64 = s.value().sum64();
    return out;
  } catch (const NumericError& e) {
    throw NumericError(name + ": " + e.what());
  }
}

ad::Var CondAffineLayer::inverse(ad::Tape& t, ad::Var y, ad::Var cond) {
  try {
    ad::Var raw = net.apply(t, cond);
    auto [s_raw, trans] = ad::split0(raw, channels);
    ad::Var s = soft_clamp(s_raw, clamp);
    return ad::mul(ad::sub(y, trans), ad::exp_op(ad::neg(s)));
  } catch (const NumericError& e) {
    throw NumericError(name + ": " + e.what());
  }
}

FlowOutput CondCouplingLayer::forward(ad::Tape& t, ad::Var x, ad::Var cond) {
  try {
    const int half = channels / 2;
    auto [xa, xb] = ad::split0(x, half);
    ad::Var raw = net.apply(t, ad::concat0(xa, cond));
    auto [s_raw, trans] = ad::split0(raw, channels - half);
    ad::Var s = soft_clamp(s_raw, clamp);
    ad::Var yb = ad::add(ad::mul(xb, ad::exp_op(s)), trans);
    FlowOutput out;
    out.z = ad::concat0(xa, yb);
    out.log_det = ad::sum(s);
    out.log_det64 = s.value().sum64();
    return out;
  } catch (const NumericError& e) {
    throw NumericError(name + ": " + e.what());
  }
}

ad::Var CondCouplingLayer::inverse(ad::Tape& t, ad::Var y, ad::Var cond) {
  try {
    const int half = channels / 2;
    auto [ya, yb] = ad::split0(y, half);
    ad::Var raw = net.apply(t, ad::concat0(ya, cond));
    auto [s_raw, trans] = ad::split0(raw, channels - half);
    ad::Var s = soft_clamp(s_raw, clamp);
    ad::Var xb = ad::mul(ad::sub(yb, trans), ad::exp_op(ad::neg(s)));
    return ad::concat0(ya, xb);
  } catch (const NumericError& e) {
    throw NumericError(name + ": " + e.what());
  }
}

PermuteLayer::PermuteLayer(std::string name_, int axis_, std::vector<int> perm_)
    : name(std::move(name_)), axis(axis_), perm(std::move(perm_)) {
  inverse_perm.assign(perm.size(), 0);
  std::vector<char> seen(perm.size(), 0);
  for (size_t i = 0; i < perm.size(); ++i) {
    const int p = perm[i];
    if (p < 0 || p >= static_cast<int>(perm.size()) || seen[static_cast<size_t>(p)]) {
      throw DataError(name + ": permutation is not a bijection");
    }
    seen[static_cast<size_t>(p)] = 1;
    inverse_perm[static_cast<size_t>(p)] = static_cast<int>(i);
  }
}

ad::Var PermuteLayer::forward(ad::Tape& t, ad::Var x) const {
  (void)t;
  return ad::permute_axis(x, axis, perm);
}

ad::Var PermuteLayer::inverse(ad::Tape& t, ad::Var y) const {
  (void)t;
  return ad::permute_axis(y, axis, inverse_perm);
}

FlowStack::FlowStack(const std::string& name, const FlowStackConfig& cfg, Rng& rng) {
  if (cfg.data_shape.size() != 3) {
    throw DataError("flow stack expects [C,H,W] data, got " + shape_str(cfg.data_shape));
  }
  const int channels = cfg.data_shape[0];
  if (cfg.block_type == BlockType::Coupling && channels % 2 != 0) {
    throw DataError("coupling blocks need an even channel count, got " + std::to_string(channels));
  }
  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string base = name + "/block" + std::to_string(b);
    const int axis = rng.uniform_int(3);
    const int n = cfg.data_shape[static_cast<size_t>(axis)];
    layers_.emplace_back(PermuteLayer(base + "/perm", axis, rng.permutation(n)));
    if (cfg.block_type == BlockType::Affine) {
      CondAffineLayer layer;
      layer.name = base + "/affine";
      layer.clamp = cfg.clamp;
      layer.channels = channels;
      layer.net = CondNet(layer.name, cfg.cond_channels, cfg.hidden_channels, 2 * channels, rng);
      layers_.emplace_back(std::move(layer));
    } else {
      CondCouplingLayer layer;
      layer.name = base + "/coupling";
      layer.clamp = cfg.clamp;
      layer.channels = channels;
      layer.net = CondNet(layer.name, channels / 2 + cfg.cond_channels, cfg.hidden_channels,
                          2 * (channels - channels / 2), rng);
      layers_.emplace_back(std::move(layer));
    }
  }
}

FlowOutput FlowStack::forward(ad::Tape& t, ad::Var x, ad::Var cond) {
  FlowOutput acc;
  acc.z = x;
  acc.log_det = t.constant(Tensor::scalar(0.0f));
  acc.log_det64 = 0.0;
  for (auto& layer : layers_) {
    if (auto* perm = std::get_if<PermuteLayer>(&layer)) {
      acc.z = perm->forward(t, acc.z);
    } else if (auto* affine = std::get_if<CondAffineLayer>(&layer)) {
      FlowOutput step = affine->forward(t, acc.z, cond);
      acc.z = step.z;
      acc.log_det = ad::add(acc.log_det, step.log_det);
      acc.log_det64 += step.log_det64;
    } else {
      FlowOutput step = std::get<CondCouplingLayer>(layer).forward(t, acc.z, cond);
      acc.z = step.z;
      acc.log_det = ad::add(acc.log_det, step.log_det);
      acc.log_det64 += step.log_det64;
    }
  }
  return acc;
}

ad::Var FlowStack::inverse(ad::Tape& t, ad::Var z, ad::Var cond) {
  ad::Var x = z;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    if (auto* perm = std::get_if<PermuteLayer>(&*it)) {
      x = perm->inverse(t, x);
    } else if (auto* affine = std::get_if<CondAffineLayer>(&*it)) {
      x = affine->inverse(t, x, cond);
    } else {
      x = std::get<CondCouplingLayer>(*it).inverse(t, x, cond);
    }
  }
  return x;
}

std::vector<Parameter*> FlowStack::params() {
  std::vector<Parameter*> out;
  for (auto& layer : layers_) {
    if (auto* affine = std::get_if<CondAffineLayer>(&layer)) {
      affine->net.collect(out);
    } else if (auto* coupling = std::get_if<CondCouplingLayer>(&layer)) {
      coupling->net.collect(out);
    }
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> FlowStack::buffers() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& layer : layers_) {
    if (const auto* perm = std::get_if<PermuteLayer>(&layer)) {
      Tensor t({static_cast<int>(perm->perm.size()) + 1});
      t[0] = static_cast<float>(perm->axis);
      for (size_t i = 0; i < perm->perm.size(); ++i) {
        t[static_cast<int64_t>(i) + 1] = static_cast<float>(perm->perm[i]);
      }
      out.emplace_back(perm->name, std::move(t));
    }
  }
  return out;
}

void FlowStack::load_buffer(const std::string& name, const Tensor& data) {
  if (data.size() < 2) throw DataError("permutation buffer too short for " + name);
  for (auto& layer : layers_) {
    if (auto* perm = std::get_if<PermuteLayer>(&layer)) {
      if (perm->name != name) continue;
      std::vector<int> p(static_cast<size_t>(data.size() - 1));
      for (size_t i = 0; i < p.size(); ++i) {
        p[i] = static_cast<int>(data[static_cast<int64_t>(i) + 1]);
      }
      *perm = PermuteLayer(name, static_cast<int>(data[0]), std::move(p));
      return;
    }
  }
  throw DataError("no permutation layer named " + name);
}

ad::Var nll(ad::Tape& t, const FlowOutput& out, const std::vector<Parameter*>& params,
            double rho) {
  const double n = static_cast<double>(out.z.size());
  ad::Var loss = ad::mul_scalar(ad::sum_squares(out.z), 0.5 / n);
  loss = ad::add(loss, ad::mul_scalar(out.log_det, -1.0 / n));
  loss = ad::add_scalar(loss, 0.5 * std::log(2.0 * M_PI));
  if (rho != 0.0 && !params.empty()) {
    ad::Var reg = t.constant(Tensor::scalar(0.0f));
    for (Parameter* p : params) reg = ad::add(reg, ad::sum_squares(t.param(*p)));
    loss = ad::add(loss, ad::mul_scalar(reg, rho / n));
  }
  return loss;
}

double nll_value(const Tensor& z, double log_det, const std::vector<Parameter*>& params,
                 double rho) {
  const double n = static_cast<double>(z.size());
  double v = 0.5 * z.sum_squares64() + 0.5 * n * std::log(2.0 * M_PI) - log_det;
  if (rho != 0.0) {
    double reg = 0.0;
    for (const Parameter* p : params) reg += p->value.sum_squares64();
    v += rho * reg;
  }
  return v / n;
}

}  // namespace cwflow::flow
