#include "cwflow/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cwflow {

void zero_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->zero_grad();
}

namespace ad {

const Tensor& Var::value() const {
  if (!tape_) throw DataError("use of empty Var");
  return tape_->nodes_[static_cast<size_t>(id_)].value;
}

double Var::value64() const {
  if (!tape_) throw DataError("use of empty Var");
  const auto& node = tape_->nodes_[static_cast<size_t>(id_)];
  if (node.has_scalar64) return node.scalar64;
  if (node.value.size() != 1) throw DataError("value64 on non-scalar Var");
  return node.value[0];
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.op = "param";
  if (record_) {
    n.param = &p;
    n.requires_grad = true;
  }
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::make(Tensor value, const std::vector<Var>& parents, BackwardFn fn, const char* op_name) {
  value.check_finite(std::string("output of ") + op_name);
  Node n;
  n.value = std::move(value);
  n.op = op_name;
  for (const Var& p : parents) {
    if (p.tape_ != this) throw DataError(std::string(op_name) + ": operand from another recording");
    if (nodes_[static_cast<size_t>(p.id_)].requires_grad) n.requires_grad = true;
    n.parents.push_back(p.id_);
  }
  if (n.requires_grad) {
    n.backward = std::move(fn);
  } else {
    n.parents.clear();  // nothing flows back; drop edges
  }
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::set_scalar64(const Var& v, double value) {
  if (v.tape_ != this) throw DataError("set_scalar64: Var from another recording");
  Node& n = nodes_[static_cast<size_t>(v.id_)];
  n.has_scalar64 = true;
  n.scalar64 = value;
  n.value[0] = static_cast<float>(value);
}

bool Tape::requires_grad(const Var& v) const {
  return v.tape_ == this && nodes_[static_cast<size_t>(v.id_)].requires_grad;
}

void Tape::backward(const Var& loss) {
  if (loss.tape_ != this) throw DataError("backward: loss from another recording");
  if (backward_done_) throw UsageError("backward called twice on the same recording; reset() first");
  backward_done_ = true;
  if (nodes_[static_cast<size_t>(loss.id_)].value.size() != 1) {
    throw DataError("backward requires a scalar loss");
  }

  std::vector<Tensor> grads(nodes_.size());
  auto ensure = [&](int id) -> Tensor& {
    Tensor& g = grads[static_cast<size_t>(id)];
    if (g.empty()) g = Tensor(nodes_[static_cast<size_t>(id)].value.shape());
    return g;
  };
  ensure(loss.id_)[0] = 1.0f;

  std::vector<Tensor*> pgrads;
  std::vector<const Tensor*> pvals;
  for (int id = loss.id_; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad || grads[static_cast<size_t>(id)].empty()) continue;
    if (!n.backward) continue;
    pgrads.clear();
    pvals.clear();
    for (int pid : n.parents) {
      Node& pn = nodes_[static_cast<size_t>(pid)];
      pgrads.push_back(pn.requires_grad ? &ensure(pid) : nullptr);
      pvals.push_back(&pn.value);
    }
    n.backward(grads[static_cast<size_t>(id)], n.value, pgrads, pvals);
  }

  for (size_t id = 0; id < nodes_.size(); ++id) {
    Node& n = nodes_[id];
    if (!n.param || grads[id].empty()) continue;
    float* dst = n.param->gradient.data();
    const float* src = grads[id].data();
    for (int64_t i = 0; i < grads[id].size(); ++i) dst[i] += src[i];
    n.param->gradient.check_finite("gradient of " + n.param->name);
  }
}

void Tape::reset() {
  nodes_.clear();
  backward_done_ = false;
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!(a.value().same_shape(b.value()))) {
    throw DataError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
  }
}

Tape* tape_of(const Var& v) {
  if (!v.valid()) throw DataError("operation on empty Var");
  return v.tape();
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  Var result = tape_of(a)->make(
      std::move(out), {a, b},
      [](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
         const std::vector<const Tensor*>&) {
        for (int s = 0; s < 2; ++s) {
          if (!pg[s]) continue;
          float* d = pg[s]->data();
          for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
      },
      "add");
  if (result.size() == 1 && a.size() == 1) {
    result.tape()->set_scalar64(result, a.value64() + b.value64());
  }
  return result;
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  Var result = tape_of(a)->make(
      std::move(out), {a, b},
      [](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
         const std::vector<const Tensor*>&) {
        if (pg[0]) {
          float* d = pg[0]->data();
          for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
        if (pg[1]) {
          float* d = pg[1]->data();
          for (int64_t i = 0; i < g.size(); ++i) d[i] -= g[i];
        }
      },
      "sub");
  if (result.size() == 1 && a.size() == 1) {
    result.tape()->set_scalar64(result, a.value64() - b.value64());
  }
  return result;
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Var result = tape_of(a)->make(
      std::move(out), {a, b},
      [](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
         const std::vector<const Tensor*>& pv) {
        if (pg[0]) {
          float* d = pg[0]->data();
          const float* o = pv[1]->data();
          for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * o[i];
        }
        if (pg[1]) {
          float* d = pg[1]->data();
          const float* o = pv[0]->data();
          for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * o[i];
        }
      },
      "mul");
  if (result.size() == 1 && a.size() == 1) {
    result.tape()->set_scalar64(result, a.value64() * b.value64());
  }
  return result;
}

Var square(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = av[i] * av[i];
  return tape_of(a)->make(
      std::move(out), {a},
      [](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
         const std::vector<const Tensor*>& pv) {
        if (!pg[0]) return;
        float* d = pg[0]->data();
        const float* x = pv[0]->data();
        for (int64_t i = 0; i < g.size(); ++i) d[i] += 2.0f * x[i] * g[i];
      },
      "square");
}

Var neg(Var a) { return mul_scalar(a, -1.0); }

Var add_scalar(Var a, double c) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  const float cf = static_cast<float>(c);
  for (int64_t i = 0; i < out.size(); ++i) out[i] = av[i] + cf;
  Var result = tape_of(a)->make(
      std::move(out), {a},
      [](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
         const std::vector<const Tensor*>&) {
        if (!pg[0]) return;
        float* d = pg[0]->data();
        for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
      },
      "add_scalar");
  if (result.size() == 1) result.tape()->set_scalar64(result, a.value64() + c);
  return result;
}

Var mul_scalar(Var a, double c) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  const float cf = static_cast<float>(c);
  for (int64_t i = 0; i < out.size(); ++i) out[i] = av[i] * cf;
  Var result = tape_of(a)->make(
      std::move(out), {a},
      [cf](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
           const std::vector<const Tensor*>&) {
        if (!pg[0]) return;
        float* d = pg[0]->data();
        for (int64_t i = 0; i < g.size(); ++i) d[i] += cf * g[i];
      },
      "mul_scalar");
  if (result.size() == 1) result.tape()->set_scalar64(result, a.value64() * c);
  return result;
}

namespace {

template <typename Fwd, typename Bwd>
Var unary_op(Var a, Fwd f, Bwd dfdx, const char* name) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return tape_of(a)->make(
      std::move(out), {a},
      [dfdx](const Tensor& g, const Tensor& y, const std::vector<Tensor*>& pg,
             const std::vector<const Tensor*>& pv) {
        if (!pg[0]) return;
        float* d = pg[0]->data();
        const float* x = pv[0]->data();
        const float* yv = y.data();
        for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * dfdx(x[i], yv[i]);
      },
      name);
}

}  // namespace

Var exp_op(Var a) {
  return unary_op(
      a, [](float x) { return std::exp(x); }, [](float, float y) { return y; }, "exp");
}

Var log_op(Var a) {
  return unary_op(
      a, [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; }, "log");
}

Var tanh_op(Var a) {
  return unary_op(
      a, [](float x) { return std::tanh(x); }, [](float, float y) { return 1.0f - y * y; },
      "tanh");
}

Var atan_op(Var a) {
  return unary_op(
      a, [](float x) { return std::atan(x); },
      [](float x, float) { return 1.0f / (1.0f + x * x); }, "atan");
}

Var sigmoid(Var a) {
  return unary_op(
      a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
      [](float, float y) { return y * (1.0f - y); }, "sigmoid");
}

Var relu(Var a) {
  return unary_op(
      a, [](float x) { return x > 0.0f ? x : 0.0f; },
      [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; }, "relu");
}

Var sum(Var a) {
  double acc = a.value().sum64();
  Var out = tape_of(a)->make(
      Tensor::scalar(static_cast<float>(acc)), {a},
      [](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
         const std::vector<const Tensor*>&) {
        if (!pg[0]) return;
        float* d = pg[0]->data();
        const float gv = g[0];
        for (int64_t i = 0; i < pg[0]->size(); ++i) d[i] += gv;
      },
      "sum");
  out.tape()->set_scalar64(out, acc);
  return out;
}

Var mean(Var a) {
  const double inv_n = 1.0 / static_cast<double>(a.size());
  double acc = a.value().sum64() * inv_n;
  Var out = tape_of(a)->make(
      Tensor::scalar(static_cast<float>(acc)), {a},
      [inv_n](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
              const std::vector<const Tensor*>&) {
        if (!pg[0]) return;
        float* d = pg[0]->data();
        const float gv = static_cast<float>(g[0] * inv_n);
        for (int64_t i = 0; i < pg[0]->size(); ++i) d[i] += gv;
      },
      "mean");
  out.tape()->set_scalar64(out, acc);
  return out;
}

Var sum_squares(Var a) {
  double acc = a.value().sum_squares64();
  Var out = tape_of(a)->make(
      Tensor::scalar(static_cast<float>(acc)), {a},
      [](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
         const std::vector<const Tensor*>& pv) {
        if (!pg[0]) return;
        float* d = pg[0]->data();
        const float* x = pv[0]->data();
        const float gv = g[0];
        for (int64_t i = 0; i < pg[0]->size(); ++i) d[i] += 2.0f * x[i] * gv;
      },
      "sum_squares");
  out.tape()->set_scalar64(out, acc);
  return out;
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return tape_of(a)->make(
      std::move(out), {a},
      [](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
         const std::vector<const Tensor*>&) {
        if (!pg[0]) return;
        float* d = pg[0]->data();
        for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
      },
      "reshape");
}

namespace {

// Views a tensor as [outer, n, inner] around the given axis.
void axis_split(const Shape& s, int axis, int64_t& outer, int64_t& n, int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  n = s[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace

Var permute_axis(Var a, int axis, const std::vector<int>& perm) {
  const Tensor& av = a.value();
  if (axis < 0 || axis >= av.rank()) throw DataError("permute_axis: axis out of range");
  int64_t outer, n, inner;
  axis_split(av.shape(), axis, outer, n, inner);
  if (static_cast<int64_t>(perm.size()) != n) {
    throw DataError("permute_axis: permutation length " + std::to_string(perm.size()) +
                    " vs axis size " + std::to_string(n));
  }
  Tensor out(av.shape());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < n; ++i) {
      const float* src = av.data() + (o * n + perm[static_cast<size_t>(i)]) * inner;
      float* dst = out.data() + (o * n + i) * inner;
      std::memcpy(dst, src, static_cast<size_t>(inner) * sizeof(float));
    }
  }
  std::vector<int> perm_copy = perm;
  return tape_of(a)->make(
      std::move(out), {a},
      [axis, perm_copy, outer, n, inner](const Tensor& g, const Tensor&,
                                         const std::vector<Tensor*>& pg,
                                         const std::vector<const Tensor*>&) {
        if (!pg[0]) return;
        for (int64_t o = 0; o < outer; ++o) {
          for (int64_t i = 0; i < n; ++i) {
            const float* src = g.data() + (o * n + i) * inner;
            float* dst = pg[0]->data() + (o * n + perm_copy[static_cast<size_t>(i)]) * inner;
            for (int64_t k = 0; k < inner; ++k) dst[k] += src[k];
          }
        }
      },
      "permute_axis");
}

Var concat0(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != bv.rank() || av.rank() < 1) throw DataError("concat0: rank mismatch");
  for (int i = 1; i < av.rank(); ++i) {
    if (av.dim(i) != bv.dim(i)) throw DataError("concat0: trailing shape mismatch");
  }
  Shape s = av.shape();
  s[0] += bv.dim(0);
  Tensor out(s);
  std::memcpy(out.data(), av.data(), static_cast<size_t>(av.size()) * sizeof(float));
  std::memcpy(out.data() + av.size(), bv.data(), static_cast<size_t>(bv.size()) * sizeof(float));
  const int64_t na = av.size();
  return tape_of(a)->make(
      std::move(out), {a, b},
      [na](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
           const std::vector<const Tensor*>&) {
        if (pg[0]) {
          float* d = pg[0]->data();
          for (int64_t i = 0; i < na; ++i) d[i] += g[i];
        }
        if (pg[1]) {
          float* d = pg[1]->data();
          for (int64_t i = na; i < g.size(); ++i) d[i - na] += g[i];
        }
      },
      "concat0");
}

std::pair<Var, Var> split0(Var a, int first_count) {
  const Tensor& av = a.value();
  if (av.rank() < 1 || first_count <= 0 || first_count >= av.dim(0)) {
    throw DataError("split0: invalid split " + std::to_string(first_count) + " of " +
                    shape_str(av.shape()));
  }
  Shape sa = av.shape();
  sa[0] = first_count;
  Shape sb = av.shape();
  sb[0] = av.dim(0) - first_count;
  Tensor ta(sa), tb(sb);
  std::memcpy(ta.data(), av.data(), static_cast<size_t>(ta.size()) * sizeof(float));
  std::memcpy(tb.data(), av.data() + ta.size(), static_cast<size_t>(tb.size()) * sizeof(float));
  const int64_t offset_b = ta.size();
  Var va = tape_of(a)->make(
      std::move(ta), {a},
      [](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
         const std::vector<const Tensor*>&) {
        if (!pg[0]) return;
        float* d = pg[0]->data();
        for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
      },
      "split0.first");
  Var vb = tape_of(a)->make(
      std::move(tb), {a},
      [offset_b](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
                 const std::vector<const Tensor*>&) {
        if (!pg[0]) return;
        float* d = pg[0]->data() + offset_b;
        for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
      },
      "split0.second");
  return {va, vb};
}

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DataError("matmul: incompatible shapes " + shape_str(av.shape()) + " x " +
                    shape_str(bv.shape()));
  }
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    for (int l = 0; l < k; ++l) {
      const float x = av.at(i, l);
      const float* brow = bv.data() + static_cast<int64_t>(l) * n;
      float* orow = out.data() + static_cast<int64_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  }
  return tape_of(a)->make(
      std::move(out), {a, b},
      [m, k, n](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
                const std::vector<const Tensor*>& pv) {
        if (pg[0]) {  // dA = g * B^T
          for (int i = 0; i < m; ++i) {
            for (int l = 0; l < k; ++l) {
              double acc = 0.0;
              const float* grow = g.data() + static_cast<int64_t>(i) * n;
              const float* brow = pv[1]->data() + static_cast<int64_t>(l) * n;
              for (int j = 0; j < n; ++j) acc += static_cast<double>(grow[j]) * brow[j];
              pg[0]->at(i, l) += static_cast<float>(acc);
            }
          }
        }
        if (pg[1]) {  // dB = A^T * g
          for (int l = 0; l < k; ++l) {
            for (int i = 0; i < m; ++i) {
              const float x = pv[0]->at(i, l);
              const float* grow = g.data() + static_cast<int64_t>(i) * n;
              float* drow = pg[1]->data() + static_cast<int64_t>(l) * n;
              for (int j = 0; j < n; ++j) drow[j] += x * grow[j];
            }
          }
        }
      },
      "matmul");
}

namespace conv_detail {

struct ConvDims {
  int ci, h, w, co, kh, kw, ph, pw, ho, wo;
};

ConvDims conv2d_dims(const Tensor& input, const Tensor& kernels, Padding p) {
  if (input.rank() != 3) throw DataError("conv2d: input must be [C,H,W], got " + shape_str(input.shape()));
  if (kernels.rank() != 4) {
    throw DataError("conv2d: kernels must be [Co,Ci,kh,kw], got " + shape_str(kernels.shape()));
  }
  ConvDims d;
  d.ci = input.dim(0);
  d.h = input.dim(1);
  d.w = input.dim(2);
  d.co = kernels.dim(0);
  d.kh = kernels.dim(2);
  d.kw = kernels.dim(3);
  if (kernels.dim(1) != d.ci) {
    throw DataError("conv2d: input channels " + std::to_string(d.ci) + " vs kernel channels " +
                    std::to_string(kernels.dim(1)));
  }
  if (d.kh % 2 == 0 || d.kw % 2 == 0) throw DataError("conv2d: kernel sides must be odd");
  if (p == Padding::Same) {
    d.ph = d.kh / 2;
    d.pw = d.kw / 2;
    d.ho = d.h;
    d.wo = d.w;
  } else {
    d.ph = 0;
    d.pw = 0;
    d.ho = d.h - d.kh + 1;
    d.wo = d.w - d.kw + 1;
    if (d.ho <= 0 || d.wo <= 0) {
      throw DataError("conv2d: kernel " + shape_str(kernels.shape()) + " larger than input " +
                      shape_str(input.shape()) + " under valid padding");
    }
  }
  return d;
}

void forward(const float* in, const float* ker, float* out, const ConvDims& d) {
  std::memset(out, 0, static_cast<size_t>(d.co) * d.ho * d.wo * sizeof(float));
  for (int oc = 0; oc < d.co; ++oc) {
    for (int ic = 0; ic < d.ci; ++ic) {
      const float* kbase =
          ker + ((static_cast<int64_t>(oc) * d.ci) + ic) * d.kh * d.kw;
      const float* ibase = in + static_cast<int64_t>(ic) * d.h * d.w;
      float* obase = out + static_cast<int64_t>(oc) * d.ho * d.wo;
      for (int dh = 0; dh < d.kh; ++dh) {
        for (int dw = 0; dw < d.kw; ++dw) {
          const float kv = kbase[dh * d.kw + dw];
          const int oh0 = std::max(0, d.ph - dh);
          const int oh1 = std::min(d.ho, d.h + d.ph - dh);
          const int ow0 = std::max(0, d.pw - dw);
          const int ow1 = std::min(d.wo, d.w + d.pw - dw);
          for (int oh = oh0; oh < oh1; ++oh) {
            const float* src = ibase + static_cast<int64_t>(oh + dh - d.ph) * d.w + (ow0 + dw - d.pw);
            float* dst = obase + static_cast<int64_t>(oh) * d.wo + ow0;
            for (int i = 0; i < ow1 - ow0; ++i) dst[i] += kv * src[i];
          }
        }
      }
    }
  }
}

void backward_input(const float* g, const float* ker, float* din, const ConvDims& d) {
  for (int oc = 0; oc < d.co; ++oc) {
    for (int ic = 0; ic < d.ci; ++ic) {
      const float* kbase =
          ker + ((static_cast<int64_t>(oc) * d.ci) + ic) * d.kh * d.kw;
      float* ibase = din + static_cast<int64_t>(ic) * d.h * d.w;
      const float* gbase = g + static_cast<int64_t>(oc) * d.ho * d.wo;
      for (int dh = 0; dh < d.kh; ++dh) {
        for (int dw = 0; dw < d.kw; ++dw) {
          const float kv = kbase[dh * d.kw + dw];
          const int oh0 = std::max(0, d.ph - dh);
          const int oh1 = std::min(d.ho, d.h + d.ph - dh);
          const int ow0 = std::max(0, d.pw - dw);
          const int ow1 = std::min(d.wo, d.w + d.pw - dw);
          for (int oh = oh0; oh < oh1; ++oh) {
            float* dst = ibase + static_cast<int64_t>(oh + dh - d.ph) * d.w + (ow0 + dw - d.pw);
            const float* src = gbase + static_cast<int64_t>(oh) * d.wo + ow0;
            for (int i = 0; i < ow1 - ow0; ++i) dst[i] += kv * src[i];
          }
        }
      }
    }
  }
}

void backward_kernel(const float* g, const float* in, float* dker, const ConvDims& d) {
  for (int oc = 0; oc < d.co; ++oc) {
    for (int ic = 0; ic < d.ci; ++ic) {
      float* kbase = dker + ((static_cast<int64_t>(oc) * d.ci) + ic) * d.kh * d.kw;
      const float* ibase = in + static_cast<int64_t>(ic) * d.h * d.w;
      const float* gbase = g + static_cast<int64_t>(oc) * d.ho * d.wo;
      for (int dh = 0; dh < d.kh; ++dh) {
        for (int dw = 0; dw < d.kw; ++dw) {
          const int oh0 = std::max(0, d.ph - dh);
          const int oh1 = std::min(d.ho, d.h + d.ph - dh);
          const int ow0 = std::max(0, d.pw - dw);
          const int ow1 = std::min(d.wo, d.w + d.pw - dw);
          double acc = 0.0;
          for (int oh = oh0; oh < oh1; ++oh) {
            const float* src = ibase + static_cast<int64_t>(oh + dh - d.ph) * d.w + (ow0 + dw - d.pw);
            const float* grow = gbase + static_cast<int64_t>(oh) * d.wo + ow0;
            float facc = 0.0f;
            for (int i = 0; i < ow1 - ow0; ++i) facc += grow[i] * src[i];
            acc += facc;
          }
          kbase[dh * d.kw + dw] += static_cast<float>(acc);
        }
      }
    }
  }
}

}  // namespace conv_detail

Var conv2d(Var input, Var kernels, Padding p) {
  conv_detail::ConvDims d = conv_detail::conv2d_dims(input.value(), kernels.value(), p);
  Tensor out({d.co, d.ho, d.wo});
  conv_detail::forward(input.value().data(), kernels.value().data(), out.data(), d);
  return tape_of(input)->make(
      std::move(out), {input, kernels},
      [d](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
          const std::vector<const Tensor*>& pv) {
        if (pg[0]) conv_detail::backward_input(g.data(), pv[1]->data(), pg[0]->data(), d);
        if (pg[1]) conv_detail::backward_kernel(g.data(), pv[0]->data(), pg[1]->data(), d);
      },
      "conv2d");
}

Var conv1d(Var input, Var kernels, Padding p) {
  const Tensor& iv = input.value();
  const Tensor& kv = kernels.value();
  if (iv.rank() != 2) throw DataError("conv1d: input must be [C,L], got " + shape_str(iv.shape()));
  if (kv.rank() != 3) throw DataError("conv1d: kernels must be [Co,Ci,k], got " + shape_str(kv.shape()));
  Var x3 = reshape(input, {iv.dim(0), 1, iv.dim(1)});
  Var k4 = reshape(kernels, {kv.dim(0), kv.dim(1), 1, kv.dim(2)});
  Var y = conv2d(x3, k4, p);
  return reshape(y, {y.shape()[0], y.shape()[2]});
}

Var bias_add(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.rank() != 1 || bv.dim(0) != xv.dim(0)) {
    throw DataError("bias_add: bias " + shape_str(bv.shape()) + " vs input " + shape_str(xv.shape()));
  }
  const int c = xv.dim(0);
  const int64_t inner = xv.size() / c;
  Tensor out(xv.shape());
  for (int ch = 0; ch < c; ++ch) {
    const float b = bv[ch];
    const float* src = xv.data() + ch * inner;
    float* dst = out.data() + ch * inner;
    for (int64_t i = 0; i < inner; ++i) dst[i] = src[i] + b;
  }
  return tape_of(x)->make(
      std::move(out), {x, bias},
      [c, inner](const Tensor& g, const Tensor&, const std::vector<Tensor*>& pg,
                 const std::vector<const Tensor*>&) {
        if (pg[0]) {
          float* d = pg[0]->data();
          for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
        if (pg[1]) {
          for (int ch = 0; ch < c; ++ch) {
            const float* src = g.data() + ch * inner;
            double acc = 0.0;
            for (int64_t i = 0; i < inner; ++i) acc += src[i];
            (*pg[1])[ch] += static_cast<float>(acc);
          }
        }
      },
      "bias_add");
}

}  // namespace ad

Tensor conv2d_value(const Tensor& input, const Tensor& kernels, ad::Padding p) {
  ad::conv_detail::ConvDims d = ad::conv_detail::conv2d_dims(input, kernels, p);
  Tensor out({d.co, d.ho, d.wo});
  ad::conv_detail::forward(input.data(), kernels.data(), out.data(), d);
  out.check_finite("conv2d output");
  return out;
}

double grad_check(const std::vector<Parameter*>& params,
                  const std::function<double(bool)>& eval, double eps) {
  zero_grads(params);
  double base = eval(true);
  if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss at base point");

  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->gradient);

  double max_err = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& value = params[pi]->value;
    for (int64_t i = 0; i < value.size(); ++i) {
      const float orig = value[i];
      value[i] = orig + static_cast<float>(eps);
      double fp = eval(false);
      value[i] = orig - static_cast<float>(eps);
      double fm = eval(false);
      value[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericError("grad_check: non-finite loss at perturbed point");
      }
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_err = std::max(max_err, std::abs(a - numeric) / denom);
    }
  }
  return max_err;
}

}  // namespace cwflow
