#pragma once

#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cwflow/tensor.hpp"

namespace cwflow {

// Trainable tensor plus its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor gradient;

  Parameter() = default;
  Parameter(std::string name_, Tensor value_)
      : name(std::move(name_)), value(std::move(value_)), gradient(value.shape()) {}

  void zero_grad() {
    std::fill(gradient.vec().begin(), gradient.vec().end(), 0.0f);
  }
};

void zero_grads(const std::vector<Parameter*>& params);

namespace ad {

class Tape;

// Handle to a node on a tape. Cheap to copy; owns nothing.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  // Scalar value in 64-bit when the producing op tracked one (reductions and
  // scalar arithmetic do); falls back to the f32 payload otherwise.
  double value64() const;
  const Shape& shape() const { return value().shape(); }
  int64_t size() const { return value().size(); }
  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode differentiation recording. Single-threaded; one backward()
// per recording unless reset() is called. Constructing with record=false
// turns param() into constant() so the same model code serves inference.
class Tape {
 public:
  // Receives the upstream gradient g, the node's own output value, writable
  // gradient slots per parent (nullptr where no gradient is needed) and the
  // parent values.
  using BackwardFn = std::function<void(const Tensor& g, const Tensor& out,
                                        const std::vector<Tensor*>& parent_grads,
                                        const std::vector<const Tensor*>& parent_vals)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var param(Parameter& p);
  Var make(Tensor value, const std::vector<Var>& parents, BackwardFn fn, const char* op_name);
  void set_scalar64(const Var& v, double value);

  // Accumulates d(loss)/d(param) into Parameter.gradient for every parameter
  // leaf on this recording. loss must be scalar.
  void backward(const Var& loss);
  void reset();

  bool recording() const { return record_; }
  bool requires_grad(const Var& v) const;
  size_t node_count() const { return nodes_.size(); }

 private:
  friend class Var;
  struct Node {
    Tensor value;
    std::vector<int> parents;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
    bool has_scalar64 = false;
    double scalar64 = 0.0;
    const char* op = "";
  };
  // deque: node references handed out via Var::value() stay valid as the
  // recording grows.
  std::deque<Node> nodes_;
  bool record_ = true;
  bool backward_done_ = false;
};

// Elementwise arithmetic (equal shapes).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var square(Var a);
Var neg(Var a);
Var add_scalar(Var a, double c);
Var mul_scalar(Var a, double c);

// Elementwise nonlinearities.
Var exp_op(Var a);
Var log_op(Var a);
Var tanh_op(Var a);
Var atan_op(Var a);
Var sigmoid(Var a);
Var relu(Var a);

// Reductions to a scalar node; accumulation runs in 64-bit.
Var sum(Var a);
Var mean(Var a);
Var sum_squares(Var a);

// Structure ops.
Var reshape(Var a, Shape shape);
Var permute_axis(Var a, int axis, const std::vector<int>& perm);
Var concat0(Var a, Var b);
std::pair<Var, Var> split0(Var a, int first_count);

// Linear algebra / convolution.
enum class Padding { Same, Valid };
Var matmul(Var a, Var b);                      // [m,k] x [k,n]
Var conv2d(Var input, Var kernels, Padding p); // [Ci,H,W], [Co,Ci,kh,kw]
Var conv1d(Var input, Var kernels, Padding p); // [Ci,L],  [Co,Ci,k]
Var bias_add(Var x, Var bias);                 // bias shape [C], x rank 2 or 3

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace ad

// Non-recording convolution, shared with the forward-model code.
Tensor conv2d_value(const Tensor& input, const Tensor& kernels, ad::Padding p);

// Central-difference gradient verification. eval(true) must rebuild the loss
// on a fresh recording, run backward, and return the loss value with param
// gradients freshly accumulated (zeroed beforehand by grad_check); eval(false)
// only evaluates the loss. Returns max |analytic-numeric| /
// max(|analytic|,|numeric|,1e-8) over all parameter elements.
double grad_check(const std::vector<Parameter*>& params,
                  const std::function<double(bool with_grad)>& eval, double eps = 1e-3);

}  // namespace cwflow
