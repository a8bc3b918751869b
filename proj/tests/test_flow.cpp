#include <doctest.h>

#include "test_util.hpp"

#include <cmath>
#include <vector>

#include "cwflow/flow.hpp"
#include "cwflow/haar.hpp"
#include "cwflow/lion.hpp"
#include "cwflow/rng.hpp"

using namespace cwflow;
using namespace cwflow::flow;

namespace {

// log|det| of a dense matrix by Gaussian elimination with partial pivoting.
// Test-side oracle, independent of the flow implementation.
double log_abs_det(std::vector<std::vector<double>> m) {
  const size_t n = m.size();
  double log_det = 0.0;
  for (size_t col = 0; col < n; ++col) {
    size_t pivot = col;
    for (size_t r = col + 1; r < n; ++r) {
      if (std::abs(m[r][col]) > std::abs(m[pivot][col])) pivot = r;
    }
    if (std::abs(m[pivot][col]) < 1e-30) return -1e30;  // singular
    std::swap(m[col], m[pivot]);
    log_det += std::log(std::abs(m[col][col]));
    for (size_t r = col + 1; r < n; ++r) {
      const double f = m[r][col] / m[col][col];
      for (size_t c = col; c < n; ++c) m[r][c] -= f * m[col][c];
    }
  }
  return log_det;
}

// Assembles the Jacobian of stack.forward(., cond) at x by central differences.
double fd_log_abs_det(FlowStack& stack, const Tensor& x, const Tensor& cond, double eps = 1e-3) {
  const size_t n = static_cast<size_t>(x.size());
  std::vector<std::vector<double>> jac(n, std::vector<double>(n, 0.0));
  for (size_t j = 0; j < n; ++j) {
    Tensor xp = x, xm = x;
    xp[static_cast<int64_t>(j)] += static_cast<float>(eps);
    xm[static_cast<int64_t>(j)] -= static_cast<float>(eps);
    ad::Tape tp(false), tm(false);
    Tensor yp = stack.forward(tp, tp.constant(xp), tp.constant(cond)).z.value();
    Tensor ym = stack.forward(tm, tm.constant(xm), tm.constant(cond)).z.value();
    for (size_t i = 0; i < n; ++i) {
      jac[i][j] = (yp[static_cast<int64_t>(i)] - ym[static_cast<int64_t>(i)]) / (2.0 * eps);
    }
  }
  return log_abs_det(std::move(jac));
}

FlowStack make_stack(BlockType type, Shape data_shape, int cond_ch, int blocks, uint64_t seed) {
  FlowStackConfig cfg;
  cfg.data_shape = std::move(data_shape);
  cfg.cond_channels = cond_ch;
  cfg.blocks = blocks;
  cfg.hidden_channels = 6;
  cfg.block_type = type;
  Rng rng(seed);
  return FlowStack("stack", cfg, rng);
}

// Gives the stack nontrivial scales/translations (fresh stacks start as the
// identity because final condition-net convs are zero-initialized).
void randomize_final_convs(FlowStack& stack, uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (Parameter* p : stack.params()) {
    if (p->name.find("/c2/") == std::string::npos) continue;
    for (int64_t i = 0; i < p->value.size(); ++i) {
      p->value[i] = static_cast<float>(scale * rng.normal());
    }
  }
}

}  // namespace

TEST_CASE("fresh affine layer is the identity with zero log det") {
  Rng rng(1);
  CondAffineLayer layer;
  layer.name = "t";
  layer.channels = 2;
  layer.net = CondNet("t", 3, 6, 4, rng);
  Tensor x = rng.normal_tensor({2, 4, 4});
  Tensor cond = rng.normal_tensor({3, 4, 4});
  ad::Tape t(false);
  FlowOutput out = layer.forward(t, t.constant(x), t.constant(cond));
  for (int64_t i = 0; i < x.size(); ++i) CHECK(out.z.value()[i] == x[i]);
  CHECK(out.log_det64 == 0.0);
}

TEST_CASE("forced scale ln2 doubles the input and log_det = N*ln2") {
  Rng rng(2);
  CondAffineLayer layer;
  layer.name = "t";
  layer.channels = 2;
  layer.clamp = 1.9;
  layer.net = CondNet("t", 3, 6, 4, rng);
  // Zero weights, bias on the scale half only: s = clamp*(2/pi)*atan(s_raw) = ln2.
  const double s_raw = std::tan(std::log(2.0) / layer.clamp * M_PI / 2.0);
  for (int64_t i = 0; i < layer.net.c2.weight.value.size(); ++i) layer.net.c2.weight.value[i] = 0.0f;
  layer.net.c2.bias.value[0] = static_cast<float>(s_raw);
  layer.net.c2.bias.value[1] = static_cast<float>(s_raw);

  Tensor x = rng.normal_tensor({2, 3, 3});
  Tensor cond = rng.normal_tensor({3, 3, 3});
  ad::Tape t(false);
  FlowOutput out = layer.forward(t, t.constant(x), t.constant(cond));
  for (int64_t i = 0; i < x.size(); ++i) {
    CHECK(out.z.value()[i] == doctest::Approx(2.0f * x[i]).epsilon(1e-4));
  }
  CHECK(out.log_det64 == doctest::Approx(x.size() * std::log(2.0)).epsilon(1e-4));
}

TEST_CASE("affine round trip and y==t edge cases") {
  Rng rng(3);
  CondAffineLayer layer;
  layer.name = "t";
  layer.channels = 2;
  layer.net = CondNet("t", 3, 6, 4, rng);
  for (int64_t i = 0; i < layer.net.c2.weight.value.size(); ++i) {
    layer.net.c2.weight.value[i] = static_cast<float>(0.3 * rng.normal());
  }
  Tensor x = rng.normal_tensor({2, 4, 4});
  Tensor cond = rng.normal_tensor({3, 4, 4});

  ad::Tape t(false);
  ad::Var cv = t.constant(cond);
  FlowOutput out = layer.forward(t, t.constant(x), cv);
  ad::Var back = layer.inverse(t, out.z, cv);
  for (int64_t i = 0; i < x.size(); ++i) {
    CHECK_ABS(back.value()[i], x[i], 1e-4);
  }

  // y equal to the translation inverts to exactly zero input.
  ad::Var zero_in = layer.inverse(
      t, layer.forward(t, t.constant(Tensor({2, 4, 4})), cv).z, cv);
  for (int64_t i = 0; i < zero_in.size(); ++i) CHECK_ABS(zero_in.value()[i], 0.0f, 1e-5);
}

TEST_CASE("coupling: zero subnet is identity, round trip, odd channels rejected") {
  Rng rng(4);
  CondCouplingLayer layer;
  layer.name = "c";
  layer.channels = 4;
  layer.net = CondNet("c", 2 + 3, 6, 4, rng);
  Tensor x = rng.normal_tensor({4, 3, 3});
  Tensor cond = rng.normal_tensor({3, 3, 3});

  ad::Tape t(false);
  ad::Var cv = t.constant(cond);
  FlowOutput out = layer.forward(t, t.constant(x), cv);
  for (int64_t i = 0; i < x.size(); ++i) CHECK(out.z.value()[i] == x[i]);
  CHECK(out.log_det64 == 0.0);

  for (int64_t i = 0; i < layer.net.c2.weight.value.size(); ++i) {
    layer.net.c2.weight.value[i] = static_cast<float>(0.3 * rng.normal());
  }
  FlowOutput out2 = layer.forward(t, t.constant(x), cv);
  ad::Var back = layer.inverse(t, out2.z, cv);
  for (int64_t i = 0; i < x.size(); ++i) CHECK_ABS(back.value()[i], x[i], 1e-4);

  CHECK_THROWS_AS(make_stack(BlockType::Coupling, {3, 2, 2}, 1, 2, 5), DataError);
}

TEST_CASE("permutation: identity, inverse pairing, norm preservation") {
  PermuteLayer identity("id", 0, {0, 1, 2});
  Rng rng(6);
  Tensor x = rng.normal_tensor({3, 2, 2});
  ad::Tape t(false);
  ad::Var xv = t.constant(x);
  ad::Var y = identity.forward(t, xv);
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y.value()[i] == x[i]);

  PermuteLayer shuffle("sh", 1, {1, 0});
  Tensor x2 = rng.normal_tensor({2, 2, 5});
  ad::Var fwd = shuffle.forward(t, t.constant(x2));
  ad::Var back = shuffle.inverse(t, fwd);
  for (int64_t i = 0; i < x2.size(); ++i) CHECK(back.value()[i] == x2[i]);
  CHECK(fwd.value().sum_squares64() == doctest::Approx(x2.sum_squares64()));

  CHECK_THROWS_AS(PermuteLayer("bad", 0, {0, 0, 2}), DataError);
}

TEST_CASE("empty stack is identity with zero log det") {
  FlowStack stack;
  Rng rng(7);
  Tensor x = rng.normal_tensor({2, 2, 2});
  ad::Tape t(false);
  FlowOutput out = stack.forward(t, t.constant(x), t.constant(Tensor({1, 2, 2})));
  for (int64_t i = 0; i < x.size(); ++i) CHECK(out.z.value()[i] == x[i]);
  CHECK(out.log_det64 == 0.0);
}

TEST_CASE("6-block stack round trips to 1e-4 for both block types") {
  for (BlockType type : {BlockType::Affine, BlockType::Coupling}) {
    CAPTURE(static_cast<int>(type));
    FlowStack stack = make_stack(type, {4, 4, 4}, 3, 6, 8);
    randomize_final_convs(stack, 9);
    Rng rng(10);
    Tensor x = rng.normal_tensor({4, 4, 4});
    Tensor cond = rng.normal_tensor({3, 4, 4});
    ad::Tape t(false);
    ad::Var cv = t.constant(cond);
    FlowOutput out = stack.forward(t, t.constant(x), cv);
    ad::Var back = stack.inverse(t, out.z, cv);
    for (int64_t i = 0; i < x.size(); ++i) CHECK_ABS(back.value()[i], x[i], 1e-4);

    // forward(inverse(z)) as well
    Tensor z = rng.normal_tensor({4, 4, 4});
    ad::Var xr = stack.inverse(t, t.constant(z), cv);
    FlowOutput zz = stack.forward(t, xr, cv);
    for (int64_t i = 0; i < z.size(); ++i) CHECK_ABS(zz.z.value()[i], z[i], 1e-4);
  }
}

TEST_CASE("two ln2-scale affine layers accumulate log_det = 2N ln2") {
  Rng rng(11);
  FlowStack stack = make_stack(BlockType::Affine, {2, 2, 2}, 2, 2, 12);
  const double s_raw = std::tan(std::log(2.0) / 1.9 * M_PI / 2.0);
  for (Parameter* p : stack.params()) {
    if (p->name.find("/c2/bias") == std::string::npos) continue;
    p->value[0] = static_cast<float>(s_raw);
    p->value[1] = static_cast<float>(s_raw);
  }
  Tensor x = rng.normal_tensor({2, 2, 2});
  Tensor cond = rng.normal_tensor({2, 2, 2});
  ad::Tape t(false);
  FlowOutput out = stack.forward(t, t.constant(x), t.constant(cond));
  CHECK(out.log_det64 == doctest::Approx(2.0 * x.size() * std::log(2.0)).epsilon(1e-4));
}

TEST_CASE("stack log_det matches finite-difference Jacobian oracle") {
  for (BlockType type : {BlockType::Affine, BlockType::Coupling}) {
    CAPTURE(static_cast<int>(type));
    FlowStack stack = make_stack(type, {2, 2, 2}, 2, 3, 13 + static_cast<int>(type));
    randomize_final_convs(stack, 14, 0.4);
    Rng rng(15);
    Tensor x = rng.normal_tensor({2, 2, 2});
    Tensor cond = rng.normal_tensor({2, 2, 2});
    ad::Tape t(false);
    FlowOutput out = stack.forward(t, t.constant(x), t.constant(cond));
    const double oracle = fd_log_abs_det(stack, x, cond);
    CHECK(std::abs(out.log_det64 - oracle) < 1e-3);
  }
}

TEST_CASE("single affine layer log_det matches Jacobian oracle on 8 elements") {
  FlowStack stack = make_stack(BlockType::Affine, {2, 2, 2}, 1, 1, 16);
  randomize_final_convs(stack, 17, 0.5);
  Rng rng(18);
  Tensor x = rng.normal_tensor({2, 2, 2});
  Tensor cond = rng.normal_tensor({1, 2, 2});
  ad::Tape t(false);
  FlowOutput out = stack.forward(t, t.constant(x), t.constant(cond));
  CHECK(std::abs(out.log_det64 - fd_log_abs_det(stack, x, cond)) < 1e-3);
}

TEST_CASE("nll closed-form values") {
  ad::Tape t(false);
  SUBCASE("z = 0 gives ln(2pi)/2 per dimension") {
    FlowOutput out;
    out.z = t.constant(Tensor({4, 2, 2}));
    out.log_det = t.constant(Tensor::scalar(0.0f));
    ad::Var v = nll(t, out);
    CHECK(v.value()[0] == doctest::Approx(0.5 * std::log(2.0 * M_PI)).epsilon(1e-5));
    CHECK(nll_value(Tensor({4, 2, 2}), 0.0) == doctest::Approx(0.9189385).epsilon(1e-5));
  }
  SUBCASE("z = 1 adds one half") {
    FlowOutput out;
    out.z = t.constant(Tensor::full({8}, 1.0f));
    out.log_det = t.constant(Tensor::scalar(0.0f));
    CHECK(nll(t, out).value()[0] ==
          doctest::Approx(0.5 + 0.5 * std::log(2.0 * M_PI)).epsilon(1e-5));
  }
  SUBCASE("random z matches independently coded formula") {
    Rng rng(20);
    Tensor z = rng.normal_tensor({10});
    const double log_det = 1.7;
    const double rho = 0.01;
    Parameter p("p", rng.normal_tensor({5}));
    // reimplementation oracle
    double expect = 0.0;
    for (int64_t i = 0; i < z.size(); ++i) expect += 0.5 * static_cast<double>(z[i]) * z[i];
    expect += 0.5 * 10.0 * std::log(2.0 * M_PI) - log_det;
    double reg = 0.0;
    for (int64_t i = 0; i < 5; ++i) reg += static_cast<double>(p.value[i]) * p.value[i];
    expect = (expect + rho * reg) / 10.0;
    CHECK(nll_value(z, log_det, {&p}, rho) == doctest::Approx(expect).epsilon(1e-6));

    FlowOutput out;
    out.z = t.constant(z);
    out.log_det = t.constant(Tensor::scalar(static_cast<float>(log_det)));
    ad::Tape tr(true);
    FlowOutput outr;
    outr.z = tr.constant(z);
    outr.log_det = tr.constant(Tensor::scalar(static_cast<float>(log_det)));
    CHECK(nll(tr, outr, {&p}, rho).value()[0] == doctest::Approx(expect).epsilon(1e-4));
  }
}

TEST_CASE("NLL decreases under gradient descent on a fixed sample") {
  FlowStack stack = make_stack(BlockType::Affine, {2, 4, 4}, 2, 4, 21);
  Rng rng(22);
  Tensor x = rng.normal_tensor({2, 4, 4}, 0.0, 0.4);
  Tensor cond = rng.normal_tensor({2, 4, 4});
  std::vector<Parameter*> params = stack.params();

  auto eval_nll = [&](bool with_grad) {
    ad::Tape t(with_grad);
    FlowOutput out = stack.forward(t, t.constant(x), t.constant(cond));
    ad::Var loss = nll(t, out);
    double v = loss.value64();
    if (with_grad) {
      zero_grads(params);
      t.backward(loss);
    }
    return v;
  };

  const double initial = eval_nll(false);
  const double lr = 1e-3;
  double final_v = initial;
  for (int step = 0; step < 60; ++step) {
    final_v = eval_nll(true);
    for (Parameter* p : params) {
      for (int64_t i = 0; i < p->value.size(); ++i) {
        p->value[i] -= static_cast<float>(lr) * p->gradient[i];
      }
    }
  }
  final_v = eval_nll(false);
  CHECK(final_v < initial);
}

TEST_CASE("flow training gradient matches finite differences (2-layer affine NLL)") {
  FlowStack stack = make_stack(BlockType::Affine, {2, 2, 2}, 1, 2, 23);
  randomize_final_convs(stack, 24, 0.2);
  Rng rng(25);
  Tensor x = rng.normal_tensor({2, 2, 2});
  Tensor cond = rng.normal_tensor({1, 2, 2});
  std::vector<Parameter*> params = stack.params();

  // FD values via the double-precision reference walk of the same layers.
  auto eval = [&](bool with_grad) {
    if (with_grad) {
      ad::Tape t(true);
      FlowOutput out = stack.forward(t, t.constant(x), t.constant(cond));
      t.backward(nll(t, out));
    }
    double log_det = 0.0;
    refops::DTensor z = refops::stack_forward(stack, refops::DTensor::from(x),
                                              refops::DTensor::from(cond), log_det);
    return refops::nll(z, log_det);
  };
  CHECK(grad_check(params, eval, 1e-3) < 1e-3);

  // The recorded forward agrees with the reference on values too.
  ad::Tape t(false);
  FlowOutput out = stack.forward(t, t.constant(x), t.constant(cond));
  double ref_log_det = 0.0;
  refops::DTensor zref = refops::stack_forward(stack, refops::DTensor::from(x),
                                               refops::DTensor::from(cond), ref_log_det);
  for (int64_t i = 0; i < out.z.size(); ++i) {
    CHECK_ABS(out.z.value()[i], zref.data[static_cast<size_t>(i)], 1e-4);
  }
  CHECK_ABS(out.log_det64, ref_log_det, 1e-4);
}

TEST_CASE("permutation buffers round trip through save format") {
  FlowStack stack = make_stack(BlockType::Affine, {4, 3, 5}, 1, 3, 26);
  auto buffers = stack.buffers();
  REQUIRE(buffers.size() == 3);

  FlowStack other = make_stack(BlockType::Affine, {4, 3, 5}, 1, 3, 999);  // different perms
  for (const auto& [name, data] : buffers) other.load_buffer(name, data);
  auto reloaded = other.buffers();
  for (size_t i = 0; i < buffers.size(); ++i) {
    CHECK(buffers[i].first == reloaded[i].first);
    for (int64_t j = 0; j < buffers[i].second.size(); ++j) {
      CHECK(buffers[i].second[j] == reloaded[i].second[j]);
    }
  }
}
