#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "vfm/ad/grad_check.hpp"
#include "vfm/ad/param_store.hpp"
#include "vfm/ad/tape.hpp"
#include "vfm/error.hpp"
#include "vfm/random.hpp"

using namespace vfm;
using namespace vfm::ad;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Tensor t(r, c);
  for (double& v : t.data) v = scale * standard_normal(rng);
  return t;
}

// Contracts a matrix-valued node with fixed random weights so every output
// entry receives a distinct adjoint.
Var contract(Tape& tape, Var v, std::uint64_t seed) {
  const Tensor& val = tape.value(v);
  Rng rng = make_stream(seed, 99);
  return tape.sum(tape.mul(v, tape.constant(random_tensor(val.rows, val.cols, rng))));
}

}  // namespace

TEST(Tape, SumOfSquaresGradient) {
  Tape tape;
  Var x = tape.leaf(Tensor(1, 3, {1.0, -2.0, 0.5}));
  Var y = tape.sum(tape.square(x));
  EXPECT_DOUBLE_EQ(tape.value(y).data[0], 5.25);
  tape.backward(y);
  EXPECT_EQ(tape.grad(x).data, (std::vector<double>{2.0, -4.0, 1.0}));
}

TEST(Tape, MatmulGradient) {
  Tape tape;
  Var a = tape.leaf(Tensor(1, 2, {1.0, 2.0}));
  Var b = tape.leaf(Tensor(2, 1, {3.0, 4.0}));
  Var c = tape.matmul(a, b);
  EXPECT_DOUBLE_EQ(tape.value(c).data[0], 11.0);
  tape.backward(c);
  EXPECT_EQ(tape.grad(a).data, (std::vector<double>{3.0, 4.0}));
  EXPECT_EQ(tape.grad(b).data, (std::vector<double>{1.0, 2.0}));
}

TEST(Tape, SoftmaxRowsAreDistributions) {
  Tape tape;
  Var s = tape.softmax(tape.leaf(Tensor(2, 3, {1.0, 2.0, 3.0, -50.0, 0.0, 50.0})));
  const Tensor& v = tape.value(s);
  for (std::size_t r = 0; r < 2; ++r) {
    double z = 0.0;
    for (double p : v.row(r)) z += p;
    EXPECT_NEAR(z, 1.0, 1e-15);
  }
  EXPECT_NEAR(v(0, 2), std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)), 1e-15);
}

TEST(Tape, ConstantsGetNoGradient) {
  Tape tape;
  Var x = tape.leaf(Tensor(1, 2, {1.0, 2.0}));
  Var c = tape.constant(Tensor(1, 2, {3.0, 4.0}));
  Var y = tape.sum(tape.mul(x, c));
  tape.backward(y);
  EXPECT_EQ(tape.grad(x).data, (std::vector<double>{3.0, 4.0}));
  EXPECT_EQ(tape.grad(c).data, (std::vector<double>{0.0, 0.0}));
}

TEST(Tape, VectorJacobianProduct) {
  Tape tape;
  Var x = tape.leaf(Tensor(2, 1, {1.0, 3.0}));
  Var y = tape.square(x);
  tape.backward(y, Tensor(2, 1, {10.0, 1.0}));
  EXPECT_EQ(tape.grad(x).data, (std::vector<double>{20.0, 6.0}));
}

TEST(Tape, Errors) {
  Tape empty;
  EXPECT_THROW(empty.backward(Var{0}), UsageError);

  Tape tape;
  Var x = tape.leaf(Tensor(1, 2, {1.0, 2.0}));
  EXPECT_THROW(tape.grad(x), UsageError);
  EXPECT_THROW(tape.backward(x), UsageError);
  EXPECT_THROW(tape.add(x, tape.leaf(Tensor(2, 1))), StructuralError);
  EXPECT_THROW(tape.matmul(x, x), StructuralError);
  EXPECT_THROW(tape.log(tape.leaf(Tensor(1, 1, {-1.0}))), NumericError);
  EXPECT_THROW(tape.value(Var{1000}), UsageError);
  EXPECT_THROW(tape.reshape(x, 3, 1), StructuralError);
}

TEST(Tape, GatherScatterAreAdjoint) {
  // <gather(a), b> == <a, scatter(b)> for any index list.
  Rng rng = make_stream(5, 0);
  const Tensor a = random_tensor(4, 3, rng);
  const Tensor b = random_tensor(6, 3, rng);
  const Index idx = make_index({0, 3, 3, 1, 2, 0});
  Tape tape;
  const Tensor ga = tape.value(tape.gather_rows(tape.constant(a), idx));
  const Tensor sb = tape.value(tape.scatter_add_rows(tape.constant(b), idx, 4));
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t k = 0; k < ga.size(); ++k) lhs += ga.data[k] * b.data[k];
  for (std::size_t k = 0; k < sb.size(); ++k) rhs += a.data[k] * sb.data[k];
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(Tape, CenterGroupsRemovesGroupMeans) {
  Tape tape;
  const Tensor& c = tape.value(tape.center_groups(tape.constant(Tensor(4, 1, {1.0, 3.0, 10.0, 20.0})), 2));
  EXPECT_EQ(c.data, (std::vector<double>{-1.0, 1.0, -5.0, 5.0}));
}

// Every op's backward rule against central differences.
struct OpCase {
  const char* name;
  std::size_t rows, cols;
  std::function<Var(Tape&, Var)> build;
};

class TapeOpGrad : public ::testing::TestWithParam<OpCase> {};

TEST_P(TapeOpGrad, MatchesFiniteDifferences) {
  const OpCase& c = GetParam();
  Rng rng = make_stream(17, 0);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor point = random_tensor(c.rows, c.cols, rng, 0.8);
    const double err = grad_check([&](Tape& t, Var x) { return contract(t, c.build(t, x), 3); }, point, 1e-6);
    EXPECT_LE(err, 1e-6) << c.name;
  }
}

INSTANTIATE_TEST_SUITE_P(
    AllOps, TapeOpGrad,
    ::testing::Values(
        OpCase{"add", 3, 2, [](Tape& t, Var x) { return t.add(x, t.square(x)); }},
        OpCase{"sub", 3, 2, [](Tape& t, Var x) { return t.sub(t.square(x), x); }},
        OpCase{"mul", 3, 2, [](Tape& t, Var x) { return t.mul(x, t.tanh(x)); }},
        OpCase{"add_row", 3, 2, [](Tape& t, Var x) { return t.add_row(x, t.slice_cols(t.reshape(x, 1, 6), 0, 2)); }},
        OpCase{"add_col", 3, 2, [](Tape& t, Var x) { return t.add_col(x, t.slice_cols(x, 1, 1)); }},
        OpCase{"mul_col", 3, 2, [](Tape& t, Var x) { return t.mul_col(x, t.slice_cols(x, 0, 1)); }},
        OpCase{"scale", 3, 2, [](Tape& t, Var x) { return t.scale(x, -2.5); }},
        OpCase{"matmul", 3, 3, [](Tape& t, Var x) { return t.matmul(x, t.tanh(x)); }},
        OpCase{"silu", 3, 2, [](Tape& t, Var x) { return t.silu(x); }},
        OpCase{"tanh", 3, 2, [](Tape& t, Var x) { return t.tanh(x); }},
        OpCase{"log", 3, 2, [](Tape& t, Var x) { return t.log(t.exp(x)); }},
        OpCase{"log_of_square", 3, 2,
               [](Tape& t, Var x) { return t.log(t.add(t.square(x), t.constant(Tensor(3, 2, 0.5)))); }},
        OpCase{"exp", 3, 2, [](Tape& t, Var x) { return t.exp(x); }},
        OpCase{"square", 3, 2, [](Tape& t, Var x) { return t.square(x); }},
        OpCase{"softmax", 3, 4, [](Tape& t, Var x) { return t.softmax(x); }},
        OpCase{"log_softmax", 3, 4, [](Tape& t, Var x) { return t.log_softmax(x); }},
        OpCase{"sum", 3, 2, [](Tape& t, Var x) { return t.square(t.sum(x)); }},
        OpCase{"row_sum", 3, 2, [](Tape& t, Var x) { return t.row_sum(x); }},
        OpCase{"row_norm", 3, 2, [](Tape& t, Var x) { return t.row_norm(x); }},
        OpCase{"gather_rows", 3, 2, [](Tape& t, Var x) { return t.gather_rows(x, make_index({2, 0, 2, 1})); }},
        OpCase{"scatter_add_rows", 4, 2,
               [](Tape& t, Var x) { return t.scatter_add_rows(x, make_index({1, 0, 1, 2}), 3); }},
        OpCase{"center_groups", 6, 2, [](Tape& t, Var x) { return t.center_groups(x, 3); }},
        OpCase{"pairwise_sq_dist", 4, 2,
               [](Tape& t, Var x) { return t.pairwise_sq_dist(x, make_index({0, 1, 3}), make_index({1, 2, 0})); }},
        OpCase{"slice_cols", 3, 4, [](Tape& t, Var x) { return t.slice_cols(x, 1, 2); }},
        OpCase{"concat_cols", 3, 2, [](Tape& t, Var x) { return t.concat_cols({x, t.square(x), x}); }},
        OpCase{"reshape", 3, 4, [](Tape& t, Var x) { return t.reshape(t.softmax(x), 6, 2); }}),
    [](const ::testing::TestParamInfo<OpCase>& info) { return std::string(info.param.name); });

TEST(GradCheck, CallableOverload) {
  auto f = [](const std::vector<double>& x) { return std::sin(x[0]) * x[1]; };
  auto g = [](const std::vector<double>& x) { return std::vector<double>{std::cos(x[0]) * x[1], std::sin(x[0])}; };
  EXPECT_LE(grad_check(f, g, {0.3, 2.0}, 1e-6), 1e-8);
  auto wrong = [](const std::vector<double>& x) { return std::vector<double>{x[1], std::sin(x[0])}; };
  EXPECT_GT(grad_check(f, wrong, {0.3, 2.0}, 1e-6), 1e-3);
}

TEST(ParamStore, AccumulatesAcrossTapes) {
  ParamStore store;
  store.add("w", Tensor(1, 2, {1.0, 2.0}));
  store.zero_grad();
  for (int i = 0; i < 2; ++i) {
    Tape tape;
    Var w = tape.param(store, 0);
    Var y = tape.sum(tape.square(w));
    tape.backward(y);
    tape.accumulate_param_grads(store);
  }
  EXPECT_EQ(store[0].grad.data, (std::vector<double>{4.0, 8.0}));
  EXPECT_DOUBLE_EQ(store.grad_norm(), std::sqrt(80.0));
  store.scale_grads(0.5);
  EXPECT_EQ(store[0].grad.data, (std::vector<double>{2.0, 4.0}));
}

TEST(ParamStore, FlatRoundTrip) {
  ParamStore store;
  store.add("a", Tensor(2, 2, {1, 2, 3, 4}));
  store.add("b", Tensor(1, 1, {5}));
  EXPECT_EQ(store.n_scalars(), 5u);
  auto flat = store.flat_values();
  EXPECT_EQ(flat, (std::vector<double>{1, 2, 3, 4, 5}));
  flat[4] = -1.0;
  store.set_flat_values(flat);
  EXPECT_EQ(store[1].value.data[0], -1.0);
  EXPECT_EQ(store.find("b"), 1u);
  EXPECT_FALSE(store.find("c").has_value());
}

TEST(Adam, FirstStepIsSignedLearningRate) {
  // With bias correction m_hat = g and v_hat = g^2 on step one.
  ParamStore store;
  store.add("w", Tensor(1, 3, {0.0, 1.0, 2.0}));
  store[0].grad = Tensor(1, 3, {0.5, -3.0, 1e-3});
  AdamConfig cfg;
  cfg.lr = 0.1;
  ASSERT_TRUE(adam_step(store, cfg));
  const std::vector<double> g{0.5, -3.0, 1e-3};
  const std::vector<double> w0{0.0, 1.0, 2.0};
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(store[0].value.data[k], w0[k] - cfg.lr * g[k] / (std::abs(g[k]) + cfg.eps), 1e-15);
  }
  EXPECT_EQ(store.step(), 1u);
}

TEST(Adam, RejectsNonFiniteGradient) {
  ParamStore store;
  store.add("w", Tensor(1, 2, {1.0, 2.0}));
  store[0].grad = Tensor(1, 2, {std::nan(""), 0.0});
  EXPECT_FALSE(adam_step(store, AdamConfig{}));
  EXPECT_EQ(store[0].value.data, (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(store.step(), 0u);
}
