#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <map>

#include "dcap/gradcheck.hpp"
#include "dcap/ops.hpp"
#include "dcap/optim.hpp"
#include "dcap/selftest.hpp"
#include "support.hpp"

using namespace dcap;
using namespace dcap::nk;
using dcap::tsup::random_tensor;

namespace {

Var probe(Graph<double>& g, Var x, std::uint64_t seed) { return random_probe(g, x, seed); }

}  // namespace

TEST(Tensor, ShapeAndStorageAgree) {
  Tensor<float> t(Shape{2, 3, 4}, 1.5f);
  EXPECT_EQ(t.size(), numel(t.shape()));
  EXPECT_EQ(t.dim(2), 4u);
  EXPECT_THROW(t.dim(3), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  EXPECT_THROW(t.reshaped(Shape{5, 5}), ShapeError);
  EXPECT_EQ(t.reshaped(Shape{6, 4}).dim(0), 6u);
  EXPECT_THROW(t.item(), ShapeError);
}

TEST(Primitives, ReluExample) {
  Graph<double> g;
  Var y = relu(g, g.constant(Tensor<double>(Shape{3}, {-1, 0, 2})));
  EXPECT_EQ(g.value(y).storage(), (std::vector<double>{0, 0, 2}));
}

TEST(Primitives, GlobalAvgPoolOfConstantMap) {
  Graph<double> g;
  Var y = global_avg_pool(g, g.constant(Tensor<double>(Shape{1, 4, 3, 5}, 2.25)));
  ASSERT_EQ(g.value(y).shape(), (Shape{1, 4}));
  for (double v : g.value(y).values()) EXPECT_DOUBLE_EQ(v, 2.25);
}

TEST(Primitives, IdentityCenterKernelConvIsIdentity) {
  CounterRng rng(3);
  const std::size_t c = 3;
  Tensor<double> w(Shape{c, c, 3, 3});
  for (std::size_t o = 0; o < c; ++o) w[((o * c + o) * 3 + 1) * 3 + 1] = 1.0;
  Graph<double> g;
  const Tensor<double> x = random_tensor(Shape{2, c, 5, 6}, rng);
  Var y = conv2d(g, g.constant(x), g.constant(w), Var{}, Conv2dOptions{1, 1});
  EXPECT_EQ(g.value(y), x);
}

TEST(Primitives, ShapeErrorsNameThePrimitive) {
  Graph<double> g;
  Var a = g.constant(Tensor<double>(Shape{2, 3}));
  Var b = g.constant(Tensor<double>(Shape{3, 2}));
  try {
    add(g, a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.primitive(), "add");
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos) << e.what();
  }
  EXPECT_THROW(matmul(g, a, a), ShapeError);
  Var x = g.constant(Tensor<double>(Shape{1, 2, 4, 4}));
  EXPECT_THROW(conv2d(g, x, g.constant(Tensor<double>(Shape{1, 3, 3, 3})), Var{}), ShapeError);
}

TEST(Primitives, SoftmaxRowsAreDistributions) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CounterRng rng(seed);
    const std::size_t m = 1 + rng.below(6), n = 1 + rng.below(9);
    Graph<double> g;
    Var p = softmax(g, g.constant(random_tensor(Shape{m, n}, rng, -30, 30)), 1);
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) {
        EXPECT_GE(g.value(p)[i * n + j], 0.0);
        s += g.value(p)[i * n + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Primitives, ForwardIsBitDeterministic) {
  CounterRng rng(11);
  const Tensor<float> x = random_tensor<float>(Shape{2, 3, 8, 8}, rng);
  const Tensor<float> w = random_tensor<float>(Shape{4, 3, 3, 3}, rng);
  auto run = [&] {
    Graph<float> g;
    BatchNormState<float> st(4);
    Var y = conv2d(g, g.constant(x), g.constant(w), Var{}, Conv2dOptions{1, 1});
    y = batch_norm2d(g, y, g.constant(Tensor<float>(Shape{4}, 1.f)), g.constant(Tensor<float>(Shape{4})), st, true);
    return g.value(max_pool2d(g, relu(g, y)));
  };
  EXPECT_EQ(run(), run());
}

TEST(Primitives, EvalBatchNormWithUnitStatsIsAffine) {
  CounterRng rng(5);
  const Tensor<double> x = random_tensor(Shape{2, 3, 2, 2}, rng);
  BatchNormState<double> st(3);
  st.eps = 0;
  Graph<double> g;
  const Tensor<double> gamma(Shape{3}, {2.0, -1.0, 0.5}), beta(Shape{3}, {0.1, 0.2, 0.3});
  Var y = batch_norm2d(g, g.constant(x), g.constant(gamma), g.constant(beta), st, false);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t j = 0; j < 4; ++j) {
        const std::size_t i = (n * 3 + c) * 4 + j;
        EXPECT_NEAR(g.value(y)[i], gamma[c] * x[i] + beta[c], 1e-12);
      }
}

TEST(Primitives, BatchNormTrainUpdatesRunningStats) {
  BatchNormState<double> st(1);
  Graph<double> g;
  batch_norm2d(g, g.constant(Tensor<double>(Shape{2, 1, 1, 2}, {1, 2, 3, 4})), g.constant(Tensor<double>(Shape{1}, 1.0)),
               g.constant(Tensor<double>(Shape{1})), st, true);
  EXPECT_NEAR(st.running_mean[0], 0.1 * 2.5, 1e-12);
  // unbiased batch variance 5/3
  EXPECT_NEAR(st.running_var[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-12);
}

TEST(Primitives, MaxPoolFloorsTrailingRows) {
  Graph<double> g;
  Var y = max_pool2d(g, g.constant(Tensor<double>(Shape{1, 1, 5, 5}, 1.0)));
  EXPECT_EQ(g.value(y).shape(), (Shape{1, 1, 2, 2}));
}

TEST(Primitives, FiniteCheckFlagsNaN) {
  Graph<double> g;
  g.set_check_finite(true);
  Var x = g.constant(Tensor<double>(Shape{2}, {1.0, -1.0}));
  EXPECT_THROW(log(g, sub(g, x, x)), std::exception);
}

TEST(Backward, SquareSumGradient) {
  Parameter<double> w("w", Tensor<double>(Shape{2}, {1, 2}));
  Graph<double> g;
  Var wv = g.param(w);
  g.backward(sum(g, mul(g, wv, wv)));
  EXPECT_EQ(w.grad.storage(), (std::vector<double>{2, 4}));
}

TEST(Backward, SoftmaxNllGradient) {
  Parameter<double> z("z", Tensor<double>(Shape{1, 2}, {0, 0}));
  Graph<double> g;
  const std::size_t target[] = {0};
  Var nll = scale(g, sum(g, gather_cols(g, log_softmax(g, g.param(z), 1), target)), -1.0);
  g.backward(nll);
  EXPECT_NEAR(z.grad[0], -0.5, 1e-12);
  EXPECT_NEAR(z.grad[1], 0.5, 1e-12);
}

TEST(Backward, DetachedBranchContributesNothing) {
  Parameter<double> a("a", Tensor<double>(Shape{2}, {1, 3}));
  Parameter<double> b("b", Tensor<double>(Shape{2}, {2, 5}));
  b.requires_grad = false;
  Graph<double> g;
  Var av = g.param(a), bv = g.param(b);
  g.backward(sum(g, add(g, mul(g, av, bv), mul(g, bv, bv))));
  EXPECT_EQ(a.grad.storage(), (std::vector<double>{2, 5}));
  for (double v : b.grad.values()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, UnreachableParameterGetsZeroContribution) {
  Parameter<double> a("a", Tensor<double>(Shape{2}, {1, 3}));
  Parameter<double> u("u", Tensor<double>(Shape{3}, 1.0));
  Graph<double> g;
  Var av = g.param(a);
  g.param(u);
  g.backward(sum(g, av));
  ASSERT_EQ(u.grad.shape(), u.value.shape());
  for (double v : u.grad.values()) EXPECT_EQ(v, 0.0);
  // Gradients accumulate across graphs; an unreachable parameter keeps its sum.
  u.grad.fill(7.0);
  Graph<double> g2;
  Var av2 = g2.param(a);
  g2.param(u);
  g2.backward(sum(g2, av2));
  for (double v : u.grad.values()) EXPECT_EQ(v, 7.0);
}

TEST(Backward, NonScalarLossRejected) {
  Parameter<double> a("a", Tensor<double>(Shape{2}, {1, 3}));
  Graph<double> g;
  EXPECT_THROW(g.backward(g.param(a)), ShapeError);
}

TEST(Backward, GraphInputsPrecedeConsumers) {
  CounterRng rng(1);
  Graph<double> g;
  Var x = g.constant(random_tensor(Shape{2, 3}, rng));
  Var y = softmax(g, relu(g, x), 1);
  Var z = sum(g, mul(g, y, x));
  for (std::uint32_t id = 0; id < g.size(); ++id)
    for (Var in : g.inputs(Var{id})) EXPECT_LT(in.id, id);
  EXPECT_EQ(z.id + 1, g.size());
}

TEST(GradCheck, QuadraticIsExact) {
  Parameter<double> w("w", Tensor<double>(Shape{5}, {0.3, -1.2, 2.0, 0.7, -0.4}));
  Parameter<double>* ps[] = {&w};
  const GradCheckReport r = grad_check(
      [&](Graph<double>& g) {
        Var v = g.param(w);
        return add(g, sum(g, mul(g, v, v)), scale(g, sum(g, v), 3.0));
      },
      ps, GradCheckOptions{1e-3});
  EXPECT_LT(r.max_rel_error, 1e-8);
  EXPECT_EQ(r.checked, 5u);
}

TEST(GradCheck, ReluKinkCoordinateIsExcluded) {
  // Coordinate 1 sits exactly on the relu kink; +-eps crosses it.
  Parameter<double> w("w", Tensor<double>(Shape{3}, {0.5, 0.0, -0.7}));
  Parameter<double>* ps[] = {&w};
  const GradCheckReport r = grad_check([&](Graph<double>& g) { return sum(g, relu(g, g.param(w))); }, ps);
  EXPECT_EQ(r.skipped_kinks, 1u);
  EXPECT_EQ(r.checked, 2u);
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(GradCheck, MaxPoolTieIsExcluded) {
  Parameter<double> w("w", Tensor<double>(Shape{1, 1, 2, 2}, {1.0, 1.0, 0.2, -0.3}));
  Parameter<double>* ps[] = {&w};
  const GradCheckReport r = grad_check([&](Graph<double>& g) { return sum(g, max_pool2d(g, g.param(w))); }, ps);
  EXPECT_EQ(r.skipped_kinks, 2u);
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(GradCheck, RejectsEpsOutsideRangeAndNonFiniteLoss) {
  Parameter<double> w("w", Tensor<double>(Shape{1}, 1.0));
  Parameter<double>* ps[] = {&w};
  auto quad = [&](Graph<double>& g) { return sum(g, mul(g, g.param(w), g.param(w))); };
  EXPECT_THROW(grad_check(quad, ps, GradCheckOptions{1e-5}), std::invalid_argument);
  EXPECT_THROW(grad_check(quad, ps, GradCheckOptions{0.1}), std::invalid_argument);
  Parameter<double> z("z", Tensor<double>(Shape{1}, 1.0));
  Parameter<double>* zs[] = {&z};
  EXPECT_THROW(grad_check([&](Graph<double>& g) { return sum(g, exp(g, scale(g, g.param(z), 1e4))); }, zs),
               NonFiniteError);
}

TEST(GradCheck, CapsCoordinatesPerTensor) {
  CounterRng rng(2);
  Parameter<double> w("w", random_tensor(Shape{40, 10}, rng));
  Parameter<double>* ps[] = {&w};
  const GradCheckReport r =
      grad_check([&](Graph<double>& g) { return probe(g, g.param(w), 9); }, ps, GradCheckOptions{1e-3, 64});
  EXPECT_EQ(r.checked + r.skipped_kinks, 64u);
}

class PrimitiveGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferencesOverSeeds) {
  const PrimitiveCase pc = primitive_cases()[GetParam()];
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CounterRng rng(seed * 7919 + GetParam());
    std::vector<Parameter<double>> params;
    for (std::size_t i = 0; i < pc.shapes.size(); ++i)
      params.emplace_back("p" + std::to_string(i), random_tensor(pc.shapes[i], rng, pc.lo, pc.hi));
    std::vector<Parameter<double>*> ptrs;
    for (auto& p : params) ptrs.push_back(&p);
    const GradCheckReport r = grad_check(
        [&](Graph<double>& g) {
          std::vector<Var> vs;
          for (auto& p : params) vs.push_back(g.param(p));
          return probe(g, pc.build(g, vs), seed + 100);
        },
        ptrs, GradCheckOptions{1e-4, 256, seed});
    EXPECT_LT(r.max_rel_error, 1e-4) << pc.name << " seed " << seed;
    EXPECT_GT(r.checked, 0u) << pc.name;
  }
}

INSTANTIATE_TEST_SUITE_P(All, PrimitiveGradient, ::testing::Range<std::size_t>(0, primitive_cases().size()),
                         [](const auto& info) { return primitive_cases()[info.param].name; });

TEST(Sgd, PlainStep) {
  Parameter<double> w("w", Tensor<double>(Shape{1}, 1.0));
  Sgd<double> opt(SgdOptions{1.0, 0.0, true, 0.0});
  opt.add_group({&w});
  w.grad[0] = 0.5;
  opt.step();
  EXPECT_DOUBLE_EQ(w.value[0], 0.5);
}

TEST(Sgd, DecayOnlyStep) {
  Parameter<double> w("w", Tensor<double>(Shape{1}, 1.0));
  Sgd<double> opt(SgdOptions{1.0, 0.0, true, 0.0005});
  opt.add_group({&w});
  w.grad[0] = 0.0;
  opt.step();
  EXPECT_DOUBLE_EQ(w.value[0], 0.9995);
}

TEST(Sgd, TwoNesterovSteps) {
  // v1 = 1, lookahead 1.9; v2 = 1.9, lookahead 2.71.
  Parameter<double> w("w", Tensor<double>(Shape{1}, 0.0));
  Sgd<double> opt(SgdOptions{0.1, 0.9, true, 0.0});
  opt.add_group({&w});
  w.grad[0] = 1.0;
  opt.step();
  EXPECT_NEAR(opt.velocity(0)[0], 1.0, 1e-15);
  EXPECT_NEAR(w.value[0], -0.19, 1e-15);
  w.grad[0] = 1.0;
  opt.step();
  EXPECT_NEAR(opt.velocity(0)[0], 1.9, 1e-15);
  EXPECT_NEAR(w.value[0], -0.19 - 0.271, 1e-15);
}

TEST(Sgd, GroupScaleAndShapeChecks) {
  Parameter<double> a("a", Tensor<double>(Shape{1}, 0.0)), b("b", Tensor<double>(Shape{1}, 0.0));
  Sgd<double> opt(SgdOptions{1.0, 0.0, false, 0.0});
  opt.add_group({&a}, 1.0);
  opt.add_group({&b}, 0.1);
  a.grad[0] = b.grad[0] = 1.0;
  opt.step();
  EXPECT_DOUBLE_EQ(a.value[0], -1.0);
  EXPECT_DOUBLE_EQ(b.value[0], -0.1);
  EXPECT_THROW(opt.set_lr(0.0), std::invalid_argument);
  a.grad = Tensor<double>(Shape{2});
  EXPECT_THROW(opt.step(), ShapeError);
}

TEST(Sgd, FrozenParametersAreNotUpdated) {
  Parameter<double> a("a", Tensor<double>(Shape{1}, 2.0));
  a.requires_grad = false;
  Sgd<double> opt(SgdOptions{1.0, 0.9, true, 0.5});
  opt.add_group({&a});
  a.grad[0] = 1.0;
  opt.step();
  EXPECT_EQ(a.value[0], 2.0);
}

TEST(Sgd, MultistepSchedule) {
  EXPECT_DOUBLE_EQ(multistep_lr(0.1, {24}, 0.1, 23), 0.1);
  EXPECT_NEAR(multistep_lr(0.1, {24}, 0.1, 24), 0.01, 1e-15);
  EXPECT_NEAR(multistep_lr(1.0, {10, 20}, 0.5, 25), 0.25, 1e-15);
}

TEST(CounterRng, ChildStreamsAreIndependentOfDrawOrder) {
  CounterRng root(42);
  CounterRng a = root.child(3);
  root.next_u64();
  CounterRng b = CounterRng(42).child(3);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(CounterRng(42).child(3).next_u64(), CounterRng(42).child(4).next_u64());
}

TEST(CounterRng, BelowIsInRangeAndRoughlyUniform) {
  CounterRng rng(9);
  std::map<std::size_t, int> counts;
  for (int i = 0; i < 7000; ++i) {
    const std::size_t v = rng.below(7);
    ASSERT_LT(v, 7u);
    ++counts[v];
  }
  for (auto [k, c] : counts) EXPECT_NEAR(c, 1000, 150) << k;
}

TEST(CounterRng, SampleWithoutReplacementIsDistinct) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    CounterRng rng(seed);
    const auto s = rng.sample_without_replacement(20, 1 + seed % 20);
    std::vector<bool> seen(20);
    for (std::size_t v : s) {
      ASSERT_LT(v, 20u);
      EXPECT_FALSE(seen[v]);
      seen[v] = true;
    }
  }
}
