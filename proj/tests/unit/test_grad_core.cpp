#include <cmath>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "advdet/errors.hpp"
#include "advdet/gradcheck.hpp"
#include "advdet/graph.hpp"
#include "advdet/losses.hpp"

using namespace advdet;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Builds a graph over named leaves, reduces the op output to a scalar with a
// fixed random weighting, and compares backward with central differences for
// every leaf.
struct Probe {
  std::function<NodeId(Graph&, const std::vector<NodeId>&)> op;
  std::vector<std::pair<std::string, Shape>> leaves;
  double lo = -2.0, hi = 2.0;
};

double check_probe(const Probe& probe, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Graph g;
  std::vector<NodeId> ids;
  TensorMap bind;
  for (const auto& [name, shape] : probe.leaves) {
    ids.push_back(g.input(name, shape));
    bind[name] = random_tensor(rng, shape, probe.lo, probe.hi);
  }
  const NodeId y = probe.op(g, ids);
  const NodeId w = g.constant(random_tensor(rng, g.shape(y)));
  const NodeId out = g.sum(g.mul(y, w));

  const TensorMap grads = backward(g, forward(g, bind), out);
  double worst = 0.0;
  for (const auto& [name, value] : bind) {
    auto f = [&, name = name](const Tensor& p) {
      TensorMap b = bind;
      b[name] = p;
      return forward(g, b).value(out).item();
    };
    const Tensor fd = finite_difference_grad(f, value, 1e-6);
    worst = std::max(worst, max_relative_error(grads.at(name), fd));
  }
  return worst;
}

void expect_fd_agreement(const Probe& probe) {
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    const double err = check_probe(probe, 1000 + trial);
    ASSERT_LT(err, 1e-5) << "trial " << trial;
  }
}

}  // namespace

TEST(Softmax, Examples) {
  Graph g;
  const NodeId x = g.input("x", {2});
  const NodeId s = g.softmax(x, 0);
  auto eval = [&](std::vector<double> v) {
    return forward(g, {{"x", Tensor({2}, std::move(v))}}).value(s);
  };
  EXPECT_EQ(eval({0, 0}), Tensor({2}, {0.5, 0.5}));
  const Tensor a = eval({std::log(3.0), 0.0});
  EXPECT_NEAR(a[0], 0.75, 1e-15);
  EXPECT_NEAR(a[1], 0.25, 1e-15);
  const Tensor b = eval({1000.0, 0.0});
  EXPECT_EQ(b[0], 1.0);
  EXPECT_EQ(b[1], 0.0);
}

TEST(Softmax, InvalidAxisIsShapeError) {
  Graph g;
  const NodeId x = g.input("x", {2, 3});
  EXPECT_THROW(g.softmax(x, 2), ShapeError);
  EXPECT_THROW(g.log_softmax(x, 5), ShapeError);
}

TEST(Softmax, SlicesSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(3);
  Graph g;
  const NodeId x = g.input("x", {4, 7});
  const NodeId s0 = g.softmax(x, 0);
  const NodeId s1 = g.softmax(x, 1);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor v = random_tensor(rng, {4, 7}, -50, 50);
    const Execution run = forward(g, {{"x", v}});
    for (std::size_t i = 0; i < 4; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 7; ++j) sum += run.value(s1)[i * 7 + j];
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
    for (std::size_t j = 0; j < 7; ++j) {
      double sum = 0.0;
      for (std::size_t i = 0; i < 4; ++i) sum += run.value(s0)[i * 7 + j];
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
    // Adding a per-row constant leaves the row softmax unchanged.
    Tensor shifted = v;
    for (std::size_t i = 0; i < 4; ++i) {
      const double c = std::uniform_real_distribution<double>(-100, 100)(rng);
      for (std::size_t j = 0; j < 7; ++j) shifted[i * 7 + j] += c;
    }
    const Tensor moved = forward(g, {{"x", shifted}}).value(s1);
    for (std::size_t k = 0; k < moved.size(); ++k) {
      EXPECT_NEAR(moved[k], run.value(s1)[k], 1e-12);
    }
  }
}

TEST(Forward, Examples) {
  Graph id;
  id.input("x", {3});
  const Tensor x({3}, {1, 2, 3});
  EXPECT_EQ(forward(id, {{"x", x}}).output(), x);

  Graph g;
  const NodeId in = g.input("x", {1, 2});
  const NodeId w = g.parameter("w", {1, 2});
  const NodeId b = g.parameter("b", {1});
  g.affine(in, w, b);
  const Execution run = forward(
      g, {{"x", Tensor({1, 2}, {2, 3})}, {"w", Tensor({1, 2}, {1, -1})}, {"b", Tensor({1})}});
  EXPECT_EQ(run.output().item(), -1.0);
}

TEST(Forward, MissingOrMisshapedBindingNamesTheNode) {
  Graph g;
  const NodeId x = g.input("pixels", {2, 2});
  g.relu(x);
  try {
    forward(g, {});
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("pixels"), std::string::npos);
  }
  try {
    forward(g, {{"pixels", Tensor({4})}});
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("pixels"), std::string::npos);
  }
}

TEST(Forward, NonFiniteValueIsNumericError) {
  Graph g;
  const NodeId x = g.input("x", {2});
  g.log(x);
  EXPECT_THROW(forward(g, {{"x", Tensor({2}, {1.0, -1.0})}}), NumericError);
}

TEST(Forward, ZeroFinalLayerGivesZeroOutput) {
  std::mt19937_64 rng(5);
  Graph g;
  const NodeId x = g.input("x", {3, 4});
  const NodeId h = g.relu(g.affine(x, g.parameter("w1", {5, 4}), g.parameter("b1", {5})));
  g.affine(h, g.parameter("w2", {2, 5}), g.parameter("b2", {2}));
  const Execution run = forward(g, {{"x", random_tensor(rng, {3, 4})},
                                    {"w1", random_tensor(rng, {5, 4})},
                                    {"b1", random_tensor(rng, {5})},
                                    {"w2", Tensor({2, 5})},
                                    {"b2", Tensor({2})}});
  EXPECT_EQ(run.output(), Tensor({3, 2}));
}

TEST(Forward, Deterministic) {
  std::mt19937_64 rng(9);
  Graph g;
  const NodeId x = g.input("x", {2, 1, 6, 6});
  const NodeId c = g.conv2d(x, g.parameter("k", {3, 1, 3, 3}), g.parameter("b", {3}), 1);
  g.sum(g.max_pool2d(g.relu(c), 2));
  const TensorMap bind{{"x", random_tensor(rng, {2, 1, 6, 6})},
                       {"k", random_tensor(rng, {3, 1, 3, 3})},
                       {"b", random_tensor(rng, {3})}};
  const Execution a = forward(g, bind);
  const Execution b = forward(g, bind);
  EXPECT_EQ(a.output(), b.output());
  const NodeId out{g.size() - 1};
  EXPECT_EQ(backward(g, a, out), backward(g, b, out));
}

TEST(Backward, Examples) {
  Graph sq;
  const NodeId p = sq.parameter("p", {});
  const NodeId y = sq.mul(p, p);
  EXPECT_EQ(backward(sq, forward(sq, {{"p", Tensor::scalar(3)}}), y).at("p").item(), 6.0);

  Graph constant;
  const NodeId q = constant.parameter("q", {2});
  const NodeId unused = constant.parameter("unused", {3});
  (void)unused;
  const NodeId c = constant.sum(constant.constant(Tensor({2}, {4, 5})));
  (void)q;
  const TensorMap g = backward(constant, forward(constant, {{"q", Tensor({2}, {1, 2})},
                                                           {"unused", Tensor({3})}}),
                               c);
  EXPECT_EQ(g.at("q"), Tensor({2}));
  EXPECT_EQ(g.at("unused"), Tensor({3}));
}

TEST(Backward, CrossEntropyGradientIsSoftmaxMinusLabel) {
  // softmax value 0.7 on the label: logit difference ln(7/3).
  const Tensor logits({1, 2}, {0.0, std::log(7.0 / 3.0)});
  const ValueAndGrad vg = loss_value_and_grad(logits, [](Graph& g, NodeId l) {
    return ce_loss(g, l, Labels{1});
  });
  EXPECT_NEAR(vg.grad[1], -0.3, 1e-15);
  EXPECT_NEAR(vg.grad[0], 0.3, 1e-15);
}

TEST(Backward, NonScalarOutputIsContractError) {
  Graph g;
  const NodeId x = g.input("x", {3});
  const NodeId r = g.relu(x);
  const Execution run = forward(g, {{"x", Tensor({3}, {1, 2, 3})}});
  EXPECT_THROW(backward(g, run, r), ContractError);
}

TEST(Backward, RestrictedMatchesFull) {
  std::mt19937_64 rng(21);
  Graph g;
  const NodeId x = g.input("x", {4, 3});
  const NodeId w = g.parameter("w", {2, 3});
  const NodeId b = g.parameter("b", {2});
  const NodeId out = g.sum(g.exp(g.affine(x, w, b)));
  const TensorMap bind{{"x", random_tensor(rng, {4, 3})},
                       {"w", random_tensor(rng, {2, 3})},
                       {"b", random_tensor(rng, {2})}};
  const Execution run = forward(g, bind);
  const TensorMap all = backward(g, run, out);
  const std::vector<NodeId> only_x{x};
  const TensorMap some = backward(g, run, out, only_x);
  ASSERT_EQ(some.size(), 1u);
  EXPECT_EQ(some.at("x"), all.at("x"));
}

TEST(FiniteDifference, Examples) {
  const Tensor fd = finite_difference_grad(
      [](const Tensor& p) { return p.item() * p.item(); }, Tensor::scalar(3), 1e-6);
  EXPECT_NEAR(fd.item(), 6.0, 1e-6);

  const Tensor ones = finite_difference_grad(
      [](const Tensor& p) {
        double s = 0;
        for (double v : p.values()) s += v;
        return s;
      },
      Tensor({4}, {1, -2, 3.5, 0}), 1e-6);
  for (double v : ones.values()) EXPECT_NEAR(v, 1.0, 1e-9);

  EXPECT_THROW(finite_difference_grad([](const Tensor&) { return 0.0; }, Tensor({1}), 0.0),
               ContractError);
  EXPECT_THROW(finite_difference_grad([](const Tensor&) { return NAN; }, Tensor({1}), 1e-6),
               NumericError);
}

TEST(FiniteDifference, FalseOutputLossMatchesBackward) {
  std::mt19937_64 rng(17);
  const Tensor logits = random_tensor(rng, {4, 3});
  const Labels y{0, 2, 1, 2};
  const ValueAndGrad vg =
      loss_value_and_grad(logits, [&](Graph& g, NodeId l) { return false_output_loss(g, l, y); });
  const Tensor fd = finite_difference_grad(
      [&](const Tensor& p) { return false_output_loss(p, y); }, logits, 1e-6);
  EXPECT_LT(max_relative_error(vg.grad, fd), 1e-5);
}

// ----- per-primitive oracle sweep -------------------------------------------

TEST(PrimitiveGradients, Affine) {
  expect_fd_agreement({[](Graph& g, const std::vector<NodeId>& a) {
                         return g.affine(a[0], a[1], a[2]);
                       },
                       {{"x", {3, 4}}, {"w", {5, 4}}, {"b", {5}}}});
}

TEST(PrimitiveGradients, Conv2d) {
  expect_fd_agreement({[](Graph& g, const std::vector<NodeId>& a) {
                         return g.conv2d(a[0], a[1], a[2], 1);
                       },
                       {{"x", {2, 2, 5, 4}}, {"k", {3, 2, 3, 3}}, {"b", {3}}}});
  expect_fd_agreement({[](Graph& g, const std::vector<NodeId>& a) {
                         return g.conv2d(a[0], a[1], a[2], 0);
                       },
                       {{"x", {1, 1, 5, 5}}, {"k", {2, 1, 2, 2}}, {"b", {2}}}});
}

TEST(PrimitiveGradients, MaxPool2d) {
  expect_fd_agreement({[](Graph& g, const std::vector<NodeId>& a) {
                         return g.max_pool2d(a[0], 2);
                       },
                       {{"x", {2, 3, 4, 6}}}});
}

TEST(PrimitiveGradients, Relu) {
  expect_fd_agreement(
      {[](Graph& g, const std::vector<NodeId>& a) { return g.relu(a[0]); }, {{"x", {5, 3}}}});
}

TEST(PrimitiveGradients, Elementwise) {
  expect_fd_agreement({[](Graph& g, const std::vector<NodeId>& a) { return g.add(a[0], a[1]); },
                       {{"a", {3, 2}}, {"b", {3, 2}}}});
  expect_fd_agreement({[](Graph& g, const std::vector<NodeId>& a) { return g.mul(a[0], a[1]); },
                       {{"a", {3, 2}}, {"b", {3, 2}}}});
  expect_fd_agreement(
      {[](Graph& g, const std::vector<NodeId>& a) { return g.neg(a[0]); }, {{"a", {4}}}});
  expect_fd_agreement(
      {[](Graph& g, const std::vector<NodeId>& a) { return g.scale(a[0], -1.7); }, {{"a", {4}}}});
  expect_fd_agreement(
      {[](Graph& g, const std::vector<NodeId>& a) { return g.shift(a[0], 0.3); }, {{"a", {4}}}});
  expect_fd_agreement(
      {[](Graph& g, const std::vector<NodeId>& a) { return g.exp(a[0]); }, {{"a", {2, 3}}}});
  expect_fd_agreement({[](Graph& g, const std::vector<NodeId>& a) { return g.log(a[0]); },
                       {{"a", {2, 3}}},
                       0.2,
                       5.0});
}

TEST(PrimitiveGradients, Reductions) {
  expect_fd_agreement(
      {[](Graph& g, const std::vector<NodeId>& a) { return g.sum(a[0]); }, {{"a", {3, 4}}}});
  expect_fd_agreement(
      {[](Graph& g, const std::vector<NodeId>& a) { return g.mean(a[0]); }, {{"a", {3, 4}}}});
  expect_fd_agreement(
      {[](Graph& g, const std::vector<NodeId>& a) { return g.max(a[0]); }, {{"a", {3, 4}}}});
}

TEST(PrimitiveGradients, GatherConcatReshape) {
  expect_fd_agreement({[](Graph& g, const std::vector<NodeId>& a) {
                         return g.gather(a[0], {5, 0, 3, 3, 11});
                       },
                       {{"a", {3, 4}}}});
  expect_fd_agreement({[](Graph& g, const std::vector<NodeId>& a) {
                         const std::vector<NodeId> parts{a[0], a[1], a[0]};
                         return g.concat(parts);
                       },
                       {{"a", {2, 2}}, {"b", {3}}}});
  expect_fd_agreement({[](Graph& g, const std::vector<NodeId>& a) {
                         return g.reshape(a[0], {4, 3});
                       },
                       {{"a", {2, 6}}}});
}

TEST(PrimitiveGradients, SoftmaxAndLogSoftmax) {
  for (std::size_t axis : {0u, 1u}) {
    expect_fd_agreement({[axis](Graph& g, const std::vector<NodeId>& a) {
                           return g.softmax(a[0], axis);
                         },
                         {{"a", {3, 5}}}});
    expect_fd_agreement({[axis](Graph& g, const std::vector<NodeId>& a) {
                           return g.log_softmax(a[0], axis);
                         },
                         {{"a", {3, 5}}}});
  }
}

TEST(GraphShapes, CheckedAtBuildTime) {
  Graph g;
  const NodeId x = g.input("x", {2, 3});
  const NodeId y = g.input("y", {3, 2});
  EXPECT_THROW(g.add(x, y), ShapeError);
  EXPECT_THROW(g.affine(x, g.parameter("w", {4, 2}), g.parameter("b", {4})), ShapeError);
  EXPECT_THROW(g.max_pool2d(x, 2), ShapeError);
  EXPECT_THROW(g.gather(x, {6}), ShapeError);
  EXPECT_THROW(g.reshape(x, {5}), ShapeError);
  EXPECT_THROW(g.input("x", {1}), ContractError);
}
