#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "gatefuse/ops.hpp"
#include "gradcheck.hpp"

using namespace gatefuse;
using gatefuse::testing::max_grad_error;
using gatefuse::testing::random_tensor;
using T = Tensor<double>;
using Inputs = std::vector<T>;

namespace {
constexpr double kTol = 1e-4;

// Fixed random projection so non-scalar outputs become a scalar loss with
// non-uniform upstream gradients.
T project(const T& y, std::uint64_t seed = 99) {
  return ops::sum_all(ops::mul(y, random_tensor(y.shape(), seed)));
}
}  // namespace

TEST(OpsGrad, BroadcastBinary) {
  auto f = [](const Inputs& in) {
    return project(ops::add(ops::mul(in[0], in[1]), ops::sub(in[0], in[1])));
  };
  EXPECT_LT(max_grad_error(f, {random_tensor({2, 3, 4}, 1), random_tensor({3, 1}, 2)}), kTol);
}

TEST(OpsGrad, Elementwise) {
  auto f = [](const Inputs& in) {
    const auto& x = in[0];
    auto a = ops::sigmoid(x), b = ops::gelu(x), c = ops::exp(ops::mul_scalar(x, 0.3));
    auto d = ops::log(ops::add_scalar(ops::mul(x, x), 1.0));
    auto e = ops::rsub_scalar(2.0, ops::relu(x));
    return project(ops::add(ops::add(ops::add(a, b), ops::add(c, d)), e));
  };
  EXPECT_LT(max_grad_error(f, {random_tensor({3, 5}, 3)}), kTol);
}

TEST(OpsGrad, Matmuls) {
  auto f = [](const Inputs& in) {
    return project(ops::add(ops::matmul(in[0], in[1]), ops::matmul_nt(in[0], in[2])));
  };
  EXPECT_LT(max_grad_error(f, {random_tensor({2, 3, 4}, 4), random_tensor({4, 5}, 5),
                               random_tensor({5, 4}, 6)}),
            kTol);
}

TEST(OpsGrad, SoftmaxFamily) {
  auto f = [](const Inputs& in) {
    auto a = ops::softmax_last(in[0]);
    auto b = ops::log_softmax_last(in[0]);
    auto c = ops::logsumexp_last(in[0]);
    return ops::add(ops::add(project(a), project(b, 7)), project(c, 8));
  };
  EXPECT_LT(max_grad_error(f, {random_tensor({3, 4}, 9)}), kTol);
}

TEST(OpsGrad, LayerNorm) {
  auto f = [](const Inputs& in) { return project(ops::layer_norm(in[0], in[1], in[2], 1e-5)); };
  EXPECT_LT(max_grad_error(f, {random_tensor({2, 3, 6}, 10), random_tensor({6}, 11),
                               random_tensor({6}, 12)}),
            kTol);
}

TEST(OpsGrad, ShapeAndReductionOps) {
  auto f = [](const Inputs& in) {
    auto cat = ops::concat_last(in[0], in[1]);  // [2,3,5]
    auto r = ops::reshape(cat, {6, 5});
    auto s = ops::add(project(ops::sum_axis(cat, 1)), project(ops::mean_axis(cat, 2), 13));
    auto n = project(ops::l2_normalize_last(r), 14);
    auto sel = project(ops::select_last(cat, 4), 15);
    auto tk = project(ops::take(r, {0, 7, 7, 29}, {2, 2}), 16);
    auto mf = project(ops::masked_fill(in[0], std::vector<std::uint8_t>{1, 0, 0, 1, 0, 0, 0, 1, 0,
                                                                        0, 0, 0},
                                       -3.0),
                      17);
    return ops::add(ops::add(ops::add(s, n), ops::add(sel, tk)),
                    ops::add(mf, ops::mean_all(cat)));
  };
  EXPECT_LT(max_grad_error(f, {random_tensor({2, 3, 2}, 18), random_tensor({2, 3, 3}, 19)}), kTol);
}

TEST(OpsGrad, EmbeddingAndNll) {
  std::vector<std::int32_t> ids{0, 2, 2, 1};
  auto f = [&](const Inputs& in) {
    auto e = ops::embedding(in[0], ids, {2, 2});
    std::vector<std::int32_t> targets{1, 0, 2, 1};
    std::vector<double> weights{1.0, 0.0, 0.5, 2.0};
    auto logits = ops::reshape(e, {4, 3});
    return ops::weighted_nll_sum(logits, targets, weights);
  };
  EXPECT_LT(max_grad_error(f, {random_tensor({3, 3}, 20)}), kTol);
}

TEST(OpsGrad, AttentionCausalMaskedMultiHead) {
  const std::vector<std::uint8_t> mask{1, 1, 1, 0, 1, 1, 0, 0};
  auto f = [&](const Inputs& in) {
    return project(ops::attention(in[0], in[1], in[2], mask, true, 2));
  };
  EXPECT_LT(max_grad_error(f, {random_tensor({2, 4, 4}, 21), random_tensor({2, 4, 4}, 22),
                               random_tensor({2, 4, 4}, 23)}),
            kTol);
}

TEST(OpsGrad, CrossAttentionSingleKey) {
  auto f = [](const Inputs& in) {
    return project(ops::attention(in[0], in[1], in[2], {}, false, 2));
  };
  EXPECT_LT(max_grad_error(f, {random_tensor({2, 3, 4}, 24), random_tensor({2, 1, 4}, 25),
                               random_tensor({2, 1, 4}, 26)}),
            kTol);
}

TEST(OpsGrad, DropoutWithFixedMask) {
  auto f = [](const Inputs& in) {
    Rng rng(5, "dropout");
    return project(ops::dropout(in[0], 0.3, &rng, true));
  };
  EXPECT_LT(max_grad_error(f, {random_tensor({4, 5}, 27)}), kTol);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  auto p = ops::softmax_last(random_tensor({3, 7}, 28, 10.0));
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (std::size_t i = 0; i < 7; ++i) s += p.values()[r * 7 + i];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Ops, LogsumexpHandlesNegativeInfinity) {
  const double ninf = -std::numeric_limits<double>::infinity();
  T x({1, 3}, {ninf, 0.0, ninf});
  EXPECT_DOUBLE_EQ(ops::logsumexp_last(x).item(), 0.0);
}

TEST(Ops, AttentionOnlyLooksBackwards) {
  auto q = random_tensor({1, 4, 4}, 29), k = random_tensor({1, 4, 4}, 30),
       v = random_tensor({1, 4, 4}, 31);
  auto base = ops::attention(q, k, v, {}, true, 2);
  k.values()[3 * 4] += 5.0;  // perturb the last key
  v.values()[3 * 4] += 5.0;
  auto changed = ops::attention(q, k, v, {}, true, 2);
  for (std::size_t i = 0; i < 3 * 4; ++i) EXPECT_EQ(base.values()[i], changed.values()[i]);
}

TEST(Ops, EmbeddingRejectsOutOfRangeIds) {
  T table({3, 2}, std::vector<double>(6, 0.0));
  std::vector<std::int32_t> ids{3};
  EXPECT_THROW(ops::embedding(table, ids, {1}), std::invalid_argument);
}

TEST(Ops, BroadcastRejectsIncompatibleShapes) {
  EXPECT_THROW(ops::add(random_tensor({2, 3}, 1), random_tensor({4}, 2)), std::invalid_argument);
}

TEST(Ops, DropoutIsIdentityInEval) {
  auto x = random_tensor({3, 3}, 32);
  EXPECT_TRUE(ops::dropout(x, 0.5, nullptr, false).same_node(x));
}

TEST(GradCheck, DetectsAWrongBackward) {
  auto wrong_square = [](const T& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * x.values()[i];
    return T::make_result(x.shape(), std::move(out), "wrong_square", {x},
                          [](TensorNode<double>& node) {
                            auto& g = node.parents[0]->grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += node.grad[i] * node.parents[0]->data[i];  // missing factor 2
                          });
  };
  auto f = [&](const Inputs& in) { return ops::sum_all(wrong_square(in[0])); };
  EXPECT_GT(max_grad_error(f, {random_tensor({4}, 1)}), 0.1);
}
