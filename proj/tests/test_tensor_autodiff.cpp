#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dwt/ops.hpp"
#include "dwt/prob.hpp"
#include "support/fd.hpp"

using namespace dwt;
using dwt::testing::check_gradients;
using dwt::testing::random_tensor;

namespace {

// Scalar <y, w> for a fixed random w, so every output element of y gets a
// distinct upstream gradient.
Var<double> project(Graph<double>& g, Var<double> y, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    const std::size_t n = y.value().size();
    Var<double> w = g.leaf(random_tensor(Shape{n, 1}, rng), false);
    return sum(matmul(reshape(y, Shape{1, n}), w));
}

Tensor<double> mat(Shape s, std::vector<double> v) { return Tensor<double>(std::move(s), std::move(v)); }

constexpr double kH = 1e-3;

}  // namespace

TEST(Tensor, ShapeAndDataLengthMustAgree) {
    EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), DimensionError);
    Tensor<float> t(Shape{2, 3}, 1.5f);
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.cols(), 3u);
    EXPECT_EQ(Tensor<float>::scalar(2.0f).item(), 2.0f);
    EXPECT_THROW(t.item(), ContractError);
}

TEST(Graph, LeafRejectsNonFiniteValues) {
    Graph<double> g;
    EXPECT_THROW(g.leaf(mat({2}, {1.0, NAN})), NumericError);
    EXPECT_THROW(g.leaf(mat({1}, {INFINITY})), NumericError);
}

TEST(Graph, NonFiniteForwardOutputIsAnError) {
    Graph<double> g;
    Var<double> x = g.leaf(mat({1, 1}, {1e200}));
    EXPECT_THROW(matmul(x, x), NumericError);
}

TEST(Graph, BackwardNeedsScalarLoss) {
    Graph<double> g;
    Var<double> x = g.leaf(mat({2}, {1, 2}), true);
    EXPECT_THROW(g.backward(x), ContractError);
}

TEST(Graph, ValueReferencesSurviveGrowth) {
    Graph<double> g;
    const Var<double> x = g.leaf(Tensor<double>(Shape{2}, {1.5, -2.0}));
    const Tensor<double>& ref = x.value();
    for (int i = 0; i < 5000; ++i) g.leaf(Tensor<double>(Shape{1}, 0.0));
    EXPECT_EQ(&ref, &x.value());
    EXPECT_EQ(ref[1], -2.0);
}

TEST(Graph, SumGivesAllOnes) {
    Graph<double> g;
    Var<double> x = g.leaf(mat({2, 3}, {1, 2, 3, 4, 5, 6}), true);
    auto grads = g.backward(sum(x));
    for (double v : grads.at(x.id).values()) EXPECT_EQ(v, 1.0);
}

TEST(Graph, LeavesWithoutPathGetZeros) {
    Graph<double> g;
    Var<double> x = g.leaf(mat({2}, {1, 2}), true);
    Var<double> unused = g.leaf(mat({3}, {1, 2, 3}), true);
    auto grads = g.backward(sum(x));
    ASSERT_EQ(grads.count(unused.id), 1u);
    for (double v : grads.at(unused.id).values()) EXPECT_EQ(v, 0.0);
}

TEST(Graph, NoGradientLeavesAreAbsentFromMap) {
    Graph<double> g;
    Var<double> x = g.leaf(mat({2}, {1, 2}), true);
    Var<double> c = g.leaf(mat({2}, {3, 4}), false);
    auto grads = g.backward(sum(add(x, c)));
    EXPECT_EQ(grads.count(c.id), 0u);
    EXPECT_EQ(grads.size(), 1u);
}

TEST(Graph, SharedInputAccumulates) {
    Graph<double> g;
    Var<double> x = g.leaf(mat({2}, {1, 2}), true);
    auto grads = g.backward(sum(add(x, x)));
    for (double v : grads.at(x.id).values()) EXPECT_EQ(v, 2.0);
}

TEST(Graph, DetachBlocksGradient) {
    Graph<double> g;
    Var<double> x = g.leaf(mat({2}, {1, 2}), true);
    Var<double> d = detach(x);
    EXPECT_FALSE(d.requires_grad());
    auto grads = g.backward(sum(add(x, scale(d, 3.0))));
    for (double v : grads.at(x.id).values()) EXPECT_EQ(v, 1.0);
}

TEST(Matmul, IdentityAndHandSum) {
    Graph<double> g;
    Var<double> i2 = g.leaf(mat({2, 2}, {1, 0, 0, 1}));
    Var<double> m = g.leaf(mat({2, 2}, {1, 2, 3, 4}));
    EXPECT_EQ(matmul(i2, m).value().values(), (std::vector<double>{1, 2, 3, 4}));
    Var<double> a = g.leaf(mat({1, 2}, {1, 2}));
    Var<double> b = g.leaf(mat({2, 1}, {3, 4}));
    EXPECT_EQ(matmul(a, b).value().values(), (std::vector<double>{11}));
}

TEST(Matmul, ShapeMismatchIsDimensionError) {
    Graph<double> g;
    Var<double> a = g.leaf(Tensor<double>(Shape{2, 3}));
    Var<double> b = g.leaf(Tensor<double>(Shape{2, 3}));
    EXPECT_THROW(matmul(a, b), DimensionError);
}

TEST(Matmul, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(1);
    auto rep = check_gradients({random_tensor({5, 7}, rng), random_tensor({7, 3}, rng)},
                               [](Graph<double>& g, const auto& v) { return project(g, matmul(v[0], v[1])); }, kH);
    EXPECT_LT(rep.max_rel, 1e-6);
    EXPECT_EQ(rep.checked, 35u + 21u);
}

TEST(Kernels, GemmVariantsAgreeWithNaiveProduct) {
    std::mt19937_64 rng(3);
    const std::size_t m = 9, k = 70, n = 131;
    Tensor<double> a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    std::vector<double> ref(m * n, 0.0), c(m * n, 0.0), ct(m * n, 0.0), cn(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) ref[i * n + j] += a[i * k + p] * b[p * n + j];
    kernels::gemm_nn(a.data(), b.data(), c.data(), m, k, n);
    std::vector<double> at(k * m), bt(n * k);
    kernels::transpose(a.data(), at.data(), m, k);
    kernels::transpose(b.data(), bt.data(), k, n);
    kernels::gemm_tn(at.data(), b.data(), ct.data(), m, k, n);
    kernels::gemm_nt(a.data(), bt.data(), cn.data(), m, k, n);
    for (std::size_t i = 0; i < m * n; ++i) {
        EXPECT_EQ(c[i], ref[i]);
        EXPECT_EQ(ct[i], ref[i]);
        EXPECT_EQ(cn[i], ref[i]);
    }
}

TEST(Ops, LinearGradients) {
    std::mt19937_64 rng(2);
    auto rep = check_gradients({random_tensor({4, 6}, rng), random_tensor({6, 5}, rng), random_tensor({5}, rng)},
                               [](Graph<double>& g, const auto& v) { return project(g, linear(v[0], v[1], v[2])); },
                               kH);
    EXPECT_LT(rep.max_rel, 1e-6);
}

TEST(Ops, BmmGradientsBothLayouts) {
    std::mt19937_64 rng(4);
    for (bool tb : {false, true}) {
        Shape sb = tb ? Shape{3, 5, 4} : Shape{3, 4, 5};
        auto rep = check_gradients({random_tensor({3, 2, 4}, rng), random_tensor(sb, rng)},
                                   [tb](Graph<double>& g, const auto& v) { return project(g, bmm(v[0], v[1], tb)); },
                                   kH);
        EXPECT_LT(rep.max_rel, 1e-6) << "transpose_b=" << tb;
    }
}

TEST(Ops, ShapeOpsGradients) {
    std::mt19937_64 rng(5);
    auto rep = check_gradients({random_tensor({2, 3, 4, 5}, rng)}, [](Graph<double>& g, const auto& v) {
        return project(g, transpose(reshape(swap_axes12(v[0]), Shape{8, 15})));
    });
    EXPECT_LT(rep.max_rel, 1e-6);
}

TEST(Ops, SwapAxesMovesElements) {
    Graph<double> g;
    std::vector<double> v(24);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
    Var<double> x = g.leaf(mat({1, 2, 3, 4}, v));
    const Tensor<double>& y = swap_axes12(x).value();
    EXPECT_EQ(y.shape(), (Shape{1, 3, 2, 4}));
    // y[0][c][b][d] == x[0][b][c][d]
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t d = 0; d < 4; ++d) EXPECT_EQ(y[(c * 2 + b) * 4 + d], x.value()[(b * 3 + c) * 4 + d]);
}

TEST(Ops, ScaleMeanAddGradients) {
    std::mt19937_64 rng(6);
    auto rep = check_gradients({random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
                               [](Graph<double>& g, const auto& v) {
                                   Var<double> y = add(scale(v[0], 2.5), v[1]);
                                   return add(project(g, y), mean(v[1]));
                               });
    EXPECT_LT(rep.max_rel, 1e-6);
}

TEST(Gelu, ZeroAndGradients) {
    Graph<double> g;
    EXPECT_EQ(gelu(g.leaf(mat({1}, {0.0}))).value()[0], 0.0);
    std::mt19937_64 rng(7);
    auto rep = check_gradients({random_tensor({4, 8}, rng, 2.0)},
                               [](Graph<double>& g2, const auto& v) { return project(g2, gelu(v[0])); }, kH);
    EXPECT_LT(rep.max_rel, 1e-4);
}

TEST(Gelu, FloatTanhTracksLibm) {
    double worst = 0.0;
    for (int i = -200000; i <= 200000; ++i) {
        const float x = static_cast<float>(i) * 6e-5f;
        worst = std::max(worst, std::abs(double(detail::tanh_float(x)) - std::tanh(double(x))));
    }
    EXPECT_LT(worst, 1e-6);
    EXPECT_EQ(detail::tanh_float(0.0f), 0.0f);
    EXPECT_EQ(detail::tanh_float(50.0f), 1.0f);
    EXPECT_EQ(detail::tanh_float(-50.0f), -1.0f);
}

TEST(LayerNorm, ConstantRowNormalisesToZero) {
    Graph<double> g;
    Var<double> x = g.leaf(mat({2, 4}, {3, 3, 3, 3, 1, 2, 3, 4}));
    Var<double> gain = g.leaf(mat({4}, {1, 1, 1, 1}));
    Var<double> bias = g.leaf(mat({4}, {0.5, 0.5, 0.5, 0.5}));
    const Tensor<double>& y = layer_norm(x, gain, bias).value();
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(y[j], 0.5);
    double m = 0, v = 0;
    for (std::size_t j = 4; j < 8; ++j) m += y[j] - 0.5;
    for (std::size_t j = 4; j < 8; ++j) v += (y[j] - 0.5) * (y[j] - 0.5);
    EXPECT_NEAR(m / 4, 0.0, 1e-12);
    EXPECT_NEAR(v / 4, 1.0, 1e-9);
}

TEST(LayerNorm, Gradients) {
    std::mt19937_64 rng(8);
    auto rep = check_gradients({random_tensor({3, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)},
                               [](Graph<double>& g, const auto& v) { return project(g, layer_norm(v[0], v[1], v[2])); },
                               kH);
    EXPECT_LT(rep.max_rel, 1e-4);
}

TEST(Embedding, RepeatedIdsAccumulate) {
    std::mt19937_64 rng(9);
    const std::vector<std::size_t> ids{1, 3, 1, 1, 0};
    auto rep = check_gradients({random_tensor({5, 3}, rng)}, [&](Graph<double>& g, const auto& v) {
        return project(g, embedding_lookup(v[0], ids));
    });
    EXPECT_LT(rep.max_rel, 1e-6);

    Graph<double> g;
    Var<double> table = g.leaf(Tensor<double>(Shape{5, 3}, 0.0), true);
    auto grads = g.backward(sum(embedding_lookup(table, ids)));
    EXPECT_EQ(grads.at(table.id).at(1, 0), 3.0);
    EXPECT_EQ(grads.at(table.id).at(2, 0), 0.0);
}

TEST(Embedding, OutOfRangeIdIsIndexError) {
    Graph<double> g;
    Var<double> table = g.leaf(Tensor<double>(Shape{4, 2}));
    EXPECT_THROW(embedding_lookup(table, std::vector<std::size_t>{4}), IndexError);
}

TEST(Softmax, GradientsAtTemperatures) {
    std::mt19937_64 rng(10);
    for (double tau : {0.5, 1.0, 3.0}) {
        auto rep = check_gradients({random_tensor({3, 5}, rng, 2.0)}, [tau](Graph<double>& g, const auto& v) {
            return project(g, softmax_temperature(v[0], tau));
        });
        EXPECT_LT(rep.max_rel, 1e-4) << "tau=" << tau;
        auto rep2 = check_gradients({random_tensor({3, 5}, rng, 2.0)}, [tau](Graph<double>& g, const auto& v) {
            return project(g, log_softmax(v[0], tau));
        });
        EXPECT_LT(rep2.max_rel, 1e-4) << "tau=" << tau;
    }
}
