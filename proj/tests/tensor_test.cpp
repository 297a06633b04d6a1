#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mmil/gradcheck.hpp"
#include "mmil/tensor.hpp"

using namespace mmil;

namespace {

// Independent triple-loop product used as the matmul oracle.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    Tensor c = Tensor::zeros({a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < a.cols(); ++p) acc += a.at(i, p) * b.at(p, j);
            c.at(i, j) = acc;
        }
    return c;
}

}  // namespace

TEST(Matmul, IdentityCase) {
    Tensor eye = Tensor::from_rows({{1, 0}, {0, 1}});
    Tensor m = Tensor::from_rows({{1, 2}, {3, 4}});
    Tensor out = matmul(eye, m);
    EXPECT_EQ(out.values(), m.values());
}

TEST(Matmul, HandArithmetic) {
    Tensor a = Tensor::from_rows({{1, 2}});
    Tensor b = Tensor::from_rows({{3}, {4}});
    Tensor out = matmul(a, b);
    ASSERT_EQ(out.numel(), 1u);
    EXPECT_DOUBLE_EQ(out.at(0, 0), 11.0);
}

TEST(Matmul, MatchesTripleLoopOracle) {
    Rng rng(42);
    Tensor a = Tensor::randn({5, 4}, rng);
    Tensor b = Tensor::randn({4, 3}, rng);
    Tensor got = matmul(a, b);
    Tensor want = naive_matmul(a, b);
    for (std::size_t i = 0; i < got.numel(); ++i)
        EXPECT_NEAR(got.values()[i], want.values()[i], 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    Tensor a = Tensor::zeros({5, 4});
    Tensor b = Tensor::zeros({3, 3});
    try {
        matmul(a, b);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("5x4"), std::string::npos) << msg;
        EXPECT_NE(msg.find("3x3"), std::string::npos) << msg;
    }
}

TEST(Matmul, BackwardMatchesDefinition) {
    // loss = sum(x * w) with fixed x: dL/dw = x^T * ones
    Tensor x = Tensor::from_rows({{1, 2}, {3, 4}, {5, 6}});
    Tensor w = Tensor::from_rows({{0.5}, {-1.0}}).set_requires_grad();
    Tape tape;
    Tensor loss = sum(matmul(x, w));
    tape.backward(loss);
    // x^T * ones = column sums of x
    EXPECT_DOUBLE_EQ(w.grad()[0], 9.0);
    EXPECT_DOUBLE_EQ(w.grad()[1], 12.0);
}

TEST(SoftmaxRows, SingletonRow) {
    Tensor out = softmax_rows(Tensor::of({1}, {5.0}));
    EXPECT_DOUBLE_EQ(out.at(0), 1.0);
}

TEST(SoftmaxRows, UniformOnSymmetricInput) {
    Tensor out = softmax_rows(Tensor::of({3}, {0.0, 0.0, 0.0}));
    for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(out.at(j), 1.0 / 3.0);
}

TEST(SoftmaxRows, LargeLogitsDoNotOverflow) {
    Tensor out = softmax_rows(Tensor::of({2}, {1000.0, 0.0}));
    EXPECT_DOUBLE_EQ(out.at(0), 1.0);
    EXPECT_DOUBLE_EQ(out.at(1), 0.0);
}

TEST(SoftmaxRows, RowsSumToOneProperty) {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = Tensor::randn({6, 9}, rng, 10.0);
        Tensor y = softmax_rows(x);
        for (std::size_t i = 0; i < y.rows(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < y.cols(); ++j) s += y.at(i, j);
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(LayerNorm, ConstantRowGoesToZero) {
    Tensor x = Tensor::from_rows({{3.5, 3.5, 3.5, 3.5}});
    Tensor out = layer_norm(x, Tensor::full({4}, 1.0), Tensor::zeros({4}), 1e-5);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(out.at(0, j), 0.0);
}

TEST(LayerNorm, AlreadyNormalizedRowIsFixedPoint) {
    Tensor x = Tensor::from_rows({{1.0, -1.0}});
    Tensor out = layer_norm(x, Tensor::full({2}, 1.0), Tensor::zeros({2}), 1e-14);
    EXPECT_NEAR(out.at(0, 0), 1.0, 1e-7);
    EXPECT_NEAR(out.at(0, 1), -1.0, 1e-7);
}

TEST(LayerNorm, RowStatisticsAfterNorm) {
    Rng rng(11);
    Tensor x = Tensor::randn({4, 8}, rng, 3.0);
    Tensor out = layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}), 1e-12);
    for (std::size_t i = 0; i < 4; ++i) {
        double mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < 8; ++j) mean += out.at(i, j);
        mean /= 8.0;
        for (std::size_t j = 0; j < 8; ++j) var += (out.at(i, j) - mean) * (out.at(i, j) - mean);
        var /= 8.0;
        EXPECT_NEAR(mean, 0.0, 1e-10);
        EXPECT_NEAR(var, 1.0, 1e-10);
    }
}

TEST(ConcatSplit, ConcatLayout) {
    Tensor a = Tensor::from_rows({{1, 1, 1, 1}, {2, 2, 2, 2}});
    Tensor b = Tensor::from_rows({{3, 3, 3, 3}, {4, 4, 4, 4}, {5, 5, 5, 5}});
    Tensor out = concat_rows({a, b});
    ASSERT_EQ(out.rows(), 5u);
    ASSERT_EQ(out.cols(), 4u);
    EXPECT_DOUBLE_EQ(out.at(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(out.at(2, 0), 3.0);
    EXPECT_DOUBLE_EQ(out.at(4, 3), 5.0);
}

TEST(ConcatSplit, RoundTripIsBitExact) {
    Rng rng(3);
    Tensor a = Tensor::randn({2, 4}, rng);
    Tensor b = Tensor::randn({3, 4}, rng);
    Tensor c = Tensor::randn({1, 4}, rng);
    auto parts = split_rows(concat_rows({a, b, c}), {2, 3, 1});
    EXPECT_EQ(parts[0].values(), a.values());
    EXPECT_EQ(parts[1].values(), b.values());
    EXPECT_EQ(parts[2].values(), c.values());
}

TEST(ConcatSplit, ChannelMismatchRejected) {
    EXPECT_THROW(concat_rows({Tensor::zeros({2, 4}), Tensor::zeros({2, 3})}), DimensionError);
}

TEST(ConcatSplit, ConcatBackwardMatchesFiniteDifferences) {
    Rng rng(5);
    Tensor a = Tensor::randn({2, 3}, rng).set_requires_grad();
    Tensor b = Tensor::randn({4, 3}, rng).set_requires_grad();
    Tensor mixer = Tensor::randn({3, 2}, rng);
    auto f = [&]() {
        Tensor joined = concat_rows({a, b});
        return sum(gelu(matmul(joined, mixer)));
    };
    EXPECT_LT(gradient_check(f, {a, b}), 1e-7);
}

TEST(Backward, SumGradIsOnes) {
    Tensor x = Tensor::zeros({3, 2});
    x.set_requires_grad();
    Tape tape;
    tape.backward(sum(x));
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, NonScalarLossRejected) {
    Tensor x = Tensor::zeros({2, 2}).set_requires_grad();
    Tape tape;
    Tensor y = scale(x, 2.0);
    EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, RepeatedCallsAccumulate) {
    Tensor x = Tensor::full({2}, 1.0).set_requires_grad();
    Tape tape;
    Tensor loss = sum(scale(x, 3.0));
    tape.backward(loss);
    tape.backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
    x.zero_grad();
    tape.backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
}

TEST(Backward, NoRecordingWithoutTape) {
    Tensor x = Tensor::full({2}, 1.0).set_requires_grad();
    {
        Tape tape;
        TapePause pause;
        Tensor y = scale(x, 2.0);
        EXPECT_EQ(tape.size(), 0u);
    }
}

TEST(GradientCheck, ExactForLinear) {
    Tensor w = Tensor::from_rows({{0.3, -0.7}, {1.1, 0.2}}).set_requires_grad();
    Tensor x = Tensor::from_rows({{2.0, -1.0}});
    auto f = [&]() { return sum(matmul(x, w)); };
    GradCheckOptions opt;
    opt.h = 1e-3;  // central differences are exact for linear maps at any step
    EXPECT_LT(gradient_check(f, {w}, opt), 1e-10);
}

TEST(GradientCheck, SoftmaxCrossEntropyThreeClasses) {
    Tensor logits_w = Tensor::from_rows({{0.2, -0.4, 0.9}}).set_requires_grad();
    auto f = [&]() { return cross_entropy(logits_w, 2); };
    EXPECT_LT(gradient_check(f, {logits_w}), 1e-6);
}

TEST(GradientCheck, DetectsNondeterministicFunction) {
    Tensor w = Tensor::scalar(1.0).set_requires_grad();
    int calls = 0;
    auto f = [&]() {
        ++calls;
        return Tensor::scalar(static_cast<double>(calls));
    };
    EXPECT_THROW(gradient_check(f, {w}), ContractError);
}

TEST(GradientCheck, CompositePipelineAllOps) {
    // Touches every op with a non-trivial backward in one pipeline.
    Rng rng(23);
    Tensor x = Tensor::randn({5, 6}, rng).set_requires_grad();
    Tensor w = Tensor::randn({6, 6}, rng, 0.5).set_requires_grad();
    Tensor gain = Tensor::full({6}, 1.0).set_requires_grad();
    Tensor bias = Tensor::zeros({6}).set_requires_grad();
    auto f = [&]() {
        Tensor h = layer_norm(x, gain, bias, 1e-5);
        h = add(matmul(h, w), x);
        Tensor left = slice_cols(h, 0, 3);
        Tensor right = slice_cols(h, 3, 3);
        Tensor attn = softmax_rows(scale(matmul(left, transpose(right)), 0.5));
        Tensor mixed = matmul(attn, right);
        Tensor joined = concat_cols({mixed, left});
        Tensor picked = gather_rows(joined, {0, 2, 2, 4});
        Tensor updated = scatter_rows_update(joined, {1, 3}, slice_rows(picked, 0, 2));
        return sum(gelu(add_rowwise(updated, bias)));
    };
    EXPECT_LT(gradient_check(f, {x, w, gain, bias}), 1e-6);
}

TEST(CrossEntropy, SymmetricLogitsGiveLogTwo) {
    Tensor logits = Tensor::from_rows({{0.0, 0.0}});
    EXPECT_NEAR(cross_entropy(logits, 0).item(), std::log(2.0), 1e-15);
    EXPECT_NEAR(cross_entropy(logits, 1).item(), std::log(2.0), 1e-15);
}

TEST(CrossEntropy, ExtremeLogitsStayFinite) {
    Tensor logits = Tensor::from_rows({{20.0, -20.0}});
    const double loss = cross_entropy(logits, 1).item();
    EXPECT_NEAR(loss, 40.0, 1e-9);
    EXPECT_TRUE(std::isfinite(loss));
}

TEST(CrossEntropy, BadLabelRejected) {
    Tensor logits = Tensor::from_rows({{0.0, 0.0}});
    EXPECT_THROW(cross_entropy(logits, 2), DataError);
}

TEST(Determinism, IdenticalInputsBitIdenticalOutputs) {
    auto run = [] {
        Rng rng(99);
        Tensor x = Tensor::randn({8, 8}, rng);
        Tensor w = Tensor::randn({8, 8}, rng);
        return softmax_rows(matmul(gelu(x), w)).values();
    };
    EXPECT_EQ(run(), run());
}
