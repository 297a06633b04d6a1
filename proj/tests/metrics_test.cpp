#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mmil/gradcheck.hpp"
#include "mmil/metrics.hpp"
#include "mmil/optim.hpp"
#include "mmil/rng.hpp"
#include "mmil/tensor.hpp"

using namespace mmil;

namespace {

// O(n^2) pairwise AUC: wins + half ties over all (positive, negative) pairs.
double pairwise_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    double num = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j]) num += 1.0;
            else if (scores[i] == scores[j]) num += 0.5;
        }
    }
    return num / static_cast<double>(pairs);
}

}  // namespace

TEST(CrossEntropyLoss, EqualLogitsGiveLogTwo) {
    Tensor logits = Tensor::of({1, 2}, {0.0, 0.0});
    EXPECT_DOUBLE_EQ(cross_entropy(logits, 0).item(), std::log(2.0));
    EXPECT_DOUBLE_EQ(cross_entropy(logits, 1).item(), std::log(2.0));
}

TEST(CrossEntropyLoss, ExtremeLogitsStayFinite) {
    Tensor logits = Tensor::of({1, 2}, {20.0, -20.0});
    const double loss = cross_entropy(logits, 1).item();
    EXPECT_NEAR(loss, 40.0, 1e-12);
    EXPECT_TRUE(std::isfinite(cross_entropy(Tensor::of({1, 2}, {700.0, -700.0}), 1).item()));
}

TEST(CrossEntropyLoss, BadLabelRejected) {
    Tensor logits = Tensor::of({1, 2}, {0.3, -0.1});
    EXPECT_THROW(cross_entropy(logits, 2), DataError);
}

TEST(CrossEntropyLoss, NonNegativeOnRandomLogits) {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor logits = Tensor::randn({1, 2}, rng, 3.0);
        EXPECT_GE(cross_entropy(logits, trial % 2).item(), 0.0);
    }
}

TEST(CrossEntropyLoss, GradientMatchesFiniteDifferences) {
    Rng rng(5);
    Tensor logits = Tensor::randn({1, 2}, rng).set_requires_grad();
    const double err = gradient_check([&] { return cross_entropy(logits, 1); }, {logits});
    EXPECT_LT(err, 1e-8);
}

TEST(Adam, ZeroGradWithoutDecayIsIdentity) {
    Tensor p = Tensor::of({2, 2}, {1.0, -2.0, 3.0, 0.5}).set_requires_grad();
    const std::vector<double> before = p.values();
    AdamConfig cfg;
    cfg.weight_decay = 0.0;
    Adam opt({{"p", p}}, cfg);
    p.grad();  // materialize zero gradient buffer
    for (int i = 0; i < 5; ++i) opt.step();
    EXPECT_EQ(p.values(), before);
}

TEST(Adam, ZeroLearningRateIsIdentity) {
    Tensor p = Tensor::of({1, 3}, {1.0, -2.0, 3.0}).set_requires_grad();
    const std::vector<double> before = p.values();
    AdamConfig cfg;
    cfg.lr = 0.0;
    Adam opt({{"p", p}}, cfg);
    p.grad() = {0.5, -0.25, 4.0};
    for (int i = 0; i < 3; ++i) opt.step();
    EXPECT_EQ(p.values(), before);
}

TEST(Adam, FirstStepHasClosedForm) {
    AdamConfig cfg;
    cfg.lr = 1e-3;
    cfg.weight_decay = 0.0;
    Tensor p = Tensor::of({1, 3}, {0.0, 1.0, -2.0}).set_requires_grad();
    Adam opt({{"p", p}}, cfg);
    p.grad() = {0.4, -0.02, 1e-12};
    opt.step();
    const std::vector<double> g = {0.4, -0.02, 1e-12};
    for (std::size_t i = 0; i < 3; ++i) {
        const double want = (i == 0 ? 0.0 : (i == 1 ? 1.0 : -2.0)) -
                            cfg.lr * g[i] / (std::abs(g[i]) + cfg.eps);
        EXPECT_NEAR(p.values()[i], want, 1e-15) << i;
    }
}

TEST(Adam, TwoStepsMatchHandComputation) {
    AdamConfig cfg;
    cfg.lr = 0.01;
    cfg.weight_decay = 0.0;
    Tensor p = Tensor::of({1, 1}, {0.5}).set_requires_grad();
    Adam opt({{"p", p}}, cfg);

    double theta = 0.5, m = 0.0, v = 0.0;
    const double g1 = 0.3, g2 = -0.2;
    p.grad() = {g1};
    opt.step();
    m = 0.9 * m + 0.1 * g1;
    v = 0.999 * v + 0.001 * g1 * g1;
    theta -= 0.01 * (m / (1.0 - 0.9)) / (std::sqrt(v / (1.0 - 0.999)) + 1e-8);
    EXPECT_NEAR(p.values()[0], theta, 1e-12);

    p.zero_grad();
    p.grad() = {g2};
    opt.step();
    m = 0.9 * m + 0.1 * g2;
    v = 0.999 * v + 0.001 * g2 * g2;
    theta -= 0.01 * (m / (1.0 - 0.9 * 0.9)) / (std::sqrt(v / (1.0 - 0.999 * 0.999)) + 1e-8);
    EXPECT_NEAR(p.values()[0], theta, 1e-12);
}

TEST(Adam, CoupledDecayShrinksWeightsWithZeroGrad) {
    AdamConfig cfg;
    cfg.lr = 0.01;
    cfg.weight_decay = 0.1;
    Tensor p = Tensor::of({1, 1}, {2.0}).set_requires_grad();
    Adam opt({{"p", p}}, cfg);
    p.grad();
    opt.step();
    EXPECT_LT(p.values()[0], 2.0);
}

TEST(Adam, NanGradientNamesTheParameter) {
    Tensor p = Tensor::of({1, 2}, {1.0, 2.0}).set_requires_grad();
    Adam opt({{"spotted", p}}, {});
    p.grad() = {0.1, std::nan("")};
    try {
        opt.step();
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        EXPECT_NE(std::string(e.what()).find("spotted"), std::string::npos);
    }
}

TEST(RocAuc, PerfectSeparationScoresOne) {
    EXPECT_DOUBLE_EQ(roc_auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}), 1.0);
    EXPECT_DOUBLE_EQ(roc_auc({0.1, 0.2, 0.8, 0.9}, {1, 1, 0, 0}), 0.0);
}

TEST(RocAuc, AllTiesScoreHalf) {
    EXPECT_DOUBLE_EQ(roc_auc({0.5, 0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0, 1}), 0.5);
}

TEST(RocAuc, SingleClassRejected) {
    EXPECT_THROW(roc_auc({0.1, 0.9}, {1, 1}), MetricError);
    EXPECT_THROW(roc_auc({0.1, 0.9}, {0, 0}), MetricError);
}

TEST(RocAuc, MatchesPairwiseOracleExactly) {
    Rng rng(6);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t n = 2 + rng.below(99);
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        bool pos = false, neg = false;
        for (std::size_t i = 0; i < n; ++i) {
            // Coarse quantization forces plenty of ties.
            scores[i] = static_cast<double>(rng.below(8)) / 8.0;
            labels[i] = static_cast<int>(rng.below(2));
            (labels[i] == 1 ? pos : neg) = true;
        }
        if (!pos || !neg) {
            labels[0] = 1;
            labels[n - 1] = 0;
        }
        EXPECT_EQ(roc_auc(scores, labels), pairwise_auc(scores, labels)) << "trial " << trial;
    }
}

TEST(Accuracy, DirectCountAndTieRule) {
    EXPECT_DOUBLE_EQ(accuracy({1.0, 0.0, 1.0}, {1, 0, 1}), 1.0);
    EXPECT_DOUBLE_EQ(accuracy({0.5}, {1}), 1.0);  // threshold tie counts positive
    EXPECT_DOUBLE_EQ(accuracy({0.5}, {0}), 0.0);
    EXPECT_DOUBLE_EQ(accuracy({0.7, 0.4, 0.6, 0.2}, {1, 1, 0, 0}), 0.5);
}

TEST(EvalReport, JsonCarriesRunsAndMeans) {
    EvalReport r;
    r.run_accuracy = {0.5, 0.7};
    r.run_auc = {0.6, 0.8};
    r.seeds = {11, 12};
    r.accuracy = 0.6;
    r.auc = 0.7;
    auto j = r.to_json();
    EXPECT_EQ(j.at("repeats").get<std::size_t>(), 2u);
    EXPECT_DOUBLE_EQ(j.at("mean").at("auc").get<double>(), 0.7);
    EXPECT_EQ(j.at("runs").size(), 2u);
}
