#pragma once

// Classification metrics: accuracy at a fixed threshold and ROC AUC via the
// rank-sum (Mann-Whitney) statistic with midrank tie handling.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include <json.hpp>

#include "mmil/error.hpp"

namespace mmil {

// Scores are positive-class probabilities; a score exactly at the threshold
// counts as a positive prediction.
inline double accuracy(const std::vector<double>& scores, const std::vector<int>& labels,
                       double threshold = 0.5) {
    if (scores.size() != labels.size() || scores.empty()) {
        throw MetricError("accuracy: need matching non-empty scores and labels");
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const int pred = scores[i] >= threshold ? 1 : 0;
        correct += pred == labels[i] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(scores.size());
}

// P(score+ > score-) + 0.5 P(tie), computed from midranks. Ties get the
// average rank of their run, which charges exactly half credit per tied pair.
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size() || scores.empty()) {
        throw MetricError("roc_auc: need matching non-empty scores and labels");
    }
    std::size_t n_pos = 0;
    for (int y : labels) n_pos += y == 1 ? 1 : 0;
    const std::size_t n_neg = labels.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) {
        throw MetricError("roc_auc: undefined with a single class present");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double pos_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
        for (std::size_t t = i; t < j; ++t) {
            if (labels[order[t]] == 1) pos_rank_sum += midrank;
        }
        i = j;
    }
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

struct EvalReport {
    std::vector<double> run_accuracy;
    std::vector<double> run_auc;
    std::vector<std::uint64_t> seeds;
    double accuracy = 0.0;  // mean over runs
    double auc = 0.0;

    nlohmann::json to_json() const {
        nlohmann::json runs = nlohmann::json::array();
        for (std::size_t r = 0; r < run_accuracy.size(); ++r) {
            runs.push_back(
                {{"seed", seeds[r]}, {"accuracy", run_accuracy[r]}, {"auc", run_auc[r]}});
        }
        return nlohmann::json{{"repeats", run_accuracy.size()},
                              {"runs", runs},
                              {"mean", {{"accuracy", accuracy}, {"auc", auc}}}};
    }
};

}  // namespace mmil
