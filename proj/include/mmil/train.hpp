#pragma once

// Training loop (one bag per optimizer step) and repeated-run evaluation.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "mmil/data.hpp"
#include "mmil/error.hpp"
#include "mmil/metrics.hpp"
#include "mmil/model.hpp"
#include "mmil/optim.hpp"
#include "mmil/rng.hpp"
#include "mmil/tensor.hpp"

namespace mmil {

namespace detail {

inline std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

struct LoadedSplit {
    std::vector<InstanceBag> bags;
    std::vector<BagPlan> plans;
    std::vector<int> labels;
};

// Loads one split into memory and fixes each bag's partition for the run;
// only masks are redrawn afterwards.
inline LoadedSplit load_split(const DatasetManifest& data, const std::string& name,
                              const ModelConfig& cfg, std::uint64_t partition_seed) {
    LoadedSplit out;
    for (const auto& entry : data.split(name)) {
        InstanceBag bag = load_bag(data.resolve(entry));
        if (bag.label != entry.label) {
            throw DataError("manifest label mismatch for " + entry.path);
        }
        out.plans.push_back(plan_bag(bag, cfg, mix_seed(partition_seed, out.bags.size())));
        out.labels.push_back(bag.label);
        out.bags.push_back(std::move(bag));
    }
    return out;
}

struct SplitScore {
    double loss = 0.0;
    std::vector<double> probs;
};

inline SplitScore score_split(const MmilModel& model, const LoadedSplit& split,
                              std::uint64_t mask_seed, bool use_mask) {
    SplitScore s;
    s.probs.resize(split.bags.size());
    for (std::size_t i = 0; i < split.bags.size(); ++i) {
        Tensor logits = mmil_forward(split.bags[i], model, split.plans[i], mix_seed(mask_seed, i),
                                     use_mask);
        s.loss += cross_entropy(logits, static_cast<std::size_t>(split.labels[i])).item();
        s.probs[i] = softmax_values(logits)[1];
    }
    s.loss /= static_cast<double>(split.bags.size());
    return s;
}

struct TrainConfig {
    std::size_t epochs = 50;
    AdamConfig adam;
    std::uint64_t seed = 7;
    bool val_mask = true;         // apply the masking mechanism when scoring validation
    std::string log_path;         // CSV metrics log, optional
    std::string checkpoint_path;  // best-validation-AUC checkpoint, optional
};

struct TrainResult {
    std::string csv;  // header + one train and one val row per epoch
    std::vector<double> train_loss;
    double best_val_auc = 0.0;
    std::size_t best_epoch = 0;  // 1-based
};

inline TrainResult train(MmilModel& model, const DatasetManifest& data, const TrainConfig& tc) {
    const ModelConfig& cfg = model.config();
    if (tc.epochs < 1) throw ConfigError("train: epochs must be >= 1");
    LoadedSplit tr = load_split(data, "train", cfg, mix_seed(tc.seed, 0x706c616eull, 0));
    LoadedSplit va = load_split(data, "val", cfg, mix_seed(tc.seed, 0x706c616eull, 1));
    if (tr.bags.empty()) throw DataError("train: training split is empty");

    Adam opt(std::vector<std::pair<std::string, Tensor>>(model.parameters()), tc.adam);
    TrainResult result;
    result.csv = "epoch,split,loss,accuracy,auc,seed\n";
    double best_auc = -1.0;

    std::vector<std::size_t> order(tr.bags.size());
    std::iota(order.begin(), order.end(), 0);

    auto auc_or_nan = [](const std::vector<double>& probs, const std::vector<int>& labels) {
        bool pos = false, neg = false;
        for (int y : labels) (y == 1 ? pos : neg) = true;
        return pos && neg ? roc_auc(probs, labels) : std::numeric_limits<double>::quiet_NaN();
    };
    auto append_row = [&](std::size_t epoch, const char* split, double loss, double acc,
                          double auc, std::uint64_t seed) {
        result.csv += std::to_string(epoch);
        result.csv += ',';
        result.csv += split;
        result.csv += ',' + detail::fmt_g17(loss) + ',' + detail::fmt_g17(acc) + ',' +
                      detail::fmt_g17(auc) + ',' + std::to_string(seed) + '\n';
    };

    for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(tc.seed, 0x65706f6368ull, epoch));
        shuffle_rng.shuffle(order);
        const std::uint64_t train_mask_seed = mix_seed(tc.seed, 0x6d61736bull, epoch);

        double loss_sum = 0.0;
        std::vector<double> probs(tr.bags.size());
        for (std::size_t idx : order) {
            Tape tape;
            Tensor logits = mmil_forward(tr.bags[idx], model, tr.plans[idx],
                                         mix_seed(train_mask_seed, idx), true);
            Tensor loss = cross_entropy(logits, static_cast<std::size_t>(tr.labels[idx]));
            const double lv = loss.item();
            if (!std::isfinite(lv)) {
                throw TrainingError("train: loss diverged at epoch " + std::to_string(epoch) +
                                    ", bag " + tr.bags[idx].id);
            }
            tape.backward(loss);
            opt.step();
            opt.zero_grad();
            loss_sum += lv;
            probs[idx] = softmax_values(logits)[1];
        }
        const double train_loss = loss_sum / static_cast<double>(tr.bags.size());
        result.train_loss.push_back(train_loss);
        append_row(epoch, "train", train_loss, accuracy(probs, tr.labels),
                   auc_or_nan(probs, tr.labels), train_mask_seed);

        if (!va.bags.empty()) {
            const std::uint64_t val_seed = mix_seed(tc.seed, 0x76616cull, epoch);
            SplitScore vs = score_split(model, va, val_seed, tc.val_mask);
            const double val_auc = auc_or_nan(vs.probs, va.labels);
            append_row(epoch, "val", vs.loss, accuracy(vs.probs, va.labels), val_auc, val_seed);
            if (!std::isnan(val_auc) && val_auc > best_auc) {
                best_auc = val_auc;
                result.best_epoch = epoch;
                if (!tc.checkpoint_path.empty()) model.save(tc.checkpoint_path);
            }
        }
    }
    result.best_val_auc = best_auc;
    if (va.bags.empty() && !tc.checkpoint_path.empty()) model.save(tc.checkpoint_path);

    if (!tc.log_path.empty()) {
        std::ofstream f(tc.log_path, std::ios::trunc);
        if (!f) throw DataError("train: cannot open log " + tc.log_path);
        f << result.csv;
    }
    return result;
}

// Scores a split `repeats` times under distinct masking seeds and reports
// per-run and mean metrics.
inline EvalReport evaluate(const MmilModel& model, const DatasetManifest& data,
                           const std::string& split_name, std::size_t repeats,
                           std::uint64_t seed, bool use_mask = true) {
    if (repeats < 1) throw ConfigError("evaluate: repeats must be >= 1");
    LoadedSplit sp = load_split(data, split_name, model.config(),
                                mix_seed(seed, 0x706c616eull, 2));
    if (sp.bags.empty()) throw DataError("evaluate: split '" + split_name + "' is empty");

    EvalReport report;
    for (std::size_t r = 0; r < repeats; ++r) {
        const std::uint64_t run_seed = mix_seed(seed, 0x6576616cull, r);
        SplitScore s = score_split(model, sp, run_seed, use_mask);
        report.seeds.push_back(run_seed);
        report.run_accuracy.push_back(accuracy(s.probs, sp.labels));
        report.run_auc.push_back(roc_auc(s.probs, sp.labels));
    }
    report.accuracy = std::accumulate(report.run_accuracy.begin(), report.run_accuracy.end(), 0.0) /
                      static_cast<double>(repeats);
    report.auc = std::accumulate(report.run_auc.begin(), report.run_auc.end(), 0.0) /
                 static_cast<double>(repeats);
    return report;
}

}  // namespace mmil
