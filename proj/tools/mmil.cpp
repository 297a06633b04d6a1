// mmil: generate synthetic MIL data, train and evaluate MMIL-Transformer
// models, benchmark grouped attention, and inspect grouping partitions.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
// divergence.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmil/data.hpp"
#include "mmil/model.hpp"
#include "mmil/train.hpp"

using namespace mmil;
namespace fs = std::filesystem;

namespace {

std::uint64_t default_seed() {
    const char* s = std::getenv("MMIL_SEED");
    if (!s || !*s) return 7;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (end == s || *end != '\0') {
        throw ConfigError("MMIL_SEED must be an unsigned integer, got '" + std::string(s) + "'");
    }
    return v;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot open " + path.string());
    f << j.dump(2) << "\n";
}

struct GenArgs {
    std::string out;
    GenParams params;
    double train_ratio = 0.6, val_ratio = 0.15, test_ratio = 0.25;
};

int run_gen(const GenArgs& a) {
    DatasetManifest m = gen_synthetic_dataset(a.params, a.out);
    split_dataset(m, a.train_ratio, a.val_ratio, a.test_ratio, a.params.seed);
    const fs::path out(a.out);
    m.save((out / "manifest.json").string());
    write_json(out / "run_config.json",
               {{"command", "gen-data"},
                {"generator", a.params.to_json()},
                {"split", {a.train_ratio, a.val_ratio, a.test_ratio}}});
    std::cout << "wrote " << m.entries.size() << " bags to " << a.out << "\n"
              << "manifest: " << (out / "manifest.json").string() << "\n";
    return 0;
}

struct TrainArgs {
    std::string data;
    std::string out;
    std::string grouping = "random";
    std::string block_style = "prenorm_ffn";
    std::string preset;
    std::vector<std::size_t> subbags{4};
    std::vector<double> mask_ratio;
    std::size_t channels = 32, heads = 4, layers = 2, levels = 1, msg = 1, ffn_hidden = 0;
    std::size_t epochs = 50;
    double lr = 1e-4, wd = 1e-5;
    std::uint64_t seed = 7;
    bool reattach_append = false, remask_each_layer = false, no_val_mask = false;
};

int run_train(const TrainArgs& a) {
    DatasetManifest data = DatasetManifest::load(a.data);

    ModelConfig cfg;
    cfg.input_dim = data.dim;
    cfg.channels = a.channels;
    cfg.heads = a.heads;
    cfg.layers = a.layers;
    cfg.levels = a.levels;
    cfg.subbags = a.subbags;
    cfg.msg_per_subbag = a.msg;
    cfg.mask_ratio = a.mask_ratio;
    cfg.grouping = grouping_from_string(a.grouping);
    cfg.ffn_hidden = a.ffn_hidden;
    cfg.block_style = block_style_from_string(a.block_style);
    cfg.reattach_append = a.reattach_append;
    cfg.remask_each_layer = a.remask_each_layer;
    cfg.validate();

    fs::create_directories(a.out);
    const fs::path out(a.out);
    TrainConfig tc;
    tc.epochs = a.epochs;
    tc.adam.lr = a.lr;
    tc.adam.weight_decay = a.wd;
    tc.seed = a.seed;
    tc.val_mask = !a.no_val_mask;
    tc.log_path = (out / "metrics.csv").string();
    tc.checkpoint_path = (out / "best.ckpt").string();

    write_json(out / "run_config.json", {{"command", "train"},
                                         {"data", a.data},
                                         {"model", cfg.to_json()},
                                         {"train",
                                          {{"epochs", tc.epochs},
                                           {"lr", tc.adam.lr},
                                           {"weight_decay", tc.adam.weight_decay},
                                           {"seed", tc.seed},
                                           {"val_mask", tc.val_mask}}}});

    MmilModel model(cfg, a.seed);
    TrainResult r = train(model, data, tc);
    std::printf("trained %zu epochs; best val auc %.6f at epoch %zu\n", a.epochs, r.best_val_auc,
                r.best_epoch);
    std::printf("checkpoint: %s\nlog: %s\n", tc.checkpoint_path.c_str(), tc.log_path.c_str());
    return 0;
}

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::string split = "test";
    std::size_t repeats = 10;
    std::uint64_t seed = 7;
    bool no_mask = false;
};

int run_eval(const EvalArgs& a) {
    if (!fs::exists(a.checkpoint)) throw DataError("missing checkpoint " + a.checkpoint);
    MmilModel model = MmilModel::load(a.checkpoint);
    DatasetManifest data = DatasetManifest::load(a.data);
    EvalReport r = evaluate(model, data, a.split, a.repeats, a.seed, !a.no_mask);
    std::cout << r.to_json().dump(2) << "\n";
    return 0;
}

struct BenchArgs {
    std::vector<std::size_t> p_list{1024, 4096};
    std::vector<std::size_t> g_list{1, 8};
    std::size_t dim = 64;
    std::size_t reps = 3;
};

int run_bench(const BenchArgs& a) {
    auto rows = bench_attention(a.p_list, a.g_list, a.dim, a.reps);
    std::printf("p,g,channels,pairs_grouped,pairs_full,median_ms\n");
    for (const auto& r : rows) {
        std::printf("%zu,%zu,%zu,%llu,%llu,%.6f\n", r.p, r.g, r.c, r.pairs_grouped, r.pairs_full,
                    r.median_ms);
    }
    return 0;
}

struct InspectArgs {
    std::string bag;
    std::string grouping = "random";
    std::size_t subbags = 4;
    double mask_ratio = 0.0;
    std::uint64_t seed = 7;
};

int run_inspect(const InspectArgs& a) {
    InstanceBag bag = load_bag(a.bag);
    Partition part;
    switch (grouping_from_string(a.grouping)) {
        case GroupingKind::random: part = group_random(bag.size(), a.subbags, a.seed); break;
        case GroupingKind::sequential: part = group_sequential(bag.size(), a.subbags); break;
        case GroupingKind::coordinate:
            part = group_coordinate(bag.coords, a.subbags, a.seed);
            break;
        case GroupingKind::embedding:
            part = group_embedding(bag.embeddings, a.subbags, a.seed);
            break;
    }
    if (a.mask_ratio > 0.0) part = apply_mask(part, a.mask_ratio, a.seed);
    nlohmann::json j{{"bag", bag.id},
                     {"instances", bag.size()},
                     {"partition", part.to_json()},
                     {"histogram", part.sizes()}};
    std::cout << j.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MMIL-Transformer toolkit"};
    app.require_subcommand(1);

    GenArgs gen;
    TrainArgs tr;
    EvalArgs ev;
    BenchArgs be;
    InspectArgs in;
    bool seen_seed_gen = false, seen_seed_train = false, seen_seed_eval = false,
         seen_seed_inspect = false;

    CLI::App* cgen = app.add_subcommand("gen-data", "generate a synthetic MIL dataset");
    cgen->add_option("--out", gen.out, "output directory")->required();
    cgen->add_option("--bags", gen.params.n_bags, "number of bags");
    cgen->add_option("--dim", gen.params.dim, "embedding channels");
    cgen->add_option("--n-min", gen.params.n_min, "minimum instances per bag");
    cgen->add_option("--n-max", gen.params.n_max, "maximum instances per bag");
    cgen->add_option("--rate", gen.params.pos_rate, "positive-instance rate in positive bags");
    cgen->add_option("--separation", gen.params.separation, "positive component mean shift");
    cgen->add_option("--train-ratio", gen.train_ratio, "training split fraction");
    cgen->add_option("--val-ratio", gen.val_ratio, "validation split fraction");
    cgen->add_option("--test-ratio", gen.test_ratio, "test split fraction");
    cgen->add_option("--seed", gen.params.seed, "RNG seed (default: MMIL_SEED or 7)")
        ->each([&](const std::string&) { seen_seed_gen = true; });

    CLI::App* ctrain = app.add_subcommand("train", "train a model on a dataset manifest");
    ctrain->add_option("--data", tr.data, "manifest path")->required();
    ctrain->add_option("--out", tr.out, "run output directory")->required();
    ctrain->add_option("--grouping", tr.grouping,
                       "grouping operator: coordinate|embedding|random|sequential");
    ctrain->add_option("--sub-bags", tr.subbags, "sub-bag count per level")->delimiter(',');
    ctrain->add_option("--mask-ratio", tr.mask_ratio, "mask ratio per level")->delimiter(',');
    ctrain->add_option("--levels", tr.levels, "hierarchy levels");
    ctrain->add_option("--layers", tr.layers, "basic layers");
    ctrain->add_option("--msg-per-subbag", tr.msg, "MSG tokens per sub-bag");
    ctrain->add_option("--channels", tr.channels, "model width");
    ctrain->add_option("--heads", tr.heads, "attention heads");
    ctrain->add_option("--ffn-hidden", tr.ffn_hidden, "FFN width (0: 4x channels)");
    ctrain->add_option("--block-style", tr.block_style, "bare|prenorm_ffn");
    ctrain->add_option("--epochs", tr.epochs, "training epochs");
    ctrain->add_option("--lr", tr.lr, "learning rate");
    ctrain->add_option("--wd", tr.wd, "weight decay");
    ctrain->add_flag("--reattach-append", tr.reattach_append,
                     "append merged tokens instead of replacing MSG slots");
    ctrain->add_flag("--remask-each-layer", tr.remask_each_layer, "redraw masks per layer");
    ctrain->add_flag("--no-val-mask", tr.no_val_mask, "disable masking on validation scoring");
    ctrain->add_option("--preset", tr.preset,
                       "hyperparameter preset: camelyon16-style|tcga-style");
    ctrain->add_option("--seed", tr.seed, "RNG seed (default: MMIL_SEED or 7)")
        ->each([&](const std::string&) { seen_seed_train = true; });

    CLI::App* ceval = app.add_subcommand("eval", "evaluate a checkpoint");
    ceval->add_option("--checkpoint", ev.checkpoint, "checkpoint path")->required();
    ceval->add_option("--data", ev.data, "manifest path")->required();
    ceval->add_option("--split", ev.split, "split name (default test)");
    ceval->add_option("--repeats", ev.repeats, "evaluation repeats");
    ceval->add_flag("--no-mask", ev.no_mask, "disable the masking mechanism");
    ceval->add_option("--seed", ev.seed, "RNG seed (default: MMIL_SEED or 7)")
        ->each([&](const std::string&) { seen_seed_eval = true; });

    CLI::App* cbench = app.add_subcommand("bench", "time grouped vs full attention");
    cbench->add_option("--p-list", be.p_list, "sequence lengths")->delimiter(',');
    cbench->add_option("--g-list", be.g_list, "sub-bag counts")->delimiter(',');
    cbench->add_option("--dim", be.dim, "channels");
    cbench->add_option("--reps", be.reps, "repetitions per cell");

    CLI::App* cinspect = app.add_subcommand("inspect-groups", "print a bag's partition");
    cinspect->add_option("--bag", in.bag, "bag file")->required();
    cinspect->add_option("--grouping", in.grouping,
                         "grouping operator: coordinate|embedding|random|sequential");
    cinspect->add_option("--sub-bags", in.subbags, "sub-bag count");
    cinspect->add_option("--mask-ratio", in.mask_ratio, "mask ratio");
    cinspect->add_option("--seed", in.seed, "RNG seed (default: MMIL_SEED or 7)")
        ->each([&](const std::string&) { seen_seed_inspect = true; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (*cgen) {
            if (!seen_seed_gen) gen.params.seed = default_seed();
            return run_gen(gen);
        }
        if (*ctrain) {
            if (!seen_seed_train) tr.seed = default_seed();
            if (!tr.preset.empty()) {
                if (tr.preset != "camelyon16-style" && tr.preset != "tcga-style") {
                    throw ConfigError("unknown preset '" + tr.preset +
                                      "' (valid: camelyon16-style, tcga-style)");
                }
                if (!ctrain->count("--grouping")) tr.grouping = "random";
                if (!ctrain->count("--sub-bags")) {
                    tr.subbags = tr.preset == "camelyon16-style" ? std::vector<std::size_t>{10}
                                                                 : std::vector<std::size_t>{4};
                }
                if (!ctrain->count("--mask-ratio")) {
                    tr.mask_ratio = tr.preset == "camelyon16-style" ? std::vector<double>{0.6}
                                                                    : std::vector<double>{0.0};
                }
            }
            return run_train(tr);
        }
        if (*ceval) {
            if (!seen_seed_eval) ev.seed = default_seed();
            return run_eval(ev);
        }
        if (*cbench) return run_bench(be);
        if (*cinspect) {
            if (!seen_seed_inspect) in.seed = default_seed();
            return run_inspect(in);
        }
    } catch (const TrainingError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const MetricError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
