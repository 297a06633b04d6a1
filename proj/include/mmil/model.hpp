#pragma once

// The MMIL-Transformer model: MSG token attachment, within-sub-bag attention,
// merge transformer, k-level bag construction, layer-wise reattachment, and
// the attention cost model.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mmil/data.hpp"
#include "mmil/error.hpp"
#include "mmil/grouping.hpp"
#include "mmil/rng.hpp"
#include "mmil/tensor.hpp"

namespace mmil {

enum class BlockStyle { bare, prenorm_ffn };
enum class GroupingKind { random, sequential, coordinate, embedding };

inline const char* to_string(BlockStyle s) {
    return s == BlockStyle::bare ? "bare" : "prenorm_ffn";
}

inline const char* to_string(GroupingKind g) {
    switch (g) {
        case GroupingKind::random: return "random";
        case GroupingKind::sequential: return "sequential";
        case GroupingKind::coordinate: return "coordinate";
        default: return "embedding";
    }
}

inline BlockStyle block_style_from_string(const std::string& s) {
    if (s == "bare") return BlockStyle::bare;
    if (s == "prenorm_ffn") return BlockStyle::prenorm_ffn;
    throw ConfigError("unknown block style '" + s + "' (valid: bare, prenorm_ffn)");
}

inline GroupingKind grouping_from_string(const std::string& s) {
    if (s == "random") return GroupingKind::random;
    if (s == "sequential") return GroupingKind::sequential;
    if (s == "coordinate") return GroupingKind::coordinate;
    if (s == "embedding") return GroupingKind::embedding;
    throw ConfigError("unknown grouping '" + s +
                      "' (valid: coordinate, embedding, random, sequential)");
}

struct ModelConfig {
    std::size_t input_dim = 0;  // 0: instances already have `channels` features
    std::size_t channels = 32;
    std::size_t heads = 4;
    std::size_t layers = 2;
    std::size_t levels = 1;
    std::vector<std::size_t> subbags = {4};  // g_l per level
    std::size_t msg_per_subbag = 1;
    std::vector<double> mask_ratio;  // per level; empty means no masking
    GroupingKind grouping = GroupingKind::random;
    std::size_t ffn_hidden = 0;  // 0: 4 * channels
    BlockStyle block_style = BlockStyle::prenorm_ffn;
    bool reattach_append = false;
    bool remask_each_layer = false;

    double level_mask(std::size_t level) const {
        return mask_ratio.empty() ? 0.0 : mask_ratio.at(level);
    }
    std::size_t ffn_width() const { return ffn_hidden ? ffn_hidden : 4 * channels; }
    bool has_embed() const { return input_dim != 0 && input_dim != channels; }

    void validate() const {
        if (channels == 0 || heads == 0) throw ConfigError("config: channels and heads must be positive");
        if (channels % heads != 0) throw ConfigError("config: channels not divisible by heads");
        if (layers < 1) throw ConfigError("config: layers must be >= 1");
        if (levels < 1) throw ConfigError("config: levels must be >= 1");
        if (subbags.size() != levels) throw ConfigError("config: need one sub-bag count per level");
        for (std::size_t g : subbags) {
            if (g < 1) throw ConfigError("config: sub-bag counts must be >= 1");
        }
        if (msg_per_subbag < 1) throw ConfigError("config: msg_per_subbag must be >= 1");
        if (!mask_ratio.empty() && mask_ratio.size() != levels) {
            throw ConfigError("config: need one mask ratio per level");
        }
        for (double r : mask_ratio) {
            if (r < 0.0 || r >= 1.0) throw ConfigError("config: mask ratios must lie in [0, 1)");
        }
        if (reattach_append && levels != 1) {
            throw ConfigError("config: append-style reattachment only supports one level");
        }
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"input_dim", input_dim},
                              {"channels", channels},
                              {"heads", heads},
                              {"layers", layers},
                              {"levels", levels},
                              {"subbags", subbags},
                              {"msg_per_subbag", msg_per_subbag},
                              {"mask_ratio", mask_ratio},
                              {"grouping", to_string(grouping)},
                              {"ffn_hidden", ffn_hidden},
                              {"block_style", to_string(block_style)},
                              {"reattach_append", reattach_append},
                              {"remask_each_layer", remask_each_layer}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.input_dim = j.at("input_dim").get<std::size_t>();
        c.channels = j.at("channels").get<std::size_t>();
        c.heads = j.at("heads").get<std::size_t>();
        c.layers = j.at("layers").get<std::size_t>();
        c.levels = j.at("levels").get<std::size_t>();
        c.subbags = j.at("subbags").get<std::vector<std::size_t>>();
        c.msg_per_subbag = j.at("msg_per_subbag").get<std::size_t>();
        c.mask_ratio = j.at("mask_ratio").get<std::vector<double>>();
        c.grouping = grouping_from_string(j.at("grouping").get<std::string>());
        c.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
        c.block_style = block_style_from_string(j.at("block_style").get<std::string>());
        c.reattach_append = j.at("reattach_append").get<bool>();
        c.remask_each_layer = j.at("remask_each_layer").get<bool>();
        c.validate();
        return c;
    }
};

struct AttentionWeights {
    Tensor wq, wk, wv, wo;  // each C x C, bias-free
};

struct NormWeights {
    Tensor gain, bias;  // 1 x C
};

struct FfnWeights {
    Tensor w1, b1, w2, b2;
};

struct BlockWeights {
    BlockStyle style = BlockStyle::prenorm_ffn;
    AttentionWeights attn;
    NormWeights norm1, norm2;  // prenorm_ffn only
    FfnWeights ffn;            // prenorm_ffn only
};

struct LevelWeights {
    BlockWeights subbag;  // within-sub-bag MSA
    BlockWeights merge;   // merge transformer feeding the next level
};

// MSG rows first, instance rows after; part_msg undoes exactly this layout.
inline Tensor attach_msg(const Tensor& subbag_tokens, const Tensor& msg) {
    if (subbag_tokens.cols() != msg.cols()) {
        throw DimensionError("attach_msg: channel width mismatch (" +
                             std::to_string(subbag_tokens.cols()) + " vs " +
                             std::to_string(msg.cols()) + ")");
    }
    return concat_rows({msg, subbag_tokens});
}

inline std::pair<Tensor, Tensor> part_msg(const Tensor& bag, std::size_t m) {
    if (bag.rows() <= m) throw DimensionError("part_msg: bag smaller than its MSG block");
    return {slice_rows(bag, 0, m), slice_rows(bag, m, bag.rows() - m)};
}

inline Tensor multi_head_attention(const Tensor& x, const AttentionWeights& w,
                                   std::size_t heads) {
    const std::size_t c = x.cols();
    if (heads == 0 || c % heads != 0) {
        throw ConfigError("attention: channels not divisible by heads");
    }
    const std::size_t dh = c / heads;
    const double scale_q = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor q = matmul(x, w.wq);
    Tensor k = matmul(x, w.wk);
    Tensor v = matmul(x, w.wv);
    std::vector<Tensor> heads_out;
    heads_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        Tensor att = softmax_rows(scale(matmul(qh, transpose(kh)), scale_q));
        heads_out.push_back(matmul(att, vh));
    }
    Tensor merged = heads == 1 ? heads_out[0] : concat_cols(heads_out);
    return matmul(merged, w.wo);
}

inline Tensor feed_forward(const Tensor& x, const FfnWeights& w) {
    Tensor h = gelu(add_rowwise(matmul(x, w.w1), w.b1));
    return add_rowwise(matmul(h, w.w2), w.b2);
}

// bare: x + MSA(x). prenorm_ffn: pre-norm MSA and pre-norm FFN, residual both.
inline Tensor attention_block(const Tensor& x, const BlockWeights& w, std::size_t heads) {
    if (w.style == BlockStyle::bare) {
        return add(x, multi_head_attention(x, w.attn, heads));
    }
    Tensor x1 = add(x, multi_head_attention(layer_norm(x, w.norm1.gain, w.norm1.bias), w.attn,
                                            heads));
    return add(x1, feed_forward(layer_norm(x1, w.norm2.gain, w.norm2.bias), w.ffn));
}

// Independent attention per sub-bag; nothing crosses sub-bag boundaries.
inline std::vector<Tensor> msa_within_subbags(const std::vector<Tensor>& bags,
                                              const BlockWeights& w, std::size_t heads) {
    std::vector<Tensor> out;
    out.reserve(bags.size());
    for (const Tensor& b : bags) {
        if (b.rows() == 0) throw ContractError("msa_within_subbags: empty sub-bag");
        out.push_back(attention_block(b, w, heads));
    }
    return out;
}

// One transformer block over all MSG tokens jointly; the outputs become the
// next level's instances.
inline Tensor merge_msg(const Tensor& all_msg, const BlockWeights& w, std::size_t heads) {
    if (all_msg.rows() == 0) throw ContractError("merge_msg: no MSG tokens");
    return attention_block(all_msg, w, heads);
}

class MmilModel {
public:
    MmilModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(mix_seed(seed, 0x6d6f64656cull));
        if (cfg_.has_embed()) {
            embed_w = make_param("embed.w", {cfg_.input_dim, cfg_.channels}, rng);
            embed_b = make_bias("embed.b", {1, cfg_.channels});
        }
        msg_embedding = make_param("msg_embedding", {1, cfg_.channels}, rng, 1.0);
        cls_embedding = make_param("cls_embedding", {1, cfg_.channels}, rng, 1.0);
        blocks.resize(cfg_.layers);
        for (std::size_t i = 0; i < cfg_.layers; ++i) {
            blocks[i].reserve(cfg_.levels);
            for (std::size_t l = 0; l < cfg_.levels; ++l) {
                const std::string base =
                    "layer" + std::to_string(i) + ".level" + std::to_string(l) + ".";
                LevelWeights lw;
                lw.subbag = make_block(base + "subbag.", rng);
                lw.merge = make_block(base + "merge.", rng);
                blocks[i].push_back(std::move(lw));
            }
        }
        head_w1 = make_param("head.w1", {cfg_.channels, cfg_.channels}, rng);
        head_b1 = make_bias("head.b1", {1, cfg_.channels});
        head_w2 = make_param("head.w2", {cfg_.channels, 2}, rng);
        head_b2 = make_bias("head.b2", {1, 2});
    }

    const ModelConfig& config() const { return cfg_; }

    const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }

    Tensor parameter(const std::string& name) const {
        for (const auto& [n, t] : params_) {
            if (n == name) return t;
        }
        throw ConfigError("no parameter named " + name);
    }

    std::size_t parameter_scalars() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    Tensor head_forward(const Tensor& cls) const {
        Tensor h = gelu(add_rowwise(matmul(cls, head_w1), head_b1));
        return add_rowwise(matmul(h, head_w2), head_b2);
    }

    void save(const std::string& path) const;
    static MmilModel load(const std::string& path);

    Tensor embed_w, embed_b;  // only when has_embed()
    Tensor msg_embedding, cls_embedding;
    std::vector<std::vector<LevelWeights>> blocks;  // [layer][level]
    Tensor head_w1, head_b1, head_w2, head_b2;

private:
    Tensor make_param(const std::string& name, const std::vector<std::size_t>& shape, Rng& rng,
                      double stddev = 0.0) {
        if (stddev == 0.0) {
            stddev = std::sqrt(2.0 / static_cast<double>(shape[0] + shape[1]));
        }
        Tensor t = Tensor::randn(shape, rng, stddev);
        t.set_requires_grad();
        params_.emplace_back(name, t);
        return t;
    }

    Tensor make_bias(const std::string& name, const std::vector<std::size_t>& shape,
                     double fill = 0.0) {
        Tensor t = Tensor::full(shape, fill);
        t.set_requires_grad();
        params_.emplace_back(name, t);
        return t;
    }

    BlockWeights make_block(const std::string& base, Rng& rng) {
        BlockWeights b;
        b.style = cfg_.block_style;
        const std::size_t c = cfg_.channels;
        b.attn.wq = make_param(base + "attn.wq", {c, c}, rng);
        b.attn.wk = make_param(base + "attn.wk", {c, c}, rng);
        b.attn.wv = make_param(base + "attn.wv", {c, c}, rng);
        b.attn.wo = make_param(base + "attn.wo", {c, c}, rng);
        if (cfg_.block_style == BlockStyle::prenorm_ffn) {
            b.norm1.gain = make_bias(base + "norm1.gain", {1, c}, 1.0);
            b.norm1.bias = make_bias(base + "norm1.bias", {1, c});
            b.norm2.gain = make_bias(base + "norm2.gain", {1, c}, 1.0);
            b.norm2.bias = make_bias(base + "norm2.bias", {1, c});
            const std::size_t f = cfg_.ffn_width();
            b.ffn.w1 = make_param(base + "ffn.w1", {c, f}, rng);
            b.ffn.b1 = make_bias(base + "ffn.b1", {1, f});
            b.ffn.w2 = make_param(base + "ffn.w2", {f, c}, rng);
            b.ffn.b2 = make_bias(base + "ffn.b2", {1, c});
        }
        return b;
    }

    ModelConfig cfg_;
    std::vector<std::pair<std::string, Tensor>> params_;
};

// Per-bag grouping structure, computed once and reused across layers and
// epochs. Masks are not part of the plan; they are applied per forward pass.
struct BagPlan {
    std::vector<Partition> partitions;  // one per level, unmasked
};

inline BagPlan plan_bag(const InstanceBag& bag, const ModelConfig& cfg,
                        std::uint64_t partition_seed) {
    cfg.validate();
    BagPlan plan;
    std::size_t tokens = bag.size();
    for (std::size_t l = 0; l < cfg.levels; ++l) {
        const std::size_t g = cfg.subbags[l];
        if (tokens < g) {
            if (l == 0) {
                throw DataError("bag " + bag.id + ": " + std::to_string(tokens) +
                                " instances cannot fill " + std::to_string(g) + " sub-bags");
            }
            throw ConfigError("level " + std::to_string(l) + ": token count " +
                              std::to_string(tokens) + " < sub-bag count " + std::to_string(g));
        }
        if (l == 0) {
            switch (cfg.grouping) {
                case GroupingKind::random:
                    plan.partitions.push_back(group_random(tokens, g, mix_seed(partition_seed, l)));
                    break;
                case GroupingKind::sequential:
                    plan.partitions.push_back(group_sequential(tokens, g));
                    break;
                case GroupingKind::coordinate:
                    plan.partitions.push_back(group_coordinate(bag.coords, g, partition_seed));
                    break;
                case GroupingKind::embedding:
                    plan.partitions.push_back(group_embedding(bag.embeddings, g, partition_seed));
                    break;
            }
        } else if (cfg.grouping == GroupingKind::random) {
            plan.partitions.push_back(group_random(tokens, g, mix_seed(partition_seed, l)));
        } else {
            // Upper levels have no coordinates and freshly merged embeddings,
            // so the geometric operators fall back to chunking.
            plan.partitions.push_back(group_sequential(tokens, g));
        }
        const std::size_t unmasked = g - mask_count(cfg.level_mask(l), g);
        tokens = cfg.msg_per_subbag * unmasked;
    }
    return plan;
}

inline std::vector<Partition> masked_partitions(const BagPlan& plan, const ModelConfig& cfg,
                                                std::uint64_t mask_seed, std::size_t layer,
                                                bool apply_masking = true) {
    std::vector<Partition> out;
    out.reserve(plan.partitions.size());
    for (std::size_t l = 0; l < plan.partitions.size(); ++l) {
        const std::uint64_t s = cfg.remask_each_layer ? mix_seed(mask_seed, l, layer + 1)
                                                      : mix_seed(mask_seed, l);
        out.push_back(apply_mask(plan.partitions[l], apply_masking ? cfg.level_mask(l) : 0.0, s));
    }
    return out;
}

// One build pass (a single basic layer): per level, gather unmasked sub-bags,
// attach MSG tokens, run within-sub-bag MSA, merge all MSG tokens into the
// next level. The CLS token joins only the top-level merge.
struct LevelBags {
    std::vector<Tensor> tokens;                     // levels 0..k, post-attention state
    std::vector<Partition> partitions;              // levels 0..k-1, masks applied
    std::vector<std::vector<std::size_t>> sources;  // sources[l][t]: level-l sub-bag of token t at level l+1
    Tensor cls;
};

inline LevelBags build_k_level_bags(const Tensor& x0, const std::vector<Tensor>& msg_state,
                                    const Tensor& cls, const std::vector<Partition>& partitions,
                                    const MmilModel& model, std::size_t layer) {
    const ModelConfig& cfg = model.config();
    const std::size_t k = cfg.levels, m = cfg.msg_per_subbag;
    if (partitions.size() != k) throw ContractError("build_k_level_bags: wrong partition count");
    if (layer >= cfg.layers) throw ContractError("build_k_level_bags: layer out of range");

    LevelBags out;
    out.partitions = partitions;
    out.tokens.resize(k + 1);
    out.sources.resize(k);
    out.tokens[0] = x0;
    out.cls = cls;

    for (std::size_t l = 0; l < k; ++l) {
        const Partition& part = partitions[l];
        if (part.instance_count() != out.tokens[l].rows()) {
            throw ContractError("build_k_level_bags: partition does not match level " +
                                std::to_string(l));
        }
        const LevelWeights& w = model.blocks[layer][l];
        const auto members = part.members();
        const auto live = part.unmasked_subbags();

        std::vector<Tensor> subbags;
        subbags.reserve(live.size());
        std::vector<std::size_t> instance_rows;
        std::vector<std::size_t> msg_rows;
        for (std::size_t j : live) {
            Tensor instances = gather_rows(out.tokens[l], members[j]);
            std::vector<std::size_t> slot(m);
            for (std::size_t i = 0; i < m; ++i) slot[i] = j * m + i;
            Tensor msg = gather_rows(msg_state[l], slot);
            subbags.push_back(attach_msg(instances, msg));
            instance_rows.insert(instance_rows.end(), members[j].begin(), members[j].end());
            msg_rows.insert(msg_rows.end(), slot.begin(), slot.end());
            out.sources[l].insert(out.sources[l].end(), m, j);
        }
        std::vector<Tensor> attended = msa_within_subbags(subbags, w.subbag, cfg.heads);

        std::vector<Tensor> updated_instances, updated_msg;
        updated_instances.reserve(attended.size());
        updated_msg.reserve(attended.size());
        for (Tensor& t : attended) {
            auto [msg, instances] = part_msg(t, m);
            updated_msg.push_back(msg);
            updated_instances.push_back(instances);
        }
        out.tokens[l] = scatter_rows_update(out.tokens[l], instance_rows,
                                            concat_rows(updated_instances));

        Tensor all_msg = updated_msg.size() == 1 ? updated_msg[0] : concat_rows(updated_msg);
        if (l + 1 == k) {
            Tensor with_cls = concat_rows({out.cls, all_msg});
            Tensor merged = merge_msg(with_cls, w.merge, cfg.heads);
            out.cls = slice_rows(merged, 0, 1);
            out.tokens[k] = slice_rows(merged, 1, all_msg.rows());
        } else {
            out.tokens[l + 1] = merge_msg(all_msg, w.merge, cfg.heads);
        }
    }
    return out;
}

// Sends every level-(l+1) token back into its source sub-bag's MSG slot; the
// level-0 instance tensor and the CLS token carry over as updated.
struct LayerState {
    Tensor x0;
    std::vector<Tensor> msg;  // per level, (g_l * m) x C slot values
    Tensor cls;
};

inline LayerState reattach(const LevelBags& levels, const std::vector<Tensor>& msg_state,
                           std::size_t m) {
    LayerState next;
    next.x0 = levels.tokens[0];
    next.cls = levels.cls;
    next.msg.resize(msg_state.size());
    for (std::size_t l = 0; l < msg_state.size(); ++l) {
        std::vector<std::size_t> rows;
        rows.reserve(levels.sources[l].size());
        std::size_t within = 0;
        std::size_t prev = static_cast<std::size_t>(-1);
        for (std::size_t j : levels.sources[l]) {
            within = (j == prev) ? within + 1 : 0;
            prev = j;
            rows.push_back(j * m + within);
        }
        next.msg[l] = rows.empty() ? msg_state[l]
                                   : scatter_rows_update(msg_state[l], rows, levels.tokens[l + 1]);
    }
    return next;
}

namespace detail {

inline Tensor broadcast_row(const Tensor& row, std::size_t count) {
    if (count == 1) return row;
    return concat_rows(std::vector<Tensor>(count, row));
}

}  // namespace detail

struct ForwardSeeds {
    std::uint64_t partition = 1;
    std::uint64_t mask = 1;
};

inline Tensor mmil_forward(const InstanceBag& bag, const MmilModel& model, const BagPlan& plan,
                           std::uint64_t mask_seed, bool apply_masking = true) {
    const ModelConfig& cfg = model.config();
    const std::size_t m = cfg.msg_per_subbag;
    const std::size_t want = cfg.has_embed() ? cfg.input_dim : cfg.channels;
    if (bag.dim() != want) {
        throw DataError("bag " + bag.id + ": expected " + std::to_string(want) +
                        " features, got " + std::to_string(bag.dim()));
    }

    LayerState state;
    state.x0 = cfg.has_embed()
                   ? add_rowwise(matmul(bag.embeddings, model.embed_w), model.embed_b)
                   : bag.embeddings;
    state.cls = model.cls_embedding;
    state.msg.reserve(cfg.levels);
    for (std::size_t l = 0; l < cfg.levels; ++l) {
        state.msg.push_back(detail::broadcast_row(model.msg_embedding, cfg.subbags[l] * m));
    }

    if (!cfg.reattach_append) {
        for (std::size_t layer = 0; layer < cfg.layers; ++layer) {
            const auto parts = masked_partitions(plan, cfg, mask_seed, layer, apply_masking);
            LevelBags levels = build_k_level_bags(state.x0, state.msg, state.cls, parts, model,
                                                  layer);
            state = reattach(levels, state.msg, m);
        }
        return model.head_forward(state.cls);
    }

    // Append mode: merged MSG tokens are concatenated into their source
    // sub-bags as extra instances, and every layer starts from fresh MSG
    // embeddings. Token counts grow by m per surviving sub-bag per layer.
    Partition grown = plan.partitions[0];
    for (std::size_t layer = 0; layer < cfg.layers; ++layer) {
        const std::uint64_t s = cfg.remask_each_layer ? mix_seed(mask_seed, 0, layer + 1)
                                                      : mix_seed(mask_seed, std::size_t{0});
        Partition part = apply_mask(grown, apply_masking ? cfg.level_mask(0) : 0.0, s);
        LevelBags levels = build_k_level_bags(state.x0, state.msg, state.cls, {part}, model,
                                              layer);
        state.cls = levels.cls;
        state.x0 = concat_rows({levels.tokens[0], levels.tokens[1]});
        for (std::size_t j : levels.sources[0]) grown.assignment.push_back(j);
        state.msg[0] = detail::broadcast_row(model.msg_embedding, cfg.subbags[0] * m);
    }
    return model.head_forward(state.cls);
}

inline Tensor mmil_forward(const InstanceBag& bag, const MmilModel& model,
                           const ForwardSeeds& seeds = {}) {
    BagPlan plan = plan_bag(bag, model.config(), seeds.partition);
    return mmil_forward(bag, model, plan, seeds.mask);
}

// Exact token-pair counts behind the O(1/g * p^2 * C) argument. Sub-bag sizes
// follow the sequential (even) split; the CLS token is left out of the model.
struct PairCount {
    unsigned long long within = 0;  // sum over sub-bags of (w_j + m)^2, all levels
    unsigned long long merge = 0;   // merge transformer pairs, all levels
    unsigned long long full = 0;    // p^2 per layer, no grouping
    unsigned long long grouped() const { return within + merge; }
    double ratio() const { return static_cast<double>(grouped()) / static_cast<double>(full); }
};

inline PairCount attention_pair_count(std::size_t p, std::size_t g, std::size_t m, std::size_t k,
                                      std::size_t layers) {
    if (p < g || g < 1) throw ConfigError("attention_pair_count: need p >= g >= 1");
    PairCount pc;
    unsigned long long within = 0, merge = 0;
    std::size_t tokens = p;
    for (std::size_t l = 0; l < k; ++l) {
        if (tokens < g) break;
        const std::size_t base = tokens / g, rem = tokens % g;
        for (std::size_t j = 0; j < g; ++j) {
            const unsigned long long rows = base + (j < rem ? 1 : 0) + m;
            within += rows * rows;
        }
        const unsigned long long merged = static_cast<unsigned long long>(m) * g;
        merge += merged * merged;
        tokens = m * g;
        if (tokens == 0) break;
    }
    pc.within = layers * within;
    pc.merge = layers * merge;
    pc.full = layers * static_cast<unsigned long long>(p) * p;
    return pc;
}

struct BenchRow {
    std::size_t p = 0, g = 0, c = 0;
    unsigned long long pairs_grouped = 0, pairs_full = 0;
    double median_ms = 0.0;
};

// Times the within-sub-bag attention alone (m=0 analog of the cost model) on
// random tokens with a sequential partition.
inline std::vector<BenchRow> bench_attention(const std::vector<std::size_t>& p_list,
                                             const std::vector<std::size_t>& g_list,
                                             std::size_t channels, std::size_t repetitions) {
    if (repetitions < 1) throw ConfigError("bench: need at least one repetition");
    for (std::size_t p : p_list) {
        if (p > 16384) throw ConfigError("bench: p capped at 16384");
    }
    Rng rng(0x62656e6368ull);
    AttentionWeights w;
    const double stddev = std::sqrt(2.0 / static_cast<double>(2 * channels));
    w.wq = Tensor::randn({channels, channels}, rng, stddev);
    w.wk = Tensor::randn({channels, channels}, rng, stddev);
    w.wv = Tensor::randn({channels, channels}, rng, stddev);
    w.wo = Tensor::randn({channels, channels}, rng, stddev);
    BlockWeights block;
    block.style = BlockStyle::bare;
    block.attn = w;

    std::vector<BenchRow> rows;
    for (std::size_t p : p_list) {
        Tensor tokens = Tensor::randn({p, channels}, rng);
        for (std::size_t g : g_list) {
            if (g < 1 || g > p) throw ConfigError("bench: need 1 <= g <= p");
            Partition part = group_sequential(p, g);
            const auto members = part.members();
            std::vector<double> times;
            times.reserve(repetitions);
            for (std::size_t rep = 0; rep < repetitions; ++rep) {
                const auto start = std::chrono::steady_clock::now();
                std::vector<Tensor> subbags;
                subbags.reserve(g);
                for (std::size_t j = 0; j < g; ++j)
                    subbags.push_back(gather_rows(tokens, members[j]));
                std::vector<Tensor> att = msa_within_subbags(subbags, block, 1);
                const auto stop = std::chrono::steady_clock::now();
                double sink = 0.0;
                for (const Tensor& t : att) sink += t.at(0, 0);
                if (!std::isfinite(sink)) throw ContractError("bench: non-finite output");
                times.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
            }
            std::sort(times.begin(), times.end());
            const double median = times.size() % 2 == 1
                                      ? times[times.size() / 2]
                                      : 0.5 * (times[times.size() / 2 - 1] +
                                               times[times.size() / 2]);
            const PairCount pc = attention_pair_count(p, g, 0, 1, 1);
            rows.push_back({p, g, channels, pc.grouped(), pc.full, median});
        }
    }
    return rows;
}

// Checkpoint container: 8-byte little-endian header length, JSON header
// (version, config, parameter manifest), then raw little-endian f64 data.
inline void MmilModel::save(const std::string& path) const {
    nlohmann::json manifest = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& [name, t] : params_) {
        manifest.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.numel() * 8;
    }
    const nlohmann::json header{
        {"version", "mmil-ckpt-1"}, {"config", cfg_.to_json()}, {"params", manifest}};
    const std::string head = header.dump();

    std::string out;
    out.reserve(8 + head.size() + offset);
    const std::uint64_t head_len = head.size();
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((head_len >> (8 * i)) & 0xff));
    out += head;
    for (const auto& [name, t] : params_) {
        for (double v : t.values()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("checkpoint: cannot open " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("checkpoint: write failed for " + path);
}

inline MmilModel MmilModel::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 8) throw ParseError("checkpoint: truncated header length");
    std::uint64_t head_len = 0;
    for (int i = 0; i < 8; ++i)
        head_len |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf[i])) << (8 * i);
    if (8 + head_len > buf.size()) throw ParseError("checkpoint: truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(buf.substr(8, head_len));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("checkpoint: bad header: " + std::string(e.what()));
    }
    if (header.at("version").get<std::string>() != "mmil-ckpt-1") {
        throw ParseError("checkpoint: unsupported version");
    }
    MmilModel model(ModelConfig::from_json(header.at("config")), 0);
    const std::size_t data_start = 8 + head_len;
    const std::string_view data(buf.data() + data_start, buf.size() - data_start);

    std::size_t expected = 0;
    for (const auto& entry : header.at("params")) {
        const std::string name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        Tensor t = model.parameter(name);
        if (t.shape() != shape) throw ParseError("checkpoint: shape mismatch for " + name);
        const std::size_t bytes = t.numel() * 8;
        if (offset + bytes > data.size()) {
            throw ParseError("checkpoint: data truncated at " + name);
        }
        std::vector<double>& vals = t.node()->values;
        for (std::size_t i = 0; i < t.numel(); ++i) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) {
                bits |= static_cast<std::uint64_t>(
                            static_cast<std::uint8_t>(data[offset + i * 8 + b]))
                        << (8 * b);
            }
            std::memcpy(&vals[i], &bits, 8);
        }
        expected += bytes;
    }
    if (header.at("params").size() != model.parameters().size() || expected != data.size()) {
        throw ParseError("checkpoint: parameter manifest does not match the config");
    }
    return model;
}

}  // namespace mmil
