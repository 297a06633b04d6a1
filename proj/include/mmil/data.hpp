#pragma once

// Bag I/O, synthetic MIL data generation, and dataset manifests. Bags live on
// disk as MMILBAG1 files holding 32-bit floats; in memory everything is
// promoted to doubles.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmil/error.hpp"
#include "mmil/grouping.hpp"
#include "mmil/rng.hpp"
#include "mmil/tensor.hpp"

namespace mmil {

struct InstanceBag {
    std::string id;
    Tensor embeddings;            // n x C
    std::vector<Coord2D> coords;  // empty when absent
    int label = 0;
    std::vector<int> instance_labels;  // synthetic diagnostics; never written to disk

    std::size_t size() const { return embeddings.rows(); }
    std::size_t dim() const { return embeddings.cols(); }
    bool has_coords() const { return !coords.empty(); }
};

// Eq-style MIL rule: a bag is negative exactly when every instance is.
inline int bag_label_oracle(const std::vector<int>& instance_labels) {
    if (instance_labels.empty()) throw DataError("bag_label_oracle: empty instance list");
    for (int y : instance_labels) {
        if (y != 0) return 1;
    }
    return 0;
}

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_f32_le(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32_le(out, bits);
}

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size()) {
            throw ParseError(std::string("truncated reading ") + what + " at byte offset " +
                             std::to_string(pos));
        }
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(buf[pos++]);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    float f32(const char* what) {
        const std::uint32_t bits = u32(what);
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
};

}  // namespace detail

inline constexpr char kBagMagic[9] = "MMILBAG1";

inline void save_bag(const InstanceBag& bag, const std::string& path) {
    const std::size_t n = bag.size(), c = bag.dim();
    if (bag.has_coords() && bag.coords.size() != n) {
        throw DataError("save_bag: coords length != instance count");
    }
    std::string out;
    out.reserve(18 + 4 * n * (c + 2));
    out.append(kBagMagic, 8);
    detail::put_u32_le(out, static_cast<std::uint32_t>(n));
    detail::put_u32_le(out, static_cast<std::uint32_t>(c));
    out.push_back(bag.has_coords() ? 1 : 0);
    out.push_back(static_cast<char>(bag.label));
    const auto& v = bag.embeddings.values();
    for (double x : v) detail::put_f32_le(out, static_cast<float>(x));
    for (const auto& co : bag.coords) {
        detail::put_f32_le(out, static_cast<float>(co.x));
        detail::put_f32_le(out, static_cast<float>(co.y));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("save_bag: cannot open " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("save_bag: write failed for " + path);
}

inline InstanceBag load_bag(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("load_bag: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    detail::ByteReader r{buf};
    r.need(8, "magic");
    if (buf.compare(0, 8, kBagMagic, 8) != 0) {
        throw ParseError("load_bag: bad magic at byte offset 0 in " + path);
    }
    r.pos = 8;
    const std::uint32_t n = r.u32("instance count");
    const std::uint32_t c = r.u32("channel count");
    if (n == 0 || c == 0) throw ParseError("load_bag: empty shape at byte offset 8");
    const std::uint8_t has_coords = r.u8("coords flag");
    const std::uint8_t label = r.u8("label");
    if (has_coords > 1 || label > 1) {
        throw ParseError("load_bag: bad flag byte at byte offset " + std::to_string(r.pos - 1));
    }
    std::vector<double> vals(static_cast<std::size_t>(n) * c);
    for (auto& x : vals) x = static_cast<double>(r.f32("embeddings"));
    InstanceBag bag;
    bag.embeddings = Tensor::of({n, c}, vals);
    if (has_coords) {
        bag.coords.resize(n);
        for (auto& co : bag.coords) {
            co.x = static_cast<double>(r.f32("coords"));
            co.y = static_cast<double>(r.f32("coords"));
        }
    }
    if (r.pos != buf.size()) {
        throw ParseError("load_bag: trailing bytes at offset " + std::to_string(r.pos));
    }
    bag.label = label;
    bag.id = std::filesystem::path(path).stem().string();
    return bag;
}

struct ManifestEntry {
    std::string path;  // relative to the manifest's directory
    int label = 0;
    std::string split;  // "train" | "val" | "test" | "" before splitting
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::uint64_t seed = 0;
    std::size_t dim = 0;
    nlohmann::json generator;  // generator parameters, free-form
    std::string root;          // directory of the manifest file, not serialized

    std::vector<ManifestEntry> split(const std::string& name) const {
        std::vector<ManifestEntry> out;
        for (const auto& e : entries) {
            if (e.split == name) out.push_back(e);
        }
        return out;
    }

    std::string resolve(const ManifestEntry& e) const {
        return root.empty() ? e.path : (std::filesystem::path(root) / e.path).string();
    }

    nlohmann::json to_json() const {
        nlohmann::json bags = nlohmann::json::array();
        for (const auto& e : entries) {
            bags.push_back({{"path", e.path}, {"label", e.label}, {"split", e.split}});
        }
        return nlohmann::json{{"version", "mmil-manifest-1"},
                              {"seed", seed},
                              {"dim", dim},
                              {"generator", generator},
                              {"bags", bags}};
    }

    static DatasetManifest from_json(const nlohmann::json& j) {
        if (j.at("version").get<std::string>() != "mmil-manifest-1") {
            throw ParseError("manifest: unknown version");
        }
        DatasetManifest m;
        m.seed = j.at("seed").get<std::uint64_t>();
        m.dim = j.at("dim").get<std::size_t>();
        m.generator = j.value("generator", nlohmann::json::object());
        for (const auto& b : j.at("bags")) {
            m.entries.push_back({b.at("path").get<std::string>(), b.at("label").get<int>(),
                                 b.value("split", std::string{})});
        }
        return m;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw DataError("manifest: cannot open " + path);
        f << to_json().dump(2) << "\n";
    }

    static DatasetManifest load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw DataError("manifest: cannot open " + path);
        nlohmann::json j;
        try {
            f >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("manifest: " + std::string(e.what()));
        }
        DatasetManifest m = from_json(j);
        m.root = std::filesystem::path(path).parent_path().string();
        for (const auto& e : m.entries) {
            if (!std::filesystem::exists(m.resolve(e))) {
                throw DataError("manifest: missing bag file " + e.path);
            }
        }
        return m;
    }
};

struct GenParams {
    std::size_t n_bags = 300;
    std::size_t n_min = 64;
    std::size_t n_max = 256;
    std::size_t dim = 32;
    double pos_rate = 0.05;   // fraction of instances flipped positive in positive bags
    double separation = 3.0;  // mean shift of the positive component, in noise units
    std::uint64_t seed = 7;

    nlohmann::json to_json() const {
        return nlohmann::json{{"n_bags", n_bags},       {"n_min", n_min},
                              {"n_max", n_max},         {"dim", dim},
                              {"pos_rate", pos_rate},   {"separation", separation},
                              {"seed", seed}};
    }
};

// One synthetic bag. Negative instances come from a shared 3-component
// Gaussian mixture; positive instances ride a fixed direction `separation`
// away from their component mean and cluster spatially on the coordinate grid.
inline InstanceBag gen_synthetic_bag(const GenParams& p, std::size_t index) {
    const std::size_t c = p.dim;
    constexpr std::size_t kComponents = 3;
    Rng shared(mix_seed(p.seed, 0x736861726564ull));
    std::vector<std::vector<double>> mix_means(kComponents, std::vector<double>(c));
    for (auto& mean : mix_means)
        for (auto& v : mean) v = shared.gaussian();
    std::vector<double> shift(c);
    double norm = 0.0;
    for (auto& v : shift) {
        v = shared.gaussian();
        norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : shift) v *= p.separation / norm;

    Rng rng(mix_seed(p.seed, index, 0xba67ull));
    InstanceBag bag;
    bag.id = "bag" + std::to_string(index);
    bag.label = static_cast<int>(index % 2);
    const std::size_t n = p.n_min + rng.below(p.n_max - p.n_min + 1);
    std::size_t n_pos = 0;
    if (bag.label == 1) {
        n_pos = static_cast<std::size_t>(
            std::max<long long>(1, std::llround(p.pos_rate * static_cast<double>(n))));
    }
    bag.instance_labels.assign(n, 0);
    for (std::size_t i : rng.sample_without_replacement(n, n_pos)) bag.instance_labels[i] = 1;

    std::vector<double> vals(n * c);
    const double px = 10.0 + 80.0 * rng.uniform();
    const double py = 10.0 + 80.0 * rng.uniform();
    bag.coords.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& mean = mix_means[rng.below(kComponents)];
        const bool pos = bag.instance_labels[i] == 1;
        for (std::size_t d = 0; d < c; ++d) {
            vals[i * c + d] = mean[d] + (pos ? shift[d] : 0.0) + rng.gaussian();
        }
        if (pos) {
            bag.coords[i] = {px + 2.0 * rng.gaussian(), py + 2.0 * rng.gaussian()};
        } else {
            bag.coords[i] = {100.0 * rng.uniform(), 100.0 * rng.uniform()};
        }
    }
    bag.embeddings = Tensor::of({n, c}, vals);
    return bag;
}

// Writes n_bags MMILBAG1 files under out_dir and returns an unsplit manifest.
inline DatasetManifest gen_synthetic_dataset(const GenParams& p, const std::string& out_dir) {
    if (p.n_min < 1 || p.n_max < p.n_min) throw ConfigError("gen: need 1 <= n_min <= n_max");
    if (p.pos_rate <= 0.0 || p.pos_rate > 1.0) throw ConfigError("gen: pos_rate must be in (0,1]");
    if (p.separation <= 0.0) throw ConfigError("gen: separation must be positive");
    if (static_cast<double>(p.n_max) * p.pos_rate < 1.0) {
        throw ConfigError("gen: n_max * pos_rate < 1, no bag could hold a positive instance");
    }
    if (p.n_bags < 2) throw ConfigError("gen: need at least 2 bags");
    std::filesystem::create_directories(out_dir);
    DatasetManifest m;
    m.seed = p.seed;
    m.dim = p.dim;
    m.generator = p.to_json();
    m.root = out_dir;
    for (std::size_t b = 0; b < p.n_bags; ++b) {
        InstanceBag bag = gen_synthetic_bag(p, b);
        char name[32];
        std::snprintf(name, sizeof(name), "bag%04zu.bin", b);
        save_bag(bag, (std::filesystem::path(out_dir) / name).string());
        m.entries.push_back({name, bag.label, ""});
    }
    return m;
}

namespace detail {

// Largest-remainder apportionment of n into |ratios| buckets; ties go to the
// earlier bucket.
inline std::vector<std::size_t> apportion(std::size_t n, const std::vector<double>& ratios) {
    std::vector<std::size_t> counts(ratios.size());
    std::vector<double> rem(ratios.size());
    std::size_t used = 0;
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        const double exact = ratios[i] * static_cast<double>(n);
        counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        rem[i] = exact - static_cast<double>(counts[i]);
        used += counts[i];
    }
    while (used < n) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < ratios.size(); ++i) {
            if (rem[i] > rem[best] + 1e-12) best = i;
        }
        ++counts[best];
        rem[best] = -1.0;
        ++used;
    }
    return counts;
}

}  // namespace detail

// Stratified train/val/test assignment. Split totals follow the ratios
// exactly (largest remainder); the positive class is apportioned the same way
// inside those totals, so per-split label balance stays within one bag of the
// global rate.
inline void split_dataset(DatasetManifest& m, double train, double val, double test,
                          std::uint64_t seed) {
    if (std::abs(train + val + test - 1.0) > 1e-9) {
        throw ConfigError("split: ratios must sum to 1");
    }
    if (train < 0 || val < 0 || test < 0) throw ConfigError("split: negative ratio");
    const std::vector<double> ratios{train, val, test};
    const char* names[3] = {"train", "val", "test"};
    const std::size_t n = m.entries.size();

    auto totals = detail::apportion(n, ratios);
    for (std::size_t s = 0; s < 3; ++s) {
        if (totals[s] == 0) {
            throw ConfigError(std::string("split: ") + names[s] + " split would be empty");
        }
    }
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < n; ++i) (m.entries[i].label == 1 ? pos : neg).push_back(i);
    auto pos_counts = detail::apportion(pos.size(), ratios);
    std::vector<std::size_t> neg_counts(3);
    for (std::size_t s = 0; s < 3; ++s) {
        if (totals[s] < pos_counts[s]) throw ConfigError("split: class sizes too small to fill");
        neg_counts[s] = totals[s] - pos_counts[s];
        if (neg_counts[s] > neg.size()) throw ConfigError("split: class sizes too small to fill");
    }
    Rng rng(mix_seed(seed, 0x73706c6974ull));
    rng.shuffle(pos);
    rng.shuffle(neg);
    std::size_t pi = 0, ni = 0;
    for (std::size_t s = 0; s < 3; ++s) {
        for (std::size_t k = 0; k < pos_counts[s]; ++k) m.entries[pos[pi++]].split = names[s];
        for (std::size_t k = 0; k < neg_counts[s]; ++k) m.entries[neg[ni++]].split = names[s];
    }
}

}  // namespace mmil
