#include <gtest/gtest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "mmil/data.hpp"
#include "mmil/metrics.hpp"

using namespace mmil;

namespace {

std::filesystem::path temp_dir(const char* name) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST(BagLabelOracle, FollowsTheMilRule) {
    EXPECT_EQ(bag_label_oracle({0, 0, 0}), 0);
    EXPECT_EQ(bag_label_oracle({0, 1, 0}), 1);
    EXPECT_EQ(bag_label_oracle({1, 1, 1, 1}), 1);
    EXPECT_EQ(bag_label_oracle({1}), 1);
    EXPECT_THROW(bag_label_oracle({}), DataError);
}

TEST(BagIo, MinimalFileIsExactly26Bytes) {
    InstanceBag bag;
    bag.id = "tiny";
    bag.embeddings = Tensor::of({1, 2}, {0.5, -1.25});
    bag.label = 1;
    const auto dir = temp_dir("mmil_bag_min");
    const auto path = dir / "tiny.bin";
    save_bag(bag, path.string());
    EXPECT_EQ(std::filesystem::file_size(path), 26u);
    std::filesystem::remove_all(dir);
}

TEST(BagIo, RoundTripIsLossless) {
    const auto dir = temp_dir("mmil_bag_rt");
    InstanceBag bag;
    bag.id = "rt";
    bag.embeddings = Tensor::of({2, 3}, {0.5, -1.25, 2.0, 0.125, -8.0, 3.5});
    bag.coords = {{1.5, 2.0}, {-3.25, 0.5}};
    bag.label = 0;
    const auto path = dir / "rt.bin";
    save_bag(bag, path.string());
    InstanceBag back = load_bag(path.string());
    EXPECT_EQ(back.embeddings.values(), bag.embeddings.values());
    ASSERT_EQ(back.coords.size(), 2u);
    EXPECT_EQ(back.coords[1].x, -3.25);
    EXPECT_EQ(back.label, 0);
    EXPECT_EQ(back.id, "rt");

    // File-level round trip: save(load(file)) reproduces the bytes.
    const auto path2 = dir / "rt2.bin";
    back.id = "rt2";
    save_bag(back, path2.string());
    EXPECT_EQ(file_bytes(path), file_bytes(path2));
    std::filesystem::remove_all(dir);
}

TEST(BagIo, CorruptFilesReportByteOffsets) {
    const auto dir = temp_dir("mmil_bag_bad");
    InstanceBag bag;
    bag.id = "x";
    bag.embeddings = Tensor::of({2, 2}, {1.0, 2.0, 3.0, 4.0});
    const auto path = dir / "x.bin";
    save_bag(bag, path.string());
    std::string bytes = file_bytes(path);

    {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f.write(bytes.data(), 13);  // cut inside the embedding block
    }
    try {
        load_bag(path.string());
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
    }

    {
        std::string bad = bytes;
        bad[0] = 'X';
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f.write(bad.data(), static_cast<std::streamsize>(bad.size()));
    }
    EXPECT_THROW(load_bag(path.string()), ParseError);

    {
        std::string bad = bytes + "zz";
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f.write(bad.data(), static_cast<std::streamsize>(bad.size()));
    }
    EXPECT_THROW(load_bag(path.string()), ParseError);
    std::filesystem::remove_all(dir);
}

TEST(Generator, LabelsAreBalancedAndObeyTheOracle) {
    GenParams p;
    p.n_bags = 20;
    p.n_min = 8;
    p.n_max = 16;
    p.dim = 6;
    p.seed = 3;
    std::size_t positives = 0;
    for (std::size_t b = 0; b < p.n_bags; ++b) {
        InstanceBag bag = gen_synthetic_bag(p, b);
        EXPECT_EQ(bag.label, bag_label_oracle(bag.instance_labels));
        EXPECT_GE(bag.size(), p.n_min);
        EXPECT_LE(bag.size(), p.n_max);
        EXPECT_EQ(bag.coords.size(), bag.size());
        std::size_t pos_instances = 0;
        for (int y : bag.instance_labels) pos_instances += y;
        if (bag.label == 1) {
            EXPECT_GE(pos_instances, 1u);
            ++positives;
        } else {
            EXPECT_EQ(pos_instances, 0u);
        }
    }
    EXPECT_EQ(positives, p.n_bags / 2);
}

TEST(Generator, SameSeedGivesByteIdenticalFiles) {
    GenParams p;
    p.n_bags = 6;
    p.n_min = 4;
    p.n_max = 8;
    p.dim = 4;
    p.pos_rate = 0.25;
    p.seed = 11;
    const auto a = temp_dir("mmil_gen_a");
    const auto b = temp_dir("mmil_gen_b");
    gen_synthetic_dataset(p, a.string());
    gen_synthetic_dataset(p, b.string());
    for (std::size_t i = 0; i < p.n_bags; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "bag%04zu.bin", i);
        EXPECT_EQ(file_bytes(a / name), file_bytes(b / name)) << name;
    }
    std::filesystem::remove_all(a);
    std::filesystem::remove_all(b);
}

TEST(Generator, ImpossibleRateRejected) {
    GenParams p;
    p.n_max = 10;
    p.n_min = 5;
    p.pos_rate = 0.05;  // 10 * 0.05 = 0.5 < 1
    EXPECT_THROW(gen_synthetic_dataset(p, "/tmp/never"), ConfigError);
    p.pos_rate = 0.0;
    EXPECT_THROW(gen_synthetic_dataset(p, "/tmp/never"), ConfigError);
    p.pos_rate = 0.5;
    p.separation = 0.0;
    EXPECT_THROW(gen_synthetic_dataset(p, "/tmp/never"), ConfigError);
}

TEST(Generator, FullRateLargeSeparationIsLinearlySolvable) {
    GenParams p;
    p.n_bags = 40;
    p.n_min = 16;
    p.n_max = 32;
    p.dim = 8;
    p.pos_rate = 1.0;
    p.separation = 6.0;
    p.seed = 19;
    // Mean-pool each bag, project onto the difference of class means, AUC.
    std::vector<std::vector<double>> pooled;
    std::vector<int> labels;
    for (std::size_t b = 0; b < p.n_bags; ++b) {
        InstanceBag bag = gen_synthetic_bag(p, b);
        std::vector<double> mean(p.dim, 0.0);
        for (std::size_t i = 0; i < bag.size(); ++i)
            for (std::size_t d = 0; d < p.dim; ++d) mean[d] += bag.embeddings.at(i, d);
        for (double& v : mean) v /= static_cast<double>(bag.size());
        pooled.push_back(mean);
        labels.push_back(bag.label);
    }
    std::vector<double> dir(p.dim, 0.0);
    double npos = 0, nneg = 0;
    for (std::size_t b = 0; b < pooled.size(); ++b) (labels[b] ? npos : nneg) += 1.0;
    for (std::size_t b = 0; b < pooled.size(); ++b) {
        for (std::size_t d = 0; d < p.dim; ++d) {
            dir[d] += (labels[b] ? 1.0 / npos : -1.0 / nneg) * pooled[b][d];
        }
    }
    std::vector<double> scores;
    for (const auto& mean : pooled) {
        double s = 0.0;
        for (std::size_t d = 0; d < p.dim; ++d) s += mean[d] * dir[d];
        scores.push_back(s);
    }
    EXPECT_GE(roc_auc(scores, labels), 0.99);
}

TEST(SplitDataset, HundredBagsSplitExactly) {
    DatasetManifest m;
    for (int i = 0; i < 100; ++i) m.entries.push_back({"bag" + std::to_string(i), i % 2, ""});
    split_dataset(m, 0.6, 0.15, 0.25, 5);
    EXPECT_EQ(m.split("train").size(), 60u);
    EXPECT_EQ(m.split("val").size(), 15u);
    EXPECT_EQ(m.split("test").size(), 25u);

    for (const char* name : {"train", "val", "test"}) {
        const auto part = m.split(name);
        double pos = 0;
        for (const auto& e : part) pos += e.label;
        const double expected = 0.5 * static_cast<double>(part.size());
        EXPECT_LE(std::abs(pos - expected), 1.0) << name;
    }
}

TEST(SplitDataset, DeterministicAndDisjoint) {
    DatasetManifest a, b;
    for (int i = 0; i < 37; ++i) {
        a.entries.push_back({"bag" + std::to_string(i), i % 3 == 0, ""});
        b.entries.push_back({"bag" + std::to_string(i), i % 3 == 0, ""});
    }
    split_dataset(a, 0.6, 0.15, 0.25, 9);
    split_dataset(b, 0.6, 0.15, 0.25, 9);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        EXPECT_EQ(a.entries[i].split, b.entries[i].split);
        EXPECT_FALSE(a.entries[i].split.empty());
        ++assigned;
    }
    EXPECT_EQ(assigned, 37u);

    DatasetManifest c = a;
    split_dataset(c, 0.6, 0.15, 0.25, 10);
    bool moved = false;
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        moved = moved || c.entries[i].split != a.entries[i].split;
    }
    EXPECT_TRUE(moved);
}

TEST(SplitDataset, DegenerateRatiosRejected) {
    DatasetManifest m;
    for (int i = 0; i < 10; ++i) m.entries.push_back({"b" + std::to_string(i), i % 2, ""});
    EXPECT_THROW(split_dataset(m, 1.0, 0.0, 0.0, 1), ConfigError);
    EXPECT_THROW(split_dataset(m, 0.5, 0.4, 0.2, 1), ConfigError);  // sums to 1.1
}

TEST(Manifest, JsonRoundTripAndMissingFileCheck) {
    const auto dir = temp_dir("mmil_manifest");
    GenParams p;
    p.n_bags = 4;
    p.n_min = 3;
    p.n_max = 5;
    p.dim = 3;
    p.pos_rate = 0.5;
    DatasetManifest m = gen_synthetic_dataset(p, dir.string());
    split_dataset(m, 0.5, 0.25, 0.25, 2);
    const auto mpath = dir / "manifest.json";
    m.save(mpath.string());

    DatasetManifest back = DatasetManifest::load(mpath.string());
    EXPECT_EQ(back.entries.size(), 4u);
    EXPECT_EQ(back.dim, 3u);
    EXPECT_EQ(back.to_json(), m.to_json());
    InstanceBag bag = load_bag(back.resolve(back.entries[0]));
    EXPECT_EQ(bag.dim(), 3u);

    std::filesystem::remove(back.resolve(back.entries[1]));
    EXPECT_THROW(DatasetManifest::load(mpath.string()), DataError);
    std::filesystem::remove_all(dir);
}
