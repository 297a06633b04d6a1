#pragma once

// Grouping operators: partition a bag's instances into sub-bags, plus the
// masking mechanism that drops a fixed fraction of sub-bags.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmil/error.hpp"
#include "mmil/rng.hpp"
#include "mmil/tensor.hpp"

namespace mmil {

struct Coord2D {
    double x = 0.0;
    double y = 0.0;
};

struct Partition {
    std::vector<std::size_t> assignment;  // per instance, sub-bag index in [0, g)
    std::size_t groups = 0;
    std::vector<bool> masked;  // per sub-bag
    std::uint64_t seed = 0;    // 0 when produced deterministically

    std::size_t instance_count() const { return assignment.size(); }

    std::vector<std::size_t> sizes() const {
        std::vector<std::size_t> s(groups, 0);
        for (std::size_t a : assignment) ++s[a];
        return s;
    }

    // Member indices per sub-bag, ascending within each sub-bag.
    std::vector<std::vector<std::size_t>> members() const {
        std::vector<std::vector<std::size_t>> m(groups);
        for (std::size_t i = 0; i < assignment.size(); ++i) m[assignment[i]].push_back(i);
        return m;
    }

    std::vector<std::size_t> unmasked_subbags() const {
        std::vector<std::size_t> u;
        for (std::size_t j = 0; j < groups; ++j) {
            if (!masked[j]) u.push_back(j);
        }
        return u;
    }

    std::size_t masked_count() const {
        std::size_t n = 0;
        for (bool m : masked) n += m ? 1 : 0;
        return n;
    }

    nlohmann::json to_json() const {
        std::vector<int> mask_ints(masked.begin(), masked.end());
        return nlohmann::json{
            {"g", groups}, {"assignment", assignment}, {"masked", mask_ints}, {"seed", seed}};
    }

    static Partition from_json(const nlohmann::json& j) {
        Partition p;
        p.groups = j.at("g").get<std::size_t>();
        p.assignment = j.at("assignment").get<std::vector<std::size_t>>();
        const auto mask_ints = j.at("masked").get<std::vector<int>>();
        p.masked.assign(mask_ints.begin(), mask_ints.end());
        p.seed = j.at("seed").get<std::uint64_t>();
        if (p.masked.size() != p.groups) throw ParseError("partition: masked length != g");
        for (std::size_t a : p.assignment) {
            if (a >= p.groups) throw ParseError("partition: assignment out of range");
        }
        return p;
    }
};

enum class DistanceMetric { euclidean, cosine };

struct KmeansTrace {
    std::vector<double> objective_history;  // one entry per Lloyd iteration
    std::size_t iterations = 0;
};

namespace detail {

inline double sq_euclid(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

inline double cosine_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return 1.0 - dot;  // both unit-norm
}

inline void normalize_unit(std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n > 0.0) {
        for (double& x : v) x /= n;
    }
}

}  // namespace detail

// Lloyd-style k-means with deterministic farthest-point initialization (the
// first centroid is the point farthest from the data mean, so the result does
// not depend on input order, only on geometry). Empty clusters are repaired by
// donating the point currently farthest from its own centroid. Supports the
// squared-euclidean and spherical (cosine) objectives.
inline Partition kmeans(const std::vector<std::vector<double>>& points, std::size_t g,
                        std::uint64_t seed, std::size_t max_iter = 100, double tol = 1e-6,
                        DistanceMetric metric = DistanceMetric::euclidean,
                        KmeansTrace* trace = nullptr) {
    const std::size_t n = points.size();
    if (g < 1) throw ConfigError("kmeans: need at least one cluster");
    if (g > n) {
        throw ConfigError("kmeans: " + std::to_string(g) + " clusters exceed " +
                          std::to_string(n) + " points");
    }
    const std::size_t dim = points.front().size();
    std::vector<std::vector<double>> pts = points;
    for (std::size_t i = 0; i < n; ++i) {
        for (double v : pts[i]) {
            if (!std::isfinite(v)) throw DataError("kmeans: non-finite point " + std::to_string(i));
        }
        if (metric == DistanceMetric::cosine) {
            double norm = 0.0;
            for (double v : pts[i]) norm += v * v;
            if (norm == 0.0) throw DataError("kmeans: zero vector at index " + std::to_string(i));
            detail::normalize_unit(pts[i]);
        }
    }
    auto dist = [&](const std::vector<double>& a, const std::vector<double>& b) {
        return metric == DistanceMetric::cosine ? detail::cosine_dist(a, b)
                                                : detail::sq_euclid(a, b);
    };

    // Farthest-point init, seeded only by the geometry.
    std::vector<double> mean(dim, 0.0);
    for (const auto& p : pts)
        for (std::size_t d = 0; d < dim; ++d) mean[d] += p[d];
    for (double& v : mean) v /= static_cast<double>(n);
    if (metric == DistanceMetric::cosine) detail::normalize_unit(mean);

    std::vector<std::vector<double>> centroids;
    centroids.reserve(g);
    std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
    {
        std::size_t first = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = dist(pts[i], mean);
            if (d > best) {
                best = d;
                first = i;
            }
        }
        centroids.push_back(pts[first]);
    }
    while (centroids.size() < g) {
        std::size_t next = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            min_dist[i] = std::min(min_dist[i], dist(pts[i], centroids.back()));
            if (min_dist[i] > best) {
                best = min_dist[i];
                next = i;
            }
        }
        centroids.push_back(pts[next]);
    }

    std::vector<std::size_t> assignment(n, 0);
    std::size_t iter = 0;
    for (; iter < max_iter; ++iter) {
        // Assign, ties to the lowest centroid index.
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best_j = 0;
            double best_d = dist(pts[i], centroids[0]);
            for (std::size_t j = 1; j < g; ++j) {
                const double d = dist(pts[i], centroids[j]);
                if (d < best_d) {
                    best_d = d;
                    best_j = j;
                }
            }
            assignment[i] = best_j;
        }

        // Repair empties so every sub-bag keeps at least one member.
        std::vector<std::size_t> counts(g, 0);
        for (std::size_t a : assignment) ++counts[a];
        for (std::size_t e = 0; e < g; ++e) {
            if (counts[e] > 0) continue;
            std::size_t donor = n;
            double worst = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (counts[assignment[i]] < 2) continue;
                const double d = dist(pts[i], centroids[assignment[i]]);
                if (d > worst) {
                    worst = d;
                    donor = i;
                }
            }
            --counts[assignment[donor]];
            assignment[donor] = e;
            ++counts[e];
            centroids[e] = pts[donor];
        }

        if (trace) {
            double obj = 0.0;
            for (std::size_t i = 0; i < n; ++i) obj += dist(pts[i], centroids[assignment[i]]);
            trace->objective_history.push_back(obj);
        }

        // Update step.
        std::vector<std::vector<double>> next(g, std::vector<double>(dim, 0.0));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t d = 0; d < dim; ++d) next[assignment[i]][d] += pts[i][d];
        for (std::size_t j = 0; j < g; ++j) {
            if (metric == DistanceMetric::cosine) {
                detail::normalize_unit(next[j]);
                // A cancelled-out mean keeps the previous direction.
                double norm = 0.0;
                for (double v : next[j]) norm += v * v;
                if (norm == 0.0) next[j] = centroids[j];
            } else {
                for (double& v : next[j]) v /= static_cast<double>(counts[j]);
            }
        }
        double shift = 0.0;
        for (std::size_t j = 0; j < g; ++j)
            shift = std::max(shift, std::sqrt(detail::sq_euclid(centroids[j], next[j])));
        centroids.swap(next);
        if (shift < tol) {
            ++iter;
            break;
        }
    }
    if (trace) trace->iterations = iter;

    Partition p;
    p.assignment = std::move(assignment);
    p.groups = g;
    p.masked.assign(g, false);
    p.seed = 0;  // init is deterministic; the seed argument is accepted for interface parity
    (void)seed;
    return p;
}

// K-means on raw patch-center coordinates.
inline Partition group_coordinate(const std::vector<Coord2D>& coords, std::size_t g,
                                  std::uint64_t seed) {
    if (coords.empty()) {
        throw ConfigError(
            "coordinate grouping: bag has no coordinates; use the embedding, random or "
            "sequential operator instead");
    }
    std::vector<std::vector<double>> pts;
    pts.reserve(coords.size());
    for (const auto& c : coords) pts.push_back({c.x, c.y});
    return kmeans(pts, g, seed, 100, 1e-6, DistanceMetric::euclidean);
}

// Spherical k-means on L2-normalized instance embeddings.
inline Partition group_embedding(const Tensor& embeddings, std::size_t g, std::uint64_t seed) {
    if (embeddings.rank() != 2) throw DimensionError("group_embedding: rank-2 tensor required");
    const std::size_t n = embeddings.rows(), c = embeddings.cols();
    std::vector<std::vector<double>> pts(n, std::vector<double>(c));
    for (std::size_t i = 0; i < n; ++i) {
        double norm = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            pts[i][j] = embeddings.at(i, j);
            norm += pts[i][j] * pts[i][j];
        }
        if (norm == 0.0) {
            throw DataError("embedding grouping: zero-norm row at index " + std::to_string(i));
        }
    }
    return kmeans(pts, g, seed, 100, 1e-6, DistanceMetric::cosine);
}

// Seeded permutation of [0, n) dealt round-robin into g sub-bags; sizes differ
// by at most one. Meant to be computed once per bag and cached.
inline Partition group_random(std::size_t n, std::size_t g, std::uint64_t seed) {
    if (g < 1 || g > n) {
        throw ConfigError("random grouping: need 1 <= g <= n, got g=" + std::to_string(g) +
                          ", n=" + std::to_string(n));
    }
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng(mix_seed(seed, 0x67726f7570ull));
    rng.shuffle(perm);
    Partition p;
    p.assignment.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) p.assignment[perm[i]] = i % g;
    p.groups = g;
    p.masked.assign(g, false);
    p.seed = seed;
    return p;
}

// Contiguous chunks in original instance order; the first n % g chunks take
// the extra instance.
inline Partition group_sequential(std::size_t n, std::size_t g) {
    if (g < 1 || g > n) {
        throw ConfigError("sequential grouping: need 1 <= g <= n, got g=" + std::to_string(g) +
                          ", n=" + std::to_string(n));
    }
    const std::size_t base = n / g, rem = n % g;
    Partition p;
    p.assignment.reserve(n);
    for (std::size_t j = 0; j < g; ++j) {
        const std::size_t w = base + (j < rem ? 1 : 0);
        p.assignment.insert(p.assignment.end(), w, j);
    }
    p.groups = g;
    p.masked.assign(g, false);
    p.seed = 0;
    return p;
}

// Number of sub-bags masked at a given ratio: floor(ratio * g), with a tiny
// epsilon so products like 0.7 * 10 land on the intended integer.
inline std::size_t mask_count(double ratio, std::size_t g) {
    if (ratio < 0.0) throw ConfigError("mask ratio must be non-negative");
    return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(g) + 1e-9));
}

// Flags floor(ratio * g) sub-bags, chosen uniformly by seed. Masked sub-bags
// contribute no tokens downstream. At least one sub-bag always survives.
inline Partition apply_mask(const Partition& p, double ratio, std::uint64_t seed) {
    const std::size_t k = mask_count(ratio, p.groups);
    if (k >= p.groups) {
        throw ConfigError("mask ratio " + std::to_string(ratio) + " would mask all " +
                          std::to_string(p.groups) + " sub-bags");
    }
    Partition out = p;
    out.masked.assign(p.groups, false);
    if (k == 0) return out;
    Rng rng(mix_seed(seed, 0x6d61736bull));
    for (std::size_t j : rng.sample_without_replacement(p.groups, k)) out.masked[j] = true;
    out.seed = seed;
    return out;
}

}  // namespace mmil
