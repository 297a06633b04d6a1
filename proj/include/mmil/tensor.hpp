#pragma once

// Dense 64-bit tensors (rank 1 and 2) with tape-based reverse-mode autodiff.
// The op set is exactly what attention blocks, layer norm, FFNs and a
// classification loss need; there is no broadcasting beyond row-wise bias.
//
// Recording model: constructing a Tape activates it for the current thread
// (a stack, so tapes nest). Every op whose inputs are differentiable records
// a node onto the active tape; Tape::backward replays the nodes in reverse.
// Gradients of requires_grad leaves accumulate until zero_grad() is called.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mmil/error.hpp"
#include "mmil/rng.hpp"

namespace mmil {

namespace detail {

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

struct TensorData {
    std::vector<std::size_t> shape;
    std::vector<double> values;
    bool requires_grad = false;  // leaf parameter; grad persists across backward calls
    bool tracked = false;        // produced by a recorded op under some tape
    std::vector<double> grad;
    std::uint64_t grad_epoch = 0;

    std::size_t numel() const { return values.size(); }

    // Writable grad buffer. Transient (non-leaf) grads are re-zeroed once per
    // backward pass, identified by the pass epoch; leaf grads accumulate.
    std::vector<double>& grad_for_write(std::uint64_t epoch) {
        if (requires_grad) {
            if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
            return grad;
        }
        if (grad_epoch != epoch) {
            grad.assign(values.size(), 0.0);
            grad_epoch = epoch;
        }
        return grad;
    }

    // Grad produced during the current pass, or null if this tensor never
    // received one (not on a path to the loss).
    const std::vector<double>* grad_if_fresh(std::uint64_t epoch) const {
        if (requires_grad) return grad.empty() ? nullptr : &grad;
        return (grad_epoch == epoch && !grad.empty()) ? &grad : nullptr;
    }
};

// -- raw row-major kernels ---------------------------------------------------
// Accumulating GEMMs, loop-ordered so the innermost index walks contiguous
// memory. This is the hot path for both training and the attention benchmark.

// c(m x n) += a(m x k) * b(k x n)
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n,
                    const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c(m x n) += a(m x k) * b(n x k)^T
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n,
                    const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// c(m x n) += a(k x m)^T * b(k x n)
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n,
                    const double* a, const double* b, double* c) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* ap = a + p * m;
        const double* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = ap[i];
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

}  // namespace detail

class Tensor {
public:
    Tensor() : d_(std::make_shared<detail::TensorData>()) {}

    static Tensor of(std::vector<std::size_t> shape, std::vector<double> values) {
        if (detail::shape_numel(shape) != values.size()) {
            throw DimensionError("tensor: " + std::to_string(values.size()) +
                                 " values do not fill shape " + detail::shape_str(shape));
        }
        Tensor t;
        t.d_->shape = std::move(shape);
        t.d_->values = std::move(values);
        return t;
    }

    static Tensor zeros(std::vector<std::size_t> shape) {
        const std::size_t n = detail::shape_numel(shape);
        return of(std::move(shape), std::vector<double>(n, 0.0));
    }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        const std::size_t n = detail::shape_numel(shape);
        return of(std::move(shape), std::vector<double>(n, v));
    }

    static Tensor scalar(double v) { return of({1}, {v}); }

    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<double> values;
        values.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw DimensionError("tensor: ragged row list");
            values.insert(values.end(), row.begin(), row.end());
        }
        return of({r, c}, std::move(values));
    }

    static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double stddev = 1.0) {
        const std::size_t n = detail::shape_numel(shape);
        std::vector<double> values(n);
        for (auto& v : values) v = rng.gaussian(0.0, stddev);
        return of(std::move(shape), std::move(values));
    }

    const std::vector<std::size_t>& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t numel() const { return d_->values.size(); }

    std::size_t rows() const {
        if (rank() == 2) return d_->shape[0];
        if (rank() == 1) return 1;
        throw DimensionError("rows(): tensor of rank " + std::to_string(rank()));
    }
    std::size_t cols() const {
        if (rank() == 2) return d_->shape[1];
        if (rank() == 1) return d_->shape[0];
        throw DimensionError("cols(): tensor of rank " + std::to_string(rank()));
    }

    double* data() { return d_->values.data(); }
    const double* data() const { return d_->values.data(); }
    std::vector<double>& values() { return d_->values; }
    const std::vector<double>& values() const { return d_->values; }

    double& at(std::size_t i, std::size_t j) { return d_->values[i * cols() + j]; }
    double at(std::size_t i, std::size_t j) const { return d_->values[i * cols() + j]; }
    double& at(std::size_t i) { return d_->values[i]; }
    double at(std::size_t i) const { return d_->values[i]; }
    double item() const {
        if (numel() != 1) {
            throw ContractError("item(): tensor has " + std::to_string(numel()) + " elements");
        }
        return d_->values[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool v = true) {
        d_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !d_->grad.empty(); }
    std::vector<double>& grad() {
        if (d_->grad.size() != d_->values.size()) d_->grad.assign(d_->values.size(), 0.0);
        return d_->grad;
    }
    void zero_grad() {
        if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
    }

    // Deep copy detached from any graph.
    Tensor clone() const {
        Tensor t = of(d_->shape, d_->values);
        return t;
    }

    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

    std::shared_ptr<detail::TensorData> node() const { return d_; }

private:
    std::shared_ptr<detail::TensorData> d_;
};

// ---------------------------------------------------------------------------

class Tape {
public:
    Tape() { stack().push_back(this); }
    ~Tape() {
        auto& s = stack();
        for (std::size_t i = s.size(); i > 0; --i) {
            if (s[i - 1] == this) {
                s.erase(s.begin() + static_cast<std::ptrdiff_t>(i - 1));
                break;
            }
        }
    }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() {
        auto& s = stack();
        return s.empty() ? nullptr : s.back();
    }

    void record(const char* op, std::function<void(std::uint64_t)> backward_fn) {
        nodes_.push_back(Node{op, std::move(backward_fn)});
    }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Reverse sweep from a scalar loss. Recording order is topological, so one
    // reverse pass visits every node exactly once. Calling backward again
    // without zeroing leaf grads accumulates into them.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1) {
            throw ContractError("backward: loss must be a scalar, got shape " +
                                detail::shape_str(loss.shape()));
        }
        const std::uint64_t epoch = ++epoch_counter();
        auto ld = loss.node();
        auto& seed = ld->grad_for_write(epoch);
        seed[0] += 1.0;
        for (std::size_t i = nodes_.size(); i > 0; --i) {
            nodes_[i - 1].backward_fn(epoch);
        }
    }

private:
    struct Node {
        const char* op;
        std::function<void(std::uint64_t)> backward_fn;
    };

    static std::vector<Tape*>& stack() {
        thread_local std::vector<Tape*> s;
        return s;
    }
    static std::uint64_t& epoch_counter() {
        thread_local std::uint64_t c = 0;
        return c;
    }

    std::vector<Node> nodes_;

    friend class TapePause;
};

// Suspends recording (pushes a null tape) for its lifetime.
class TapePause {
public:
    TapePause() { Tape::stack().push_back(nullptr); }
    ~TapePause() { Tape::stack().pop_back(); }
    TapePause(const TapePause&) = delete;
    TapePause& operator=(const TapePause&) = delete;
};

namespace detail {

inline bool differentiable(const Tensor& t) {
    return t.requires_grad() || t.node()->tracked;
}

// True when the op should record a node for its output.
template <typename... Ts>
inline bool track_any(const Ts&... ts) {
    if (Tape::active() == nullptr) return false;
    return (differentiable(ts) || ...);
}

inline bool track_list(const std::vector<Tensor>& ts) {
    if (Tape::active() == nullptr) return false;
    for (const auto& t : ts) {
        if (differentiable(t)) return true;
    }
    return false;
}

inline void mark_tracked(Tensor& t) { t.node()->tracked = true; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops. Every op computes the forward value eagerly; when a tape is active and
// an input is differentiable it records a closure that routes the output
// gradient to the inputs.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw DimensionError("matmul: incompatible shapes " + detail::shape_str(a.shape()) +
                             " and " + detail::shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n});
    detail::gemm_nn(m, k, n, a.data(), b.data(), out.data());
    if (detail::track_any(a, b)) {
        detail::mark_tracked(out);
        auto ad = a.node(), bd = b.node(), od = out.node();
        Tape::active()->record("matmul", [ad, bd, od, m, k, n](std::uint64_t epoch) {
            const auto* og = od->grad_if_fresh(epoch);
            if (!og) return;
            if (ad->requires_grad || ad->tracked) {
                auto& ag = ad->grad_for_write(epoch);
                detail::gemm_nt(m, n, k, og->data(), bd->values.data(), ag.data());
            }
            if (bd->requires_grad || bd->tracked) {
                auto& bg = bd->grad_for_write(epoch);
                detail::gemm_tn(k, m, n, ad->values.data(), og->data(), bg.data());
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("transpose: rank-2 tensor required");
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out = Tensor::zeros({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(j, i) = x.at(i, j);
    if (detail::track_any(x)) {
        detail::mark_tracked(out);
        auto xd = x.node(), od = out.node();
        Tape::active()->record("transpose", [xd, od, r, c](std::uint64_t epoch) {
            const auto* og = od->grad_if_fresh(epoch);
            if (!og) return;
            auto& xg = xd->grad_for_write(epoch);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) xg[i * c + j] += (*og)[j * r + i];
        });
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("add: shape mismatch " + detail::shape_str(a.shape()) + " vs " +
                             detail::shape_str(b.shape()));
    }
    Tensor out = Tensor::of(a.shape(), a.values());
    const double* bv = b.data();
    double* ov = out.data();
    for (std::size_t i = 0; i < out.numel(); ++i) ov[i] += bv[i];
    if (detail::track_any(a, b)) {
        detail::mark_tracked(out);
        auto ad = a.node(), bd = b.node(), od = out.node();
        Tape::active()->record("add", [ad, bd, od](std::uint64_t epoch) {
            const auto* og = od->grad_if_fresh(epoch);
            if (!og) return;
            for (auto* side : {ad.get(), bd.get()}) {
                if (!(side->requires_grad || side->tracked)) continue;
                auto& g = side->grad_for_write(epoch);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*og)[i];
            }
        });
    }
    return out;
}

// x (r x c) plus a length-c bias added to every row.
inline Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 2 || bias.numel() != x.cols()) {
        throw DimensionError("add_rowwise: bias " + detail::shape_str(bias.shape()) +
                             " does not match " + detail::shape_str(x.shape()));
    }
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out = Tensor::of(x.shape(), x.values());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) += bias.at(j);
    if (detail::track_any(x, bias)) {
        detail::mark_tracked(out);
        auto xd = x.node(), bd = bias.node(), od = out.node();
        Tape::active()->record("add_rowwise", [xd, bd, od, r, c](std::uint64_t epoch) {
            const auto* og = od->grad_if_fresh(epoch);
            if (!og) return;
            if (xd->requires_grad || xd->tracked) {
                auto& xg = xd->grad_for_write(epoch);
                for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += (*og)[i];
            }
            if (bd->requires_grad || bd->tracked) {
                auto& bg = bd->grad_for_write(epoch);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) bg[j] += (*og)[i * c + j];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& x, double s) {
    Tensor out = Tensor::of(x.shape(), x.values());
    for (auto& v : out.values()) v *= s;
    if (detail::track_any(x)) {
        detail::mark_tracked(out);
        auto xd = x.node(), od = out.node();
        Tape::active()->record("scale", [xd, od, s](std::uint64_t epoch) {
            const auto* og = od->grad_if_fresh(epoch);
            if (!og) return;
            auto& xg = xd->grad_for_write(epoch);
            for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += s * (*og)[i];
        });
    }
    return out;
}

// Row-wise softmax with per-row max subtraction. Rank-1 input is one row.
inline Tensor softmax_rows(const Tensor& x) {
    if (x.rank() < 1 || x.rank() > 2) throw DimensionError("softmax_rows: rank 1 or 2 required");
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out = Tensor::of(x.shape(), x.values());
    double* ov = out.data();
    for (std::size_t i = 0; i < r; ++i) {
        double* row = ov + i * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (std::size_t j = 0; j < c; ++j) row[j] /= sum;
    }
    if (detail::track_any(x)) {
        detail::mark_tracked(out);
        auto xd = x.node(), od = out.node();
        Tape::active()->record("softmax_rows", [xd, od, r, c](std::uint64_t epoch) {
            const auto* og = od->grad_if_fresh(epoch);
            if (!og) return;
            auto& xg = xd->grad_for_write(epoch);
            const auto& y = od->values;
            for (std::size_t i = 0; i < r; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += (*og)[i * c + j] * y[i * c + j];
                for (std::size_t j = 0; j < c; ++j)
                    xg[i * c + j] += y[i * c + j] * ((*og)[i * c + j] - dot);
            }
        });
    }
    return out;
}

// Per-row normalization to mean 0 / variance 1 (biased), then y = gain*xhat + bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    if (x.rank() != 2) throw DimensionError("layer_norm: rank-2 input required");
    const std::size_t r = x.rows(), c = x.cols();
    if (gain.numel() != c || bias.numel() != c) {
        throw DimensionError("layer_norm: gain/bias length must equal column count " +
                             std::to_string(c));
    }
    if (c < 1 || eps <= 0.0) throw ContractError("layer_norm: need c >= 1 and eps > 0");
    Tensor out = Tensor::zeros({r, c});
    auto xhat = std::make_shared<std::vector<double>>(r * c);
    auto inv_std = std::make_shared<std::vector<double>>(r);
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = x.data() + i * c;
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += row[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const double h = (row[j] - mean) * is;
            (*xhat)[i * c + j] = h;
            out.at(i, j) = gain.at(j) * h + bias.at(j);
        }
    }
    if (detail::track_any(x, gain, bias)) {
        detail::mark_tracked(out);
        auto xd = x.node(), gd = gain.node(), bd = bias.node(), od = out.node();
        Tape::active()->record("layer_norm",
                               [xd, gd, bd, od, xhat, inv_std, r, c](std::uint64_t epoch) {
            const auto* og = od->grad_if_fresh(epoch);
            if (!og) return;
            const bool need_x = xd->requires_grad || xd->tracked;
            const bool need_g = gd->requires_grad || gd->tracked;
            const bool need_b = bd->requires_grad || bd->tracked;
            for (std::size_t i = 0; i < r; ++i) {
                const double is = (*inv_std)[i];
                double sum_gy = 0.0, sum_gyh = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double gy = (*og)[i * c + j] * gd->values[j];
                    sum_gy += gy;
                    sum_gyh += gy * (*xhat)[i * c + j];
                }
                if (need_x) {
                    auto& xg = xd->grad_for_write(epoch);
                    const double inv_c = 1.0 / static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        const double gy = (*og)[i * c + j] * gd->values[j];
                        xg[i * c + j] += is * (gy - inv_c * sum_gy -
                                               (*xhat)[i * c + j] * inv_c * sum_gyh);
                    }
                }
                if (need_g) {
                    auto& gg = gd->grad_for_write(epoch);
                    for (std::size_t j = 0; j < c; ++j)
                        gg[j] += (*og)[i * c + j] * (*xhat)[i * c + j];
                }
                if (need_b) {
                    auto& bg = bd->grad_for_write(epoch);
                    for (std::size_t j = 0; j < c; ++j) bg[j] += (*og)[i * c + j];
                }
            }
        });
    }
    return out;
}

inline Tensor gelu(const Tensor& x) {
    Tensor out = Tensor::of(x.shape(), x.values());
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    for (auto& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    if (detail::track_any(x)) {
        detail::mark_tracked(out);
        auto xd = x.node(), od = out.node();
        Tape::active()->record("gelu", [xd, od](std::uint64_t epoch) {
            const auto* og = od->grad_if_fresh(epoch);
            if (!og) return;
            auto& xg = xd->grad_for_write(epoch);
            for (std::size_t i = 0; i < xg.size(); ++i) {
                const double v = xd->values[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                xg[i] += (*og)[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

// Stack parts top to bottom; all parts must share the channel width.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    const std::size_t c = parts.front().cols();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.cols() != c) {
            throw DimensionError("concat_rows: channel mismatch, expected width " +
                                 std::to_string(c) + ", got " + detail::shape_str(p.shape()));
        }
        total += p.rows();
    }
    Tensor out = Tensor::zeros({total, c});
    std::size_t row = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.numel(), out.data() + row * c);
        row += p.rows();
    }
    if (detail::track_list(parts)) {
        detail::mark_tracked(out);
        std::vector<std::shared_ptr<detail::TensorData>> pd;
        pd.reserve(parts.size());
        for (const auto& p : parts) pd.push_back(p.node());
        auto od = out.node();
        Tape::active()->record("concat_rows", [pd, od, c](std::uint64_t epoch) {
            const auto* og = od->grad_if_fresh(epoch);
            if (!og) return;
            std::size_t row = 0;
            for (const auto& p : pd) {
                const std::size_t n = p->values.size();
                if (p->requires_grad || p->tracked) {
                    auto& g = p->grad_for_write(epoch);
                    for (std::size_t i = 0; i < n; ++i) g[i] += (*og)[row * c + i];
                }
                row += n / c;
            }
        });
    }
    return out;
}

// Rows [start, start+count) as a new tensor; gradient scatters back in place.
inline Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
    if (x.rank() != 2 || start + count > x.rows()) {
        throw DimensionError("slice_rows: range [" + std::to_string(start) + ", " +
                             std::to_string(start + count) + ") outside " +
                             detail::shape_str(x.shape()));
    }
    const std::size_t c = x.cols();
    Tensor out = Tensor::of({count, c},
                            std::vector<double>(x.data() + start * c,
                                                x.data() + (start + count) * c));
    if (detail::track_any(x)) {
        detail::mark_tracked(out);
        auto xd = x.node(), od = out.node();
        Tape::active()->record("slice_rows", [xd, od, start, c](std::uint64_t epoch) {
            const auto* og = od->grad_if_fresh(epoch);
            if (!og) return;
            auto& xg = xd->grad_for_write(epoch);
            for (std::size_t i = 0; i < og->size(); ++i) xg[start * c + i] += (*og)[i];
        });
    }
    return out;
}

// Exact inverse of concat_rows for matching sizes.
inline std::vector<Tensor> split_rows(const Tensor& x, const std::vector<std::size_t>& sizes) {
    std::size_t total = 0;
    for (std::size_t s : sizes) total += s;
    if (x.rank() != 2 || total != x.rows()) {
        throw DimensionError("split_rows: sizes sum to " + std::to_string(total) +
                             " but tensor is " + detail::shape_str(x.shape()));
    }
    std::vector<Tensor> parts;
    parts.reserve(sizes.size());
    std::size_t row = 0;
    for (std::size_t s : sizes) {
        parts.push_back(slice_rows(x, row, s));
        row += s;
    }
    return parts;
}

// Columns [start, start+count); used to slice attention heads.
inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
    if (x.rank() != 2 || start + count > x.cols()) {
        throw DimensionError("slice_cols: range outside " + detail::shape_str(x.shape()));
    }
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out = Tensor::zeros({r, count});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) out.at(i, j) = x.at(i, start + j);
    if (detail::track_any(x)) {
        detail::mark_tracked(out);
        auto xd = x.node(), od = out.node();
        Tape::active()->record("slice_cols", [xd, od, start, r, c, count](std::uint64_t epoch) {
            const auto* og = od->grad_if_fresh(epoch);
            if (!og) return;
            auto& xg = xd->grad_for_write(epoch);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < count; ++j)
                    xg[i * c + start + j] += (*og)[i * count + j];
        });
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    const std::size_t r = parts.front().rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.rows() != r) {
            throw DimensionError("concat_cols: row mismatch at " + detail::shape_str(p.shape()));
        }
        total += p.cols();
    }
    Tensor out = Tensor::zeros({r, total});
    std::size_t col = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) out.at(i, col + j) = p.at(i, j);
        col += p.cols();
    }
    if (detail::track_list(parts)) {
        detail::mark_tracked(out);
        std::vector<std::shared_ptr<detail::TensorData>> pd;
        std::vector<std::size_t> widths;
        for (const auto& p : parts) {
            pd.push_back(p.node());
            widths.push_back(p.cols());
        }
        auto od = out.node();
        Tape::active()->record("concat_cols", [pd, od, widths, r, total](std::uint64_t epoch) {
            const auto* og = od->grad_if_fresh(epoch);
            if (!og) return;
            std::size_t col = 0;
            for (std::size_t k = 0; k < pd.size(); ++k) {
                const std::size_t w = widths[k];
                if (pd[k]->requires_grad || pd[k]->tracked) {
                    auto& g = pd[k]->grad_for_write(epoch);
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < w; ++j)
                            g[i * w + j] += (*og)[i * total + col + j];
                }
                col += w;
            }
        });
    }
    return out;
}

// out[i] = x[indices[i]]; backward scatter-adds duplicated indices.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& indices) {
    if (x.rank() != 2) throw DimensionError("gather_rows: rank-2 input required");
    const std::size_t c = x.cols();
    Tensor out = Tensor::zeros({indices.size(), c});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= x.rows()) throw ContractError("gather_rows: index out of range");
        std::copy(x.data() + indices[i] * c, x.data() + (indices[i] + 1) * c,
                  out.data() + i * c);
    }
    if (detail::track_any(x)) {
        detail::mark_tracked(out);
        auto xd = x.node(), od = out.node();
        Tape::active()->record("gather_rows", [xd, od, indices, c](std::uint64_t epoch) {
            const auto* og = od->grad_if_fresh(epoch);
            if (!og) return;
            auto& xg = xd->grad_for_write(epoch);
            for (std::size_t i = 0; i < indices.size(); ++i)
                for (std::size_t j = 0; j < c; ++j)
                    xg[indices[i] * c + j] += (*og)[i * c + j];
        });
    }
    return out;
}

// Copy of base with base[indices[i]] replaced by rows[i]. Indices must be unique.
inline Tensor scatter_rows_update(const Tensor& base, const std::vector<std::size_t>& indices,
                                  const Tensor& rows) {
    if (base.rank() != 2 || rows.rank() != 2 || rows.cols() != base.cols() ||
        rows.rows() != indices.size()) {
        throw DimensionError("scatter_rows_update: replacement " +
                             detail::shape_str(rows.shape()) + " does not fit " +
                             detail::shape_str(base.shape()));
    }
    const std::size_t c = base.cols();
    Tensor out = Tensor::of(base.shape(), base.values());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= base.rows()) throw ContractError("scatter_rows_update: index out of range");
        std::copy(rows.data() + i * c, rows.data() + (i + 1) * c, out.data() + indices[i] * c);
    }
    if (detail::track_any(base, rows)) {
        detail::mark_tracked(out);
        auto bd = base.node(), rd = rows.node(), od = out.node();
        Tape::active()->record("scatter_rows_update",
                               [bd, rd, od, indices, c](std::uint64_t epoch) {
            const auto* og = od->grad_if_fresh(epoch);
            if (!og) return;
            if (bd->requires_grad || bd->tracked) {
                auto& bg = bd->grad_for_write(epoch);
                std::vector<bool> replaced(bd->values.size() / c, false);
                for (std::size_t idx : indices) replaced[idx] = true;
                for (std::size_t i = 0; i < replaced.size(); ++i) {
                    if (replaced[i]) continue;
                    for (std::size_t j = 0; j < c; ++j) bg[i * c + j] += (*og)[i * c + j];
                }
            }
            if (rd->requires_grad || rd->tracked) {
                auto& rg = rd->grad_for_write(epoch);
                for (std::size_t i = 0; i < indices.size(); ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        rg[i * c + j] += (*og)[indices[i] * c + j];
            }
        });
    }
    return out;
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    Tensor out = Tensor::scalar(s);
    if (detail::track_any(x)) {
        detail::mark_tracked(out);
        auto xd = x.node(), od = out.node();
        Tape::active()->record("sum", [xd, od](std::uint64_t epoch) {
            const auto* og = od->grad_if_fresh(epoch);
            if (!og) return;
            auto& xg = xd->grad_for_write(epoch);
            for (auto& g : xg) g += (*og)[0];
        });
    }
    return out;
}

// -log softmax(logits)[label], computed via log-sum-exp. Logits are a single
// row of K class scores (K = 2 for the bag classifier).
inline Tensor cross_entropy(const Tensor& logits, std::size_t label) {
    if (logits.rows() != 1 || logits.cols() < 1) {
        throw DimensionError("cross_entropy: logits must be a single row, got " +
                             detail::shape_str(logits.shape()));
    }
    const std::size_t k = logits.cols();
    if (label >= k) {
        throw DataError("cross_entropy: label " + std::to_string(label) +
                        " outside [0, " + std::to_string(k) + ")");
    }
    const double* lv = logits.data();
    double mx = lv[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, lv[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(lv[j] - mx);
    const double lse = mx + std::log(sum);
    Tensor out = Tensor::scalar(lse - lv[label]);
    if (detail::track_any(logits)) {
        detail::mark_tracked(out);
        auto ld = logits.node(), od = out.node();
        Tape::active()->record("cross_entropy", [ld, od, label, k, mx, sum](std::uint64_t epoch) {
            const auto* og = od->grad_if_fresh(epoch);
            if (!og) return;
            auto& lg = ld->grad_for_write(epoch);
            for (std::size_t j = 0; j < k; ++j) {
                const double p = std::exp(ld->values[j] - mx) / sum;
                lg[j] += (*og)[0] * (p - (j == label ? 1.0 : 0.0));
            }
        });
    }
    return out;
}

// Backward through the innermost active tape.
inline void backward(const Tensor& loss) {
    Tape* t = Tape::active();
    if (!t) throw ContractError("backward: no active tape");
    t->backward(loss);
}

// Softmax probabilities of a single logits row, without touching the tape.
inline std::vector<double> softmax_values(const Tensor& logits) {
    const std::size_t k = logits.numel();
    const double* lv = logits.data();
    double mx = lv[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, lv[j]);
    std::vector<double> p(k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        p[j] = std::exp(lv[j] - mx);
        sum += p[j];
    }
    for (auto& v : p) v /= sum;
    return p;
}

}  // namespace mmil
