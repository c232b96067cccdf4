#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "bdlm/mask.hpp"
#include "bdlm/rng.hpp"

namespace bdlm {

enum class Precision { single_prec, double_prec };

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <class S>
struct TensorData {
    std::vector<int64_t> shape;
    std::vector<S> value;
    std::vector<S> grad;  // empty until first touched by backward
    bool requires_grad = false;
    bool is_leaf = true;
};

/// Dense row-major tensor handle. Values are immutable once a tensor has
/// entered a graph; gradients accumulate in place across backward calls.
template <class S>
class Tensor {
public:
    using Scalar = S;

    Tensor() : data_(std::make_shared<TensorData<S>>()) {}

    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false) {
        return filled(std::move(shape), S(0), requires_grad);
    }
    static Tensor filled(std::vector<int64_t> shape, S v, bool requires_grad = false) {
        Tensor t;
        t.data_->shape = std::move(shape);
        t.data_->value.assign(size_t(product(t.data_->shape)), v);
        t.data_->requires_grad = requires_grad;
        return t;
    }
    static Tensor from(std::vector<int64_t> shape, std::vector<S> values,
                       bool requires_grad = false) {
        Tensor t;
        if (int64_t(values.size()) != product(shape))
            throw std::invalid_argument("tensor: " + shape_str(shape) + " needs " +
                                        std::to_string(product(shape)) + " values, got " +
                                        std::to_string(values.size()));
        t.data_->shape = std::move(shape);
        t.data_->value = std::move(values);
        t.data_->requires_grad = requires_grad;
        return t;
    }
    static Tensor scalar(S v) { return from({}, {v}); }
    static Tensor randn(std::vector<int64_t> shape, Rng& rng, double stddev,
                        bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& x : t.data_->value) x = S(rng.normal(0.0, stddev));
        return t;
    }

    const std::vector<int64_t>& shape() const { return data_->shape; }
    int64_t dim(size_t i) const { return data_->shape.at(i); }
    int64_t numel() const { return int64_t(data_->value.size()); }
    bool requires_grad() const { return data_->requires_grad; }
    bool is_leaf() const { return data_->is_leaf; }

    const std::vector<S>& values() const { return data_->value; }
    std::vector<S>& values_mut() { return data_->value; }
    S value_at(int64_t i) const { return data_->value[size_t(i)]; }
    S at2(int64_t i, int64_t j) const { return data_->value[size_t(i * data_->shape[1] + j)]; }
    S item() const {
        if (numel() != 1)
            throw std::invalid_argument("item(): tensor " + shape_str(shape()) + " is not scalar");
        return data_->value[0];
    }

    const std::vector<S>& grad() const {
        if (data_->grad.empty() && !data_->value.empty())
            throw std::runtime_error("grad(): no gradient recorded for this tensor");
        return data_->grad;
    }
    bool has_grad() const { return !data_->grad.empty(); }
    void zero_grad() { data_->grad.assign(data_->value.size(), S(0)); }

    std::shared_ptr<TensorData<S>> data_;

    static int64_t product(const std::vector<int64_t>& s) {
        int64_t p = 1;
        for (auto d : s) p *= d;
        return p;
    }
};

namespace detail {

// All reductions run in a fixed sequential order so that identical inputs
// give bitwise-identical results.
template <class S>
void mm_nn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        S* ci = c + i * n;
        const S* ai = a + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            const S av = ai[kk];
            const S* bk = b + kk * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}

template <class S>
void mm_nt(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
    // c[m,n] += a[m,k] * b[n,k]^T
    for (int64_t i = 0; i < m; ++i) {
        const S* ai = a + i * k;
        for (int64_t j = 0; j < n; ++j) {
            const S* bj = b + j * k;
            S s = 0;
            for (int64_t kk = 0; kk < k; ++kk) s += ai[kk] * bj[kk];
            c[i * n + j] += s;
        }
    }
}

template <class S>
void mm_tn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
    // c[k,n] += a[m,k]^T * b[m,n]
    for (int64_t i = 0; i < m; ++i) {
        const S* ai = a + i * k;
        const S* bi = b + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            const S av = ai[kk];
            S* ck = c + kk * n;
            for (int64_t j = 0; j < n; ++j) ck[j] += av * bi[j];
        }
    }
}

template <class S>
void ensure_grad(TensorData<S>& d) {
    if (d.grad.size() != d.value.size()) d.grad.assign(d.value.size(), S(0));
}

}  // namespace detail

/// Reverse-mode tape. Nodes are recorded in construction order (a valid
/// topological order by construction); backward walks the tape once in
/// reverse. Single-owner: not to be shared across execution contexts.
template <class S>
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Tensor<S> record(const char* op, std::initializer_list<Tensor<S>> inputs, Tensor<S> out,
                     std::function<void()> back) {
        bool need = false;
        for (const auto& t : inputs) need = need || t.requires_grad();
        if (need) {
            if (cleared_) throw std::runtime_error("graph lifecycle: record() after clear()");
            out.data_->requires_grad = true;
            out.data_->is_leaf = false;
            tape_.push_back(NodeRec{op, out.data_, std::move(back)});
        }
        return out;
    }

    /// Accumulates d(loss)/dp into every reachable requires_grad tensor.
    /// Repeated calls add up; intermediate grads are reset per call, leaf
    /// grads are not.
    void backward(const Tensor<S>& loss) {
        if (cleared_) throw std::runtime_error("graph lifecycle: backward() after clear()");
        if (loss.numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                        shape_str(loss.shape()));
        for (auto& n : tape_) n.out->grad.assign(n.out->value.size(), S(0));
        detail::ensure_grad(*loss.data_);
        loss.data_->grad[0] += S(1);
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) it->back();
    }

    void clear() {
        tape_.clear();
        cleared_ = true;
    }
    size_t num_nodes() const { return tape_.size(); }

private:
    struct NodeRec {
        const char* op;
        std::shared_ptr<TensorData<S>> out;
        std::function<void()> back;
    };
    std::vector<NodeRec> tape_;
    bool cleared_ = false;
};

// ---------------------------------------------------------------------------
// Operations

template <class S>
Tensor<S> matmul(Graph<S>& g, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<S> out = Tensor<S>::zeros({m, n});
    detail::mm_nn(a.values().data(), b.values().data(), out.values_mut().data(), m, k, n);
    auto ad = a.data_, bd = b.data_, od = out.data_;
    return g.record("matmul", {a, b}, out, [ad, bd, od, m, k, n]() {
        const S* go = od->grad.data();
        if (ad->requires_grad) {
            detail::ensure_grad(*ad);
            detail::mm_nt(go, bd->value.data(), ad->grad.data(), m, n, k);
        }
        if (bd->requires_grad) {
            detail::ensure_grad(*bd);
            detail::mm_tn(ad->value.data(), go, bd->grad.data(), m, k, n);
        }
    });
}

/// out = a * b^T with a: [m,k], b: [n,k].
template <class S>
Tensor<S> matmul_nt(Graph<S>& g, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(1))
        throw std::invalid_argument("matmul_nt shape mismatch: " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()) + "^T");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor<S> out = Tensor<S>::zeros({m, n});
    detail::mm_nt(a.values().data(), b.values().data(), out.values_mut().data(), m, k, n);
    auto ad = a.data_, bd = b.data_, od = out.data_;
    return g.record("matmul_nt", {a, b}, out, [ad, bd, od, m, k, n]() {
        const S* go = od->grad.data();
        if (ad->requires_grad) {
            detail::ensure_grad(*ad);
            detail::mm_nn(go, bd->value.data(), ad->grad.data(), m, n, k);
        }
        if (bd->requires_grad) {
            detail::ensure_grad(*bd);
            detail::mm_tn(go, ad->value.data(), bd->grad.data(), m, n, k);
        }
    });
}

template <class S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + " shape mismatch: " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

template <class S>
Tensor<S> add(Graph<S>& g, const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "add");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i)
        out.values_mut()[i] = a.values()[i] + b.values()[i];
    auto ad = a.data_, bd = b.data_, od = out.data_;
    return g.record("add", {a, b}, out, [ad, bd, od]() {
        for (auto* d : {ad.get(), bd.get()}) {
            if (!d->requires_grad) continue;
            detail::ensure_grad(*d);
            for (size_t i = 0; i < od->grad.size(); ++i) d->grad[i] += od->grad[i];
        }
    });
}

template <class S>
Tensor<S> sub(Graph<S>& g, const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "sub");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i)
        out.values_mut()[i] = a.values()[i] - b.values()[i];
    auto ad = a.data_, bd = b.data_, od = out.data_;
    return g.record("sub", {a, b}, out, [ad, bd, od]() {
        if (ad->requires_grad) {
            detail::ensure_grad(*ad);
            for (size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
        }
        if (bd->requires_grad) {
            detail::ensure_grad(*bd);
            for (size_t i = 0; i < od->grad.size(); ++i) bd->grad[i] -= od->grad[i];
        }
    });
}

template <class S>
Tensor<S> mul(Graph<S>& g, const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "mul");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i)
        out.values_mut()[i] = a.values()[i] * b.values()[i];
    auto ad = a.data_, bd = b.data_, od = out.data_;
    return g.record("mul", {a, b}, out, [ad, bd, od]() {
        if (ad->requires_grad) {
            detail::ensure_grad(*ad);
            for (size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i] * bd->value[i];
        }
        if (bd->requires_grad) {
            detail::ensure_grad(*bd);
            for (size_t i = 0; i < od->grad.size(); ++i) bd->grad[i] += od->grad[i] * ad->value[i];
        }
    });
}

template <class S>
Tensor<S> scale(Graph<S>& g, const Tensor<S>& a, S c) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out.values_mut()[i] = a.values()[i] * c;
    auto ad = a.data_, od = out.data_;
    return g.record("scale", {a}, out, [ad, od, c]() {
        detail::ensure_grad(*ad);
        for (size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i] * c;
    });
}

/// Multiply every row of x [m,n] elementwise by gain [n].
template <class S>
Tensor<S> row_broadcast_mul(Graph<S>& g, const Tensor<S>& x, const Tensor<S>& gain) {
    if (x.shape().size() != 2 || gain.shape().size() != 1 || x.dim(1) != gain.dim(0))
        throw std::invalid_argument("row_broadcast_mul shape mismatch: " + shape_str(x.shape()) +
                                    " vs " + shape_str(gain.shape()));
    const int64_t m = x.dim(0), n = x.dim(1);
    Tensor<S> out = Tensor<S>::zeros({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
            out.values_mut()[i * n + j] = x.values()[i * n + j] * gain.values()[j];
    auto xd = x.data_, gd = gain.data_, od = out.data_;
    return g.record("row_broadcast_mul", {x, gain}, out, [xd, gd, od, m, n]() {
        if (xd->requires_grad) {
            detail::ensure_grad(*xd);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j)
                    xd->grad[i * n + j] += od->grad[i * n + j] * gd->value[j];
        }
        if (gd->requires_grad) {
            detail::ensure_grad(*gd);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j)
                    gd->grad[j] += od->grad[i * n + j] * xd->value[i * n + j];
        }
    });
}

/// Per-row RMS normalization with learned gain: y = x * gain / rms(x_row).
template <class S>
Tensor<S> rms_norm(Graph<S>& g, const Tensor<S>& x, const Tensor<S>& gain, S eps = S(1e-6)) {
    if (x.shape().size() != 2 || gain.shape().size() != 1 || x.dim(1) != gain.dim(0))
        throw std::invalid_argument("rms_norm shape mismatch: " + shape_str(x.shape()) + " vs " +
                                    shape_str(gain.shape()));
    const int64_t m = x.dim(0), n = x.dim(1);
    Tensor<S> out = Tensor<S>::zeros({m, n});
    std::vector<S> inv_rms(size_t(m));
    for (int64_t i = 0; i < m; ++i) {
        S ss = 0;
        for (int64_t j = 0; j < n; ++j) {
            const S v = x.values()[i * n + j];
            ss += v * v;
        }
        const S r = S(1) / std::sqrt(ss / S(n) + eps);
        inv_rms[size_t(i)] = r;
        for (int64_t j = 0; j < n; ++j)
            out.values_mut()[i * n + j] = x.values()[i * n + j] * r * gain.values()[j];
    }
    auto xd = x.data_, gd = gain.data_, od = out.data_;
    return g.record("rms_norm", {x, gain}, out, [xd, gd, od, inv_rms, m, n]() {
        for (int64_t i = 0; i < m; ++i) {
            const S r = inv_rms[size_t(i)];
            if (gd->requires_grad) {
                detail::ensure_grad(*gd);
                for (int64_t j = 0; j < n; ++j)
                    gd->grad[j] += od->grad[i * n + j] * xd->value[i * n + j] * r;
            }
            if (xd->requires_grad) {
                detail::ensure_grad(*xd);
                // dL/dx_k = r*(gy_k - u_k * mean_j(gy_j * u_j)) with u = x*r
                S dot = 0;
                for (int64_t j = 0; j < n; ++j) {
                    const S gy = od->grad[i * n + j] * gd->value[j];
                    dot += gy * xd->value[i * n + j] * r;
                }
                const S mean_dot = dot / S(n);
                for (int64_t j = 0; j < n; ++j) {
                    const S gy = od->grad[i * n + j] * gd->value[j];
                    const S u = xd->value[i * n + j] * r;
                    xd->grad[i * n + j] += r * (gy - u * mean_dot);
                }
            }
        }
    });
}

template <class S>
Tensor<S> silu(Graph<S>& g, const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        const S v = x.values()[i];
        out.values_mut()[i] = v / (S(1) + std::exp(-v));
    }
    auto xd = x.data_, od = out.data_;
    return g.record("silu", {x}, out, [xd, od]() {
        detail::ensure_grad(*xd);
        for (size_t i = 0; i < od->grad.size(); ++i) {
            const S v = xd->value[i];
            const S sig = S(1) / (S(1) + std::exp(-v));
            xd->grad[i] += od->grad[i] * sig * (S(1) + v * (S(1) - sig));
        }
    });
}

/// Row gather from an embedding table: out[i] = table[ids[i]].
template <class S>
Tensor<S> embedding_lookup(Graph<S>& g, const Tensor<S>& table, const std::vector<int32_t>& ids) {
    if (table.shape().size() != 2)
        throw std::invalid_argument("embedding_lookup: table must be 2-d");
    const int64_t v = table.dim(0), d = table.dim(1);
    const int64_t m = int64_t(ids.size());
    Tensor<S> out = Tensor<S>::zeros({m, d});
    for (int64_t i = 0; i < m; ++i) {
        if (ids[size_t(i)] < 0 || ids[size_t(i)] >= v)
            throw std::out_of_range("embedding_lookup: id " + std::to_string(ids[size_t(i)]) +
                                    " out of range [0," + std::to_string(v) + ")");
        const S* src = table.values().data() + int64_t(ids[size_t(i)]) * d;
        std::copy(src, src + d, out.values_mut().data() + i * d);
    }
    auto td = table.data_, od = out.data_;
    auto ids_copy = ids;
    return g.record("embedding_lookup", {table}, out, [td, od, ids_copy, d]() {
        detail::ensure_grad(*td);
        for (size_t i = 0; i < ids_copy.size(); ++i) {
            S* dst = td->grad.data() + int64_t(ids_copy[i]) * d;
            const S* src = od->grad.data() + int64_t(i) * d;
            for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

/// Rotary position encoding applied per head on (even, odd) channel pairs.
template <class S>
Tensor<S> rope(Graph<S>& g, const Tensor<S>& x, const std::vector<int32_t>& positions,
               int64_t n_heads, double base) {
    if (x.shape().size() != 2 || int64_t(positions.size()) != x.dim(0))
        throw std::invalid_argument("rope: positions length must match rows of " +
                                    shape_str(x.shape()));
    const int64_t m = x.dim(0), d = x.dim(1);
    if (d % n_heads != 0 || (d / n_heads) % 2 != 0)
        throw std::invalid_argument("rope: head dim must be even");
    const int64_t dh = d / n_heads;
    Tensor<S> out = Tensor<S>::zeros({m, d});
    std::vector<S> cs(size_t(m * d / 2)), sn(size_t(m * d / 2));
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t h = 0; h < n_heads; ++h) {
            for (int64_t p = 0; p < dh / 2; ++p) {
                const double freq = std::pow(base, -2.0 * double(p) / double(dh));
                const double ang = double(positions[size_t(i)]) * freq;
                const S c = S(std::cos(ang)), s = S(std::sin(ang));
                const int64_t pid = i * (d / 2) + h * (dh / 2) + p;
                cs[size_t(pid)] = c;
                sn[size_t(pid)] = s;
                const int64_t j0 = i * d + h * dh + 2 * p;
                const S x0 = x.values()[j0], x1 = x.values()[j0 + 1];
                out.values_mut()[j0] = x0 * c - x1 * s;
                out.values_mut()[j0 + 1] = x0 * s + x1 * c;
            }
        }
    }
    auto xd = x.data_, od = out.data_;
    return g.record("rope", {x}, out, [xd, od, cs, sn, m, d, dh, n_heads]() {
        detail::ensure_grad(*xd);
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t h = 0; h < n_heads; ++h) {
                for (int64_t p = 0; p < dh / 2; ++p) {
                    const int64_t pid = i * (d / 2) + h * (dh / 2) + p;
                    const S c = cs[size_t(pid)], s = sn[size_t(pid)];
                    const int64_t j0 = i * d + h * dh + 2 * p;
                    const S g0 = od->grad[j0], g1 = od->grad[j0 + 1];
                    xd->grad[j0] += g0 * c + g1 * s;
                    xd->grad[j0 + 1] += -g0 * s + g1 * c;
                }
            }
        }
    });
}

/// Row-wise softmax restricted to positions the mask allows; disallowed
/// positions come out exactly zero. Scores row i uses mask row
/// (row_offset + i) mod mask.dim, so stacked-head inputs [H*L, L] and cached
/// decode slices both work. A queried row with empty support is an error.
template <class S>
Tensor<S> masked_softmax(Graph<S>& g, const Tensor<S>& scores, const AttentionMask& mask,
                         int64_t row_offset = 0) {
    if (scores.shape().size() != 2 || scores.dim(1) != mask.dim)
        throw std::invalid_argument("masked_softmax: scores " + shape_str(scores.shape()) +
                                    " incompatible with mask dim " + std::to_string(mask.dim));
    const int64_t m = scores.dim(0), n = scores.dim(1);
    Tensor<S> out = Tensor<S>::zeros({m, n});
    const S lowest = std::numeric_limits<S>::lowest();
    for (int64_t i = 0; i < m; ++i) {
        const int64_t mr = (row_offset + i) % mask.dim;
        const uint8_t* mrow = mask.bits.data() + mr * mask.dim;
        S mx = lowest;
        bool any = false;
        for (int64_t j = 0; j < n; ++j) {
            if (!mrow[j]) continue;
            any = true;
            mx = std::max(mx, scores.values()[i * n + j]);
        }
        if (!any)
            throw std::runtime_error("masked_softmax: degenerate row " + std::to_string(mr) +
                                     " has no allowed positions");
        S sum = 0;
        for (int64_t j = 0; j < n; ++j) {
            if (!mrow[j]) continue;
            const S e = std::exp(scores.values()[i * n + j] - mx);
            out.values_mut()[i * n + j] = e;
            sum += e;
        }
        const S inv = S(1) / sum;
        for (int64_t j = 0; j < n; ++j)
            if (mrow[j]) out.values_mut()[i * n + j] *= inv;
    }
    auto sd = scores.data_, od = out.data_;
    return g.record("masked_softmax", {scores}, out, [sd, od, m, n]() {
        detail::ensure_grad(*sd);
        for (int64_t i = 0; i < m; ++i) {
            S dot = 0;
            for (int64_t j = 0; j < n; ++j)
                dot += od->grad[i * n + j] * od->value[i * n + j];
            for (int64_t j = 0; j < n; ++j) {
                const S y = od->value[i * n + j];
                sd->grad[i * n + j] += y * (od->grad[i * n + j] - dot);
            }
        }
    });
}

template <class S>
Tensor<S> slice_cols(Graph<S>& g, const Tensor<S>& x, int64_t c0, int64_t c1) {
    if (x.shape().size() != 2 || c0 < 0 || c1 > x.dim(1) || c0 >= c1)
        throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + "," +
                                    std::to_string(c1) + ") for " + shape_str(x.shape()));
    const int64_t m = x.dim(0), n = x.dim(1), w = c1 - c0;
    Tensor<S> out = Tensor<S>::zeros({m, w});
    for (int64_t i = 0; i < m; ++i)
        std::copy(x.values().data() + i * n + c0, x.values().data() + i * n + c1,
                  out.values_mut().data() + i * w);
    auto xd = x.data_, od = out.data_;
    return g.record("slice_cols", {x}, out, [xd, od, m, n, w, c0]() {
        detail::ensure_grad(*xd);
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < w; ++j) xd->grad[i * n + c0 + j] += od->grad[i * w + j];
    });
}

template <class S>
Tensor<S> concat_cols(Graph<S>& g, const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const int64_t m = parts[0].dim(0);
    int64_t total = 0;
    for (const auto& p : parts) {
        if (p.shape().size() != 2 || p.dim(0) != m)
            throw std::invalid_argument("concat_cols: row mismatch");
        total += p.dim(1);
    }
    Tensor<S> out = Tensor<S>::zeros({m, total});
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t w = p.dim(1);
        for (int64_t i = 0; i < m; ++i)
            std::copy(p.values().data() + i * w, p.values().data() + (i + 1) * w,
                      out.values_mut().data() + i * total + off);
        off += w;
    }
    bool need = false;
    for (const auto& p : parts) need = need || p.requires_grad();
    if (!need) return out;
    std::vector<std::shared_ptr<TensorData<S>>> pds;
    for (const auto& p : parts) pds.push_back(p.data_);
    auto od = out.data_;
    Tensor<S> anchor = parts[0];  // any grad-bearing input makes record() fire
    for (const auto& p : parts)
        if (p.requires_grad()) anchor = p;
    return g.record("concat_cols", {anchor}, out, [pds, od, m, total]() {
        int64_t off = 0;
        for (auto& pd : pds) {
            const int64_t w = int64_t(pd->value.size()) / m;
            if (pd->requires_grad) {
                detail::ensure_grad(*pd);
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < w; ++j)
                        pd->grad[i * w + j] += od->grad[i * total + off + j];
            }
            off += w;
        }
    });
}

template <class S>
Tensor<S> concat_rows(Graph<S>& g, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(1))
        throw std::invalid_argument("concat_rows: col mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const int64_t n = a.dim(1), ma = a.dim(0), mb = b.dim(0);
    Tensor<S> out = Tensor<S>::zeros({ma + mb, n});
    std::copy(a.values().begin(), a.values().end(), out.values_mut().begin());
    std::copy(b.values().begin(), b.values().end(), out.values_mut().begin() + ma * n);
    auto ad = a.data_, bd = b.data_, od = out.data_;
    return g.record("concat_rows", {a, b}, out, [ad, bd, od, ma, mb, n]() {
        if (ad->requires_grad) {
            detail::ensure_grad(*ad);
            for (int64_t i = 0; i < ma * n; ++i) ad->grad[i] += od->grad[i];
        }
        if (bd->requires_grad) {
            detail::ensure_grad(*bd);
            for (int64_t i = 0; i < mb * n; ++i) bd->grad[i] += od->grad[ma * n + i];
        }
    });
}

template <class S>
Tensor<S> gather_rows(Graph<S>& g, const Tensor<S>& x, const std::vector<int64_t>& rows) {
    if (x.shape().size() != 2) throw std::invalid_argument("gather_rows: input must be 2-d");
    const int64_t n = x.dim(1), k = int64_t(rows.size());
    Tensor<S> out = Tensor<S>::zeros({k, n});
    for (int64_t i = 0; i < k; ++i) {
        if (rows[size_t(i)] < 0 || rows[size_t(i)] >= x.dim(0))
            throw std::out_of_range("gather_rows: row " + std::to_string(rows[size_t(i)]) +
                                    " out of range");
        std::copy(x.values().data() + rows[size_t(i)] * n,
                  x.values().data() + (rows[size_t(i)] + 1) * n, out.values_mut().data() + i * n);
    }
    auto xd = x.data_, od = out.data_;
    auto rows_copy = rows;
    return g.record("gather_rows", {x}, out, [xd, od, rows_copy, n]() {
        detail::ensure_grad(*xd);
        for (size_t i = 0; i < rows_copy.size(); ++i)
            for (int64_t j = 0; j < n; ++j)
                xd->grad[rows_copy[i] * n + j] += od->grad[int64_t(i) * n + j];
    });
}

/// Per-row negative log-likelihood of the target class, numerically stable.
template <class S>
Tensor<S> nll_rows(Graph<S>& g, const Tensor<S>& logits, const std::vector<int32_t>& targets) {
    if (logits.shape().size() != 2 || int64_t(targets.size()) != logits.dim(0))
        throw std::invalid_argument("nll_rows: need one target per row of " +
                                    shape_str(logits.shape()));
    const int64_t m = logits.dim(0), v = logits.dim(1);
    Tensor<S> out = Tensor<S>::zeros({m});
    std::vector<S> probs(size_t(m * v));  // saved for backward
    for (int64_t i = 0; i < m; ++i) {
        const S* z = logits.values().data() + i * v;
        if (targets[size_t(i)] < 0 || targets[size_t(i)] >= v)
            throw std::out_of_range("nll_rows: target " + std::to_string(targets[size_t(i)]) +
                                    " out of range [0," + std::to_string(v) + ")");
        S mx = z[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, z[j]);
        S sum = 0;
        for (int64_t j = 0; j < v; ++j) {
            const S e = std::exp(z[j] - mx);
            probs[size_t(i * v + j)] = e;
            sum += e;
        }
        const S inv = S(1) / sum;
        for (int64_t j = 0; j < v; ++j) probs[size_t(i * v + j)] *= inv;
        out.values_mut()[i] = std::log(sum) + mx - z[targets[size_t(i)]];
    }
    auto ld = logits.data_, od = out.data_;
    auto tgt = targets;
    return g.record("nll_rows", {logits}, out, [ld, od, probs, tgt, m, v]() {
        detail::ensure_grad(*ld);
        for (int64_t i = 0; i < m; ++i) {
            const S go = od->grad[i];
            for (int64_t j = 0; j < v; ++j) ld->grad[i * v + j] += go * probs[size_t(i * v + j)];
            ld->grad[i * v + tgt[size_t(i)]] -= go;
        }
    });
}

/// Shannon entropy (nats) of softmax(logits) per row.
template <class S>
Tensor<S> entropy_rows(Graph<S>& g, const Tensor<S>& logits) {
    if (logits.shape().size() != 2) throw std::invalid_argument("entropy_rows: input must be 2-d");
    const int64_t m = logits.dim(0), v = logits.dim(1);
    Tensor<S> out = Tensor<S>::zeros({m});
    std::vector<S> probs(size_t(m * v));
    for (int64_t i = 0; i < m; ++i) {
        const S* z = logits.values().data() + i * v;
        S mx = z[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, z[j]);
        S sum = 0;
        for (int64_t j = 0; j < v; ++j) {
            const S e = std::exp(z[j] - mx);
            probs[size_t(i * v + j)] = e;
            sum += e;
        }
        const S lse = std::log(sum) + mx;
        S h = 0;
        const S inv = S(1) / sum;
        for (int64_t j = 0; j < v; ++j) {
            const S p = probs[size_t(i * v + j)] * inv;
            probs[size_t(i * v + j)] = p;
            h -= p * (z[j] - lse);
        }
        out.values_mut()[i] = h;
    }
    auto ld = logits.data_, od = out.data_;
    return g.record("entropy_rows", {logits}, out, [ld, od, probs, m, v]() {
        detail::ensure_grad(*ld);
        for (int64_t i = 0; i < m; ++i) {
            const S go = od->grad[i];
            const S h = od->value[i];
            for (int64_t j = 0; j < v; ++j) {
                const S p = probs[size_t(i * v + j)];
                const S lp = p > S(0) ? std::log(p) : S(0);
                ld->grad[i * v + j] += go * (-p * (lp + h));
            }
        }
    });
}

/// Scalar dot product with a constant weight vector.
template <class S>
Tensor<S> weighted_sum(Graph<S>& g, const Tensor<S>& x, const std::vector<S>& weights) {
    if (int64_t(weights.size()) != x.numel())
        throw std::invalid_argument("weighted_sum: weight length mismatch");
    S s = 0;
    for (int64_t i = 0; i < x.numel(); ++i) s += x.values()[i] * weights[size_t(i)];
    Tensor<S> out = Tensor<S>::scalar(s);
    auto xd = x.data_, od = out.data_;
    auto w = weights;
    return g.record("weighted_sum", {x}, out, [xd, od, w]() {
        detail::ensure_grad(*xd);
        const S go = od->grad[0];
        for (size_t i = 0; i < w.size(); ++i) xd->grad[i] += go * w[i];
    });
}

template <class S>
Tensor<S> sum_all(Graph<S>& g, const Tensor<S>& x) {
    S s = 0;
    for (int64_t i = 0; i < x.numel(); ++i) s += x.values()[i];
    Tensor<S> out = Tensor<S>::scalar(s);
    auto xd = x.data_, od = out.data_;
    return g.record("sum_all", {x}, out, [xd, od]() {
        detail::ensure_grad(*xd);
        const S go = od->grad[0];
        for (auto& gx : xd->grad) gx += go;
    });
}

template <class S>
Tensor<S> mean_all(Graph<S>& g, const Tensor<S>& x) {
    if (x.numel() == 0) throw std::invalid_argument("mean_all: empty tensor");
    return scale(g, sum_all(g, x), S(1) / S(x.numel()));
}

/// -log(sigmoid(x)) == softplus(-x), stable for large |x|.
template <class S>
Tensor<S> neg_log_sigmoid(Graph<S>& g, const Tensor<S>& x) {
    if (x.numel() != 1) throw std::invalid_argument("neg_log_sigmoid: input must be scalar");
    const S v = x.values()[0];
    const S nx = -v;
    const S val = nx > S(0) ? nx + std::log1p(std::exp(-nx)) : std::log1p(std::exp(nx));
    Tensor<S> out = Tensor<S>::scalar(val);
    auto xd = x.data_, od = out.data_;
    return g.record("neg_log_sigmoid", {x}, out, [xd, od, v]() {
        detail::ensure_grad(*xd);
        const S sig_neg = S(1) / (S(1) + std::exp(v));  // sigmoid(-x)
        xd->grad[0] += od->grad[0] * -sig_neg;
    });
}

}  // namespace bdlm
