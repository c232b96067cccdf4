#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "bdlm/mask.hpp"
#include "bdlm/noise.hpp"
#include "bdlm/tensor.hpp"

namespace bdlm {

struct ModelConfig {
    int64_t d_model = 128;
    int64_t n_layers = 4;
    int64_t n_heads = 4;
    int64_t d_ff = 512;
    int64_t max_len = 512;
    int32_t vocab = Vocab::size;
    double rope_base = 10000.0;

    void validate() const {
        if (d_model % n_heads != 0)
            throw std::invalid_argument("model: d_model must be divisible by n_heads");
        if ((d_model / n_heads) % 2 != 0)
            throw std::invalid_argument("model: head dim must be even for rotary encoding");
        if (d_model < 1 || n_layers < 1 || d_ff < 1 || max_len < 1 || vocab < 2)
            throw std::invalid_argument("model: all dimensions must be positive");
    }
};

/// Gaussian noise injected into MASK-token embedding outputs for the first
/// active_steps optimizer steps. Keeps the MASK row norm significant when a
/// conversion starts from weights that never exercised it.
struct StabilizerConfig {
    double sigma = 0.02;
    int64_t active_steps = 200;
};

/// Named parameter set. Order is fixed at construction and defines the
/// checkpoint payload order.
template <class S>
struct DenoiserParams {
    std::vector<std::pair<std::string, Tensor<S>>> items;

    Tensor<S>& at(const std::string& name) {
        for (auto& [n, t] : items)
            if (n == name) return t;
        throw std::out_of_range("params: no tensor named " + name);
    }
    const Tensor<S>& at(const std::string& name) const {
        for (const auto& [n, t] : items)
            if (n == name) return t;
        throw std::out_of_range("params: no tensor named " + name);
    }
    bool has(const std::string& name) const {
        for (const auto& [n, t] : items)
            if (n == name) return true;
        return false;
    }
    void zero_grads() {
        for (auto& [n, t] : items) t.zero_grad();
    }
    void set_requires_grad(bool v) {
        for (auto& [n, t] : items) t.data_->requires_grad = v;
    }
    int64_t numel() const {
        int64_t n = 0;
        for (const auto& [name, t] : items) n += t.numel();
        return n;
    }
    DenoiserParams clone() const {
        DenoiserParams out;
        for (const auto& [n, t] : items) {
            Tensor<S> c = Tensor<S>::from(t.shape(), t.values(), t.requires_grad());
            out.items.emplace_back(n, c);
        }
        return out;
    }
};

template <class S>
DenoiserParams<S> init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    DenoiserParams<S> p;
    Rng rng(split_seed(seed, 0x7eb5));
    const double sd = 0.02;
    auto w = [&](const std::string& name, std::vector<int64_t> shape) {
        p.items.emplace_back(name, Tensor<S>::randn(std::move(shape), rng, sd, true));
    };
    auto gain = [&](const std::string& name, int64_t n) {
        p.items.emplace_back(name, Tensor<S>::filled({n}, S(1), true));
    };
    w("embed.weight", {cfg.vocab, cfg.d_model});  // also the tied output head
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        gain(pre + "attn_norm.gain", cfg.d_model);
        w(pre + "attn.wq", {cfg.d_model, cfg.d_model});
        w(pre + "attn.wk", {cfg.d_model, cfg.d_model});
        w(pre + "attn.wv", {cfg.d_model, cfg.d_model});
        w(pre + "attn.wo", {cfg.d_model, cfg.d_model});
        gain(pre + "ffn_norm.gain", cfg.d_model);
        w(pre + "ffn.w1", {cfg.d_ff, cfg.d_model});
        w(pre + "ffn.w2", {cfg.d_model, cfg.d_ff});
    }
    gain("final_norm.gain", cfg.d_model);
    return p;
}

/// Per-layer key/value rows for finalized decode content. Keys are stored
/// post-rotation so appended blocks never need recomputing.
template <class S>
struct KvCache {
    int64_t len = 0;
    std::vector<std::vector<S>> k_rows;
    std::vector<std::vector<S>> v_rows;

    void reset(int64_t n_layers) {
        len = 0;
        k_rows.assign(size_t(n_layers), {});
        v_rows.assign(size_t(n_layers), {});
    }
};

template <class S>
struct StackResult {
    Tensor<S> hidden;                 // [m, d] after the final norm
    std::vector<Tensor<S>> k_layers;  // per layer, segment-only, post-rope
    std::vector<Tensor<S>> v_layers;
};

/// Transformer trunk over one token segment. When `cache` is non-null its
/// rows are prepended to the attention keys/values of every layer. Scores
/// row i consults mask row (mask_row_offset + i).
template <class S>
StackResult<S> transformer_stack(Graph<S>& g, const DenoiserParams<S>& p, const ModelConfig& cfg,
                                 const std::vector<TokenId>& tokens,
                                 const std::vector<int32_t>& positions, const AttentionMask& mask,
                                 int64_t mask_row_offset, const KvCache<S>* cache,
                                 const Tensor<S>* embed_noise) {
    const int64_t m = int64_t(tokens.size());
    const int64_t d = cfg.d_model, H = cfg.n_heads, dh = d / H;
    const int64_t ctx = cache ? cache->len : 0;
    if (mask.dim != ctx + m)
        throw std::invalid_argument("stack: mask dim " + std::to_string(mask.dim) +
                                    " does not match context " + std::to_string(ctx) +
                                    " + segment " + std::to_string(m));

    Tensor<S> x = embedding_lookup(g, p.at("embed.weight"), tokens);
    if (embed_noise) x = add(g, x, *embed_noise);

    StackResult<S> res;
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        Tensor<S> h = rms_norm(g, x, p.at(pre + "attn_norm.gain"));
        Tensor<S> q = rope(g, matmul_nt(g, h, p.at(pre + "attn.wq")), positions, H, cfg.rope_base);
        Tensor<S> k = rope(g, matmul_nt(g, h, p.at(pre + "attn.wk")), positions, H, cfg.rope_base);
        Tensor<S> v = matmul_nt(g, h, p.at(pre + "attn.wv"));
        res.k_layers.push_back(k);
        res.v_layers.push_back(v);

        Tensor<S> k_all = k, v_all = v;
        if (ctx > 0) {
            k_all = concat_rows(g, Tensor<S>::from({ctx, d}, cache->k_rows[size_t(l)]), k);
            v_all = concat_rows(g, Tensor<S>::from({ctx, d}, cache->v_rows[size_t(l)]), v);
        }

        std::vector<Tensor<S>> heads;
        heads.reserve(size_t(H));
        const S inv_sqrt = S(1.0 / std::sqrt(double(dh)));
        for (int64_t hid = 0; hid < H; ++hid) {
            Tensor<S> qh = slice_cols(g, q, hid * dh, (hid + 1) * dh);
            Tensor<S> kh = slice_cols(g, k_all, hid * dh, (hid + 1) * dh);
            Tensor<S> vh = slice_cols(g, v_all, hid * dh, (hid + 1) * dh);
            Tensor<S> scores = scale(g, matmul_nt(g, qh, kh), inv_sqrt);
            Tensor<S> probs = masked_softmax(g, scores, mask, mask_row_offset);
            heads.push_back(matmul(g, probs, vh));
        }
        Tensor<S> attn = matmul_nt(g, concat_cols(g, heads), p.at(pre + "attn.wo"));
        x = add(g, x, attn);

        Tensor<S> h2 = rms_norm(g, x, p.at(pre + "ffn_norm.gain"));
        Tensor<S> f =
            matmul_nt(g, silu(g, matmul_nt(g, h2, p.at(pre + "ffn.w1"))), p.at(pre + "ffn.w2"));
        x = add(g, x, f);
    }
    res.hidden = rms_norm(g, x, p.at("final_norm.gain"));
    return res;
}

template <class S>
void append_to_cache(KvCache<S>& cache, const StackResult<S>& seg) {
    for (size_t l = 0; l < seg.k_layers.size(); ++l) {
        const auto& kv = seg.k_layers[l].values();
        const auto& vv = seg.v_layers[l].values();
        cache.k_rows[l].insert(cache.k_rows[l].end(), kv.begin(), kv.end());
        cache.v_rows[l].insert(cache.v_rows[l].end(), vv.begin(), vv.end());
    }
    cache.len += seg.k_layers[0].dim(0);
}

template <class S>
struct RowLogits {
    Tensor<S> logits;                 // [#masked, vocab]
    std::vector<int64_t> positions;   // masked column indices within the row
};

namespace detail_model {

template <class S>
Tensor<S> make_embed_noise(const NoisedRow& row, int64_t extra_clean, int64_t d, double sigma,
                           uint64_t seed) {
    const int64_t m = int64_t(row.noisy.size()) + extra_clean;
    Tensor<S> noise = Tensor<S>::zeros({m, d});
    Rng rng(seed);
    for (size_t i = 0; i < row.noisy.size(); ++i) {
        if (row.noisy[i] != Vocab::MASK) continue;
        for (int64_t j = 0; j < d; ++j)
            noise.values_mut()[int64_t(i) * d + j] = S(rng.normal(0.0, sigma));
    }
    return noise;
}

inline std::vector<int32_t> train_positions(int64_t L, bool doubled) {
    std::vector<int32_t> pos;
    pos.reserve(size_t(doubled ? 2 * L : L));
    for (int64_t rep = 0; rep < (doubled ? 2 : 1); ++rep)
        for (int64_t i = 0; i < L; ++i) pos.push_back(int32_t(i));
    return pos;
}

}  // namespace detail_model

/// Forward pass over the concatenated [x_t; x_0] row under the 2Lx2L
/// block-diffusion mask; logits are produced for every masked x_t position.
template <class S>
RowLogits<S> forward_train_row(Graph<S>& g, const DenoiserParams<S>& p, const ModelConfig& cfg,
                               const NoisedRow& row, const AttentionMask& mask,
                               const StabilizerConfig* stab = nullptr, int64_t step = 0,
                               uint64_t noise_seed = 0) {
    const int64_t L = row.layout.total_len;
    if (mask.kind != MaskKind::bdlm_train || mask.dim != 2 * L)
        throw std::invalid_argument("forward_train: mask/layout mismatch (dim " +
                                    std::to_string(mask.dim) + ", row length " +
                                    std::to_string(L) + ")");
    if (L > cfg.max_len)
        throw std::invalid_argument("forward_train: row length exceeds model max_len");

    std::vector<TokenId> tokens;
    tokens.reserve(size_t(2 * L));
    tokens.insert(tokens.end(), row.noisy.begin(), row.noisy.end());
    tokens.insert(tokens.end(), row.clean.begin(), row.clean.end());

    Tensor<S> noise;
    const bool use_noise = stab && stab->sigma > 0.0 && step < stab->active_steps;
    if (use_noise)
        noise = detail_model::make_embed_noise<S>(row, L, cfg.d_model, stab->sigma, noise_seed);

    auto pos = detail_model::train_positions(L, true);
    auto stack = transformer_stack(g, p, cfg, tokens, pos, mask, 0, nullptr,
                                   use_noise ? &noise : nullptr);

    RowLogits<S> out;
    for (size_t i = 0; i < row.is_masked.size(); ++i)
        if (row.is_masked[i]) out.positions.push_back(int64_t(i));
    Tensor<S> sel = gather_rows(g, stack.hidden, out.positions);
    out.logits = matmul_nt(g, sel, p.at("embed.weight"));
    return out;
}

/// Single-sequence bidirectional forward over x_t under the LxL document
/// mask; logits at masked positions.
template <class S>
RowLogits<S> forward_mdlm_row(Graph<S>& g, const DenoiserParams<S>& p, const ModelConfig& cfg,
                              const NoisedRow& row, const AttentionMask& mask,
                              const StabilizerConfig* stab = nullptr, int64_t step = 0,
                              uint64_t noise_seed = 0) {
    const int64_t L = row.layout.total_len;
    if (mask.kind != MaskKind::mdlm_train || mask.dim != L)
        throw std::invalid_argument("forward_mdlm: mask/layout mismatch (dim " +
                                    std::to_string(mask.dim) + ", row length " +
                                    std::to_string(L) + ")");
    if (L > cfg.max_len)
        throw std::invalid_argument("forward_mdlm: row length exceeds model max_len");

    Tensor<S> noise;
    const bool use_noise = stab && stab->sigma > 0.0 && step < stab->active_steps;
    if (use_noise)
        noise = detail_model::make_embed_noise<S>(row, 0, cfg.d_model, stab->sigma, noise_seed);

    auto pos = detail_model::train_positions(L, false);
    auto stack = transformer_stack(g, p, cfg, row.noisy, pos, mask, 0, nullptr,
                                   use_noise ? &noise : nullptr);

    RowLogits<S> out;
    for (size_t i = 0; i < row.is_masked.size(); ++i)
        if (row.is_masked[i]) out.positions.push_back(int64_t(i));
    Tensor<S> sel = gather_rows(g, stack.hidden, out.positions);
    out.logits = matmul_nt(g, sel, p.at("embed.weight"));
    return out;
}

/// Batch wrappers: one mask per row derived from the row layout.
template <class S>
std::vector<RowLogits<S>> forward_train_batch(Graph<S>& g, const DenoiserParams<S>& p,
                                              const ModelConfig& cfg, const NoisedBatch& batch,
                                              const StabilizerConfig* stab = nullptr,
                                              int64_t step = 0, uint64_t noise_seed = 0) {
    std::vector<RowLogits<S>> out;
    out.reserve(batch.rows.size());
    for (size_t r = 0; r < batch.rows.size(); ++r) {
        AttentionMask mask = build_bdlm_mask(batch.rows[r].layout);
        out.push_back(forward_train_row(g, p, cfg, batch.rows[r], mask, stab, step,
                                        split_seed(noise_seed, r)));
    }
    return out;
}

template <class S>
std::vector<RowLogits<S>> forward_mdlm_batch(Graph<S>& g, const DenoiserParams<S>& p,
                                             const ModelConfig& cfg, const NoisedBatch& batch,
                                             const StabilizerConfig* stab = nullptr,
                                             int64_t step = 0, uint64_t noise_seed = 0) {
    std::vector<RowLogits<S>> out;
    out.reserve(batch.rows.size());
    for (size_t r = 0; r < batch.rows.size(); ++r) {
        AttentionMask mask = build_mdlm_mask(batch.rows[r].layout);
        out.push_back(forward_mdlm_row(g, p, cfg, batch.rows[r], mask, stab, step,
                                       split_seed(noise_seed, r)));
    }
    return out;
}

}  // namespace bdlm
