#pragma once

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "bdlm/model.hpp"
#include "bdlm/trainer.hpp"

namespace bdlm {

struct DecodeConfig {
    int64_t block_size = 32;
    double threshold = 0.95;
    int64_t fallback_count = 1;
    double temperature = 0.0;
    int64_t max_new_tokens = 128;
    uint64_t seed = 0;
    bool use_cache = true;

    void validate() const {
        if (!(threshold > 0.0 && threshold <= 1.0))
            throw std::invalid_argument("decode: threshold must lie in (0,1]");
        if (fallback_count < 1) throw std::invalid_argument("decode: fallback_count must be >= 1");
        if (block_size < 1) throw std::invalid_argument("decode: block_size must be >= 1");
        if (temperature < 0.0) throw std::invalid_argument("decode: temperature must be >= 0");
        if (max_new_tokens < 0) throw std::invalid_argument("decode: max_new_tokens must be >= 0");
    }
};

struct DecodeMetrics {
    int64_t generated = 0;       // finalized positions, including any tail after EOS
    int64_t forward_passes = 0;  // refinement passes (cache maintenance not counted)
    double tpf = 0.0;
    double tps = 0.0;
    double wall_seconds = 0.0;
    std::vector<int64_t> steps_per_block;
    std::vector<int64_t> accepted_history;

    std::string to_json() const;
};

/// Per-pass logits record for cache-vs-recompute comparisons.
struct DecodeTrace {
    struct Pass {
        std::vector<int64_t> positions;  // absolute positions queried
        std::vector<double> logits;      // row-major [#positions, vocab]
    };
    std::vector<Pass> passes;
};

template <class S>
struct DecodeState {
    std::vector<TokenId> prompt;  // padded to the block grid
    int64_t raw_prompt_len = 0;
    std::vector<TokenId> finalized;
    std::vector<TokenId> block;
    std::vector<uint8_t> filled;
    int64_t finalized_blocks = 0;
    int64_t forward_passes = 0;
    std::vector<int64_t> accepted_history;
    std::vector<int64_t> steps_per_block;
    KvCache<S> cache;
    bool cache_ready = false;

    int64_t block_start() const { return int64_t(prompt.size() + finalized.size()); }
    int64_t unfilled_count() const {
        int64_t n = 0;
        for (auto f : filled) n += f ? 0 : 1;
        return n;
    }
};

namespace detail_decode {

/// Square mask over [context | segment]: context rows are block-causal on the
/// grid, segment rows attend everywhere. Equals build_decode_mask whenever
/// the context length is grid-aligned.
inline AttentionMask open_block_mask(int64_t ctx, int64_t seg, int64_t grid) {
    AttentionMask m;
    m.dim = ctx + seg;
    m.kind = MaskKind::decode;
    m.block_size = grid;
    m.bits.assign(size_t(m.dim) * m.dim, 0);
    for (int64_t i = 0; i < ctx; ++i) {
        const int64_t hi = std::min(ctx, (i / grid + 1) * grid);
        for (int64_t j = 0; j < hi; ++j) m.set(i, j, true);
    }
    for (int64_t i = ctx; i < m.dim; ++i)
        for (int64_t j = 0; j < m.dim; ++j) m.set(i, j, true);
    return m;
}

inline std::vector<int32_t> iota_positions(int64_t start, int64_t n) {
    std::vector<int32_t> out;
    out.reserve(size_t(n));
    for (int64_t i = 0; i < n; ++i) out.push_back(int32_t(start + i));
    return out;
}

struct Candidate {
    int64_t local_pos = 0;
    TokenId token = 0;
    double confidence = 0.0;
};

/// Candidate for one logit row. Temperature 0 takes the argmax with its
/// untempered probability; otherwise a sample from the tempered distribution
/// with the sampled token's tempered probability.
template <class S>
Candidate pick_candidate(const S* logits, int64_t v, double temperature, Rng& rng) {
    Candidate c;
    double mx = double(logits[0]);
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, double(logits[j]));
    if (temperature == 0.0) {
        int64_t best = 0;
        for (int64_t j = 1; j < v; ++j)
            if (double(logits[j]) > double(logits[best])) best = j;
        double denom = 0.0;
        for (int64_t j = 0; j < v; ++j) denom += std::exp(double(logits[j]) - mx);
        c.local_pos = 0;
        c.token = TokenId(best);
        c.confidence = std::exp(double(logits[best]) - mx) / denom;
        return c;
    }
    double denom = 0.0;
    for (int64_t j = 0; j < v; ++j) denom += std::exp((double(logits[j]) - mx) / temperature);
    const double u = rng.uniform() * denom;
    double acc = 0.0;
    int64_t pick = v - 1;
    for (int64_t j = 0; j < v; ++j) {
        acc += std::exp((double(logits[j]) - mx) / temperature);
        if (u < acc) {
            pick = j;
            break;
        }
    }
    c.token = TokenId(pick);
    c.confidence = std::exp((double(logits[pick]) - mx) / temperature) / denom;
    return c;
}

}  // namespace detail_decode

/// One refinement pass over the open block: compute logits at every unfilled
/// position, accept all candidates above the confidence threshold, and top
/// up to fallback_count accepted tokens by confidence when too few qualify.
template <class S>
void refine_step(const DenoiserParams<S>& params, const ModelConfig& mcfg, DecodeState<S>& st,
                 const DecodeConfig& cfg, Rng& rng, DecodeTrace* trace = nullptr) {
    const int64_t seg = int64_t(st.block.size());
    if (st.unfilled_count() == 0)
        throw std::invalid_argument("refine_step: block has no unfilled positions");
    detail_trainer::NoGradGuard<S> guard(params);
    Graph<S> g;

    std::vector<int64_t> local_unfilled;
    for (int64_t i = 0; i < seg; ++i)
        if (!st.filled[size_t(i)]) local_unfilled.push_back(i);

    Tensor<S> logits;
    if (cfg.use_cache) {
        if (!st.cache_ready) {
            st.cache.reset(mcfg.n_layers);
            if (!st.prompt.empty()) {
                // Prompt rows are block-causal: context rule with no open block.
                AttentionMask pmask = detail_decode::open_block_mask(int64_t(st.prompt.size()), 0,
                                                                     cfg.block_size);
                auto stack = transformer_stack(
                    g, params, mcfg, st.prompt,
                    detail_decode::iota_positions(0, int64_t(st.prompt.size())), pmask, 0,
                    nullptr, nullptr);
                append_to_cache(st.cache, stack);
            }
            st.cache_ready = true;
        }
        AttentionMask mask = detail_decode::open_block_mask(st.cache.len, seg, cfg.block_size);
        auto stack = transformer_stack(g, params, mcfg, st.block,
                                       detail_decode::iota_positions(st.block_start(), seg), mask,
                                       st.cache.len, &st.cache, nullptr);
        Tensor<S> sel = gather_rows(g, stack.hidden, local_unfilled);
        logits = matmul_nt(g, sel, params.at("embed.weight"));
    } else {
        std::vector<TokenId> tokens = st.prompt;
        tokens.insert(tokens.end(), st.finalized.begin(), st.finalized.end());
        tokens.insert(tokens.end(), st.block.begin(), st.block.end());
        const int64_t ctx = int64_t(tokens.size()) - seg;
        AttentionMask mask = detail_decode::open_block_mask(ctx, seg, cfg.block_size);
        auto stack = transformer_stack(g, params, mcfg, tokens,
                                       detail_decode::iota_positions(0, int64_t(tokens.size())),
                                       mask, 0, nullptr, nullptr);
        std::vector<int64_t> abs_rows;
        for (int64_t p : local_unfilled) abs_rows.push_back(ctx + p);
        Tensor<S> sel = gather_rows(g, stack.hidden, abs_rows);
        logits = matmul_nt(g, sel, params.at("embed.weight"));
    }

    if (trace) {
        DecodeTrace::Pass pass;
        for (int64_t p : local_unfilled) pass.positions.push_back(st.block_start() + p);
        pass.logits.assign(logits.values().begin(), logits.values().end());
        trace->passes.push_back(std::move(pass));
    }

    const int64_t v = logits.dim(1);
    std::vector<detail_decode::Candidate> cands;
    for (size_t i = 0; i < local_unfilled.size(); ++i) {
        auto c = detail_decode::pick_candidate(logits.values().data() + int64_t(i) * v, v,
                                               cfg.temperature, rng);
        c.local_pos = local_unfilled[i];
        cands.push_back(c);
    }

    std::vector<size_t> accepted;
    for (size_t i = 0; i < cands.size(); ++i)
        if (cands[i].confidence > cfg.threshold) accepted.push_back(i);
    if (int64_t(accepted.size()) < cfg.fallback_count) {
        std::vector<size_t> rest;
        for (size_t i = 0; i < cands.size(); ++i)
            if (cands[i].confidence <= cfg.threshold) rest.push_back(i);
        std::sort(rest.begin(), rest.end(), [&](size_t a, size_t b) {
            if (cands[a].confidence != cands[b].confidence)
                return cands[a].confidence > cands[b].confidence;
            return cands[a].local_pos < cands[b].local_pos;
        });
        const int64_t need = std::min<int64_t>(cfg.fallback_count - int64_t(accepted.size()),
                                               int64_t(rest.size()));
        for (int64_t i = 0; i < need; ++i) accepted.push_back(rest[size_t(i)]);
    }

    for (size_t idx : accepted) {
        st.block[size_t(cands[idx].local_pos)] = cands[idx].token;
        st.filled[size_t(cands[idx].local_pos)] = 1;
    }
    st.forward_passes += 1;
    st.accepted_history.push_back(int64_t(accepted.size()));
}

template <class S>
struct GenerateResult {
    std::vector<TokenId> tokens;  // truncated after the first EOS
    DecodeMetrics metrics;
};

/// Block-wise generation: refine the open block until full, finalize it into
/// the cache, continue until EOS lands in a finalized block or the budget is
/// spent. The prompt is right-padded to the block grid so decode geometry
/// matches the pair-row training layout.
template <class S>
GenerateResult<S> generate(const DenoiserParams<S>& params, const ModelConfig& mcfg,
                           const std::vector<TokenId>& prompt, const DecodeConfig& cfg,
                           DecodeTrace* trace = nullptr) {
    cfg.validate();
    const int64_t padded = padded_prompt_len(int64_t(prompt.size()), cfg.block_size);
    if (padded + cfg.max_new_tokens > mcfg.max_len)
        throw std::invalid_argument("generate: padded prompt " + std::to_string(padded) +
                                    " + max_new_tokens " + std::to_string(cfg.max_new_tokens) +
                                    " exceeds model max_len " + std::to_string(mcfg.max_len));
    GenerateResult<S> res;
    if (cfg.max_new_tokens == 0) return res;

    const auto t0 = std::chrono::steady_clock::now();
    DecodeState<S> st;
    st.prompt = prompt;
    st.prompt.resize(size_t(padded), Vocab::PAD);
    st.raw_prompt_len = int64_t(prompt.size());
    Rng rng(split_seed(cfg.seed, 0xdec0de));

    int64_t budget = cfg.max_new_tokens;
    bool saw_eos = false;
    while (budget > 0 && !saw_eos) {
        const int64_t len = std::min(cfg.block_size, budget);
        st.block.assign(size_t(len), Vocab::MASK);
        st.filled.assign(size_t(len), 0);
        int64_t steps = 0;
        while (st.unfilled_count() > 0) {
            refine_step(params, mcfg, st, cfg, rng, trace);
            ++steps;
        }
        if (cfg.use_cache) {  // cache maintenance pass over the closed block
            detail_trainer::NoGradGuard<S> guard(params);
            Graph<S> g;
            AttentionMask mask = detail_decode::open_block_mask(st.cache.len, len, cfg.block_size);
            auto stack = transformer_stack(g, params, mcfg, st.block,
                                           detail_decode::iota_positions(st.block_start(), len),
                                           mask, st.cache.len, &st.cache, nullptr);
            append_to_cache(st.cache, stack);
        }
        for (TokenId t : st.block) saw_eos = saw_eos || t == Vocab::EOS;
        st.finalized.insert(st.finalized.end(), st.block.begin(), st.block.end());
        st.finalized_blocks += 1;
        st.steps_per_block.push_back(steps);
        budget -= len;
    }

    res.tokens = st.finalized;
    for (size_t i = 0; i < res.tokens.size(); ++i) {
        if (res.tokens[i] == Vocab::EOS) {
            res.tokens.resize(i + 1);
            break;
        }
    }
    res.metrics.generated = int64_t(st.finalized.size());
    res.metrics.forward_passes = st.forward_passes;
    res.metrics.tpf = st.forward_passes > 0
                          ? double(res.metrics.generated) / double(st.forward_passes)
                          : 0.0;
    res.metrics.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.metrics.tps = res.metrics.wall_seconds > 0.0
                          ? double(res.metrics.generated) / res.metrics.wall_seconds
                          : 0.0;
    res.metrics.steps_per_block = st.steps_per_block;
    res.metrics.accepted_history = st.accepted_history;
    return res;
}

struct CacheEquivalenceReport {
    bool tokens_equal = false;
    double max_logit_divergence = 0.0;
    DecodeMetrics cached;
    DecodeMetrics cacheless;
};

/// Runs the same deterministic generation with and without the KV cache and
/// reports token equality plus the largest logit gap across matching passes.
template <class S>
CacheEquivalenceReport decode_with_and_without_cache(const DenoiserParams<S>& params,
                                                     const ModelConfig& mcfg,
                                                     const std::vector<TokenId>& prompt,
                                                     DecodeConfig cfg) {
    if (cfg.temperature != 0.0)
        throw std::invalid_argument("cache equivalence: requires temperature 0");
    DecodeTrace trace_on, trace_off;
    cfg.use_cache = true;
    auto with_cache = generate(params, mcfg, prompt, cfg, &trace_on);
    cfg.use_cache = false;
    auto without_cache = generate(params, mcfg, prompt, cfg, &trace_off);

    CacheEquivalenceReport rep;
    rep.tokens_equal = with_cache.tokens == without_cache.tokens;
    rep.cached = with_cache.metrics;
    rep.cacheless = without_cache.metrics;
    const size_t n = std::min(trace_on.passes.size(), trace_off.passes.size());
    for (size_t p = 0; p < n; ++p) {
        const auto& a = trace_on.passes[p];
        const auto& b = trace_off.passes[p];
        if (a.logits.size() != b.logits.size()) {
            rep.max_logit_divergence = std::numeric_limits<double>::infinity();
            break;
        }
        for (size_t i = 0; i < a.logits.size(); ++i)
            rep.max_logit_divergence =
                std::max(rep.max_logit_divergence, std::abs(a.logits[i] - b.logits[i]));
    }
    if (trace_on.passes.size() != trace_off.passes.size())
        rep.max_logit_divergence = std::numeric_limits<double>::infinity();
    return rep;
}

}  // namespace bdlm
