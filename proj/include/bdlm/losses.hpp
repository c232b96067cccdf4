#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bdlm/model.hpp"

namespace bdlm {

struct LossReport {
    double value = 0.0;
    double per_token_ce = 0.0;  // unweighted mean CE over masked tokens
    int64_t masked_count = 0;
    std::map<std::string, double> extras;
};

struct CapConfig {
    double lambda = 0.0;
};

struct DpoConfig {
    double beta = 0.1;
    int64_t mc_samples = 1;
    bool shared_noise = true;
};

template <class S>
struct LossResult {
    Tensor<S> value;  // scalar graph node
    LossReport report;
};

namespace detail_losses {

/// Index of the strict row maximum, or -1 on a tie.
template <class S>
int64_t strict_argmax(const S* row, int64_t n) {
    int64_t best = 0;
    for (int64_t j = 1; j < n; ++j)
        if (row[j] > row[best]) best = j;
    for (int64_t j = 0; j < n; ++j)
        if (j != best && row[j] == row[best]) return -1;
    return best;
}

/// Shared core of the masked objectives: time-weighted NLL over masked
/// positions divided by the total count of maskable tokens, so the full-mask
/// limit equals mean cross-entropy per token.
template <class S>
std::optional<LossResult<S>> weighted_masked_nll(Graph<S>& g, const std::vector<RowLogits<S>>& fwd,
                                                 const NoisedBatch& batch) {
    if (fwd.size() != batch.rows.size())
        throw std::invalid_argument("loss: forward rows do not match batch rows");
    int64_t normalizer = 0, masked_total = 0;
    for (const auto& row : batch.rows) normalizer += row.maskable_count();
    for (const auto& r : fwd) masked_total += int64_t(r.positions.size());
    if (masked_total == 0) return std::nullopt;  // skip-batch signal
    if (normalizer == 0) throw std::invalid_argument("loss: batch has no maskable tokens");

    Tensor<S> total;
    bool first = true;
    double plain_ce = 0.0;
    int64_t correct = 0;
    for (size_t r = 0; r < fwd.size(); ++r) {
        const auto& row = batch.rows[r];
        const auto& f = fwd[r];
        if (f.positions.empty()) continue;
        std::vector<int32_t> targets;
        targets.reserve(f.positions.size());
        for (int64_t pos : f.positions) targets.push_back(row.clean[size_t(pos)]);
        Tensor<S> nll = nll_rows(g, f.logits, targets);
        for (int64_t i = 0; i < nll.numel(); ++i) plain_ce += double(nll.value_at(i));
        const int64_t v = f.logits.dim(1);
        for (size_t i = 0; i < targets.size(); ++i) {
            const int64_t am = strict_argmax(f.logits.values().data() + int64_t(i) * v, v);
            if (am == targets[i]) ++correct;
        }
        std::vector<S> w(f.positions.size(), S(row.weight));
        Tensor<S> row_sum = weighted_sum(g, nll, w);
        total = first ? row_sum : add(g, total, row_sum);
        first = false;
    }

    LossResult<S> res;
    res.value = scale(g, total, S(1) / S(normalizer));
    res.report.value = double(res.value.item());
    res.report.per_token_ce = plain_ce / double(masked_total);
    res.report.masked_count = masked_total;
    res.report.extras["accuracy"] = double(correct) / double(masked_total);
    res.report.extras["normalizer"] = double(normalizer);
    return res;
}

}  // namespace detail_losses

/// Block-diffusion objective: logits must come from forward_train under the
/// 2Lx2L mask. Returns nullopt when no token was masked (skip the batch).
template <class S>
std::optional<LossResult<S>> bdlm_loss(Graph<S>& g, const std::vector<RowLogits<S>>& fwd,
                                       const NoisedBatch& batch) {
    return detail_losses::weighted_masked_nll(g, fwd, batch);
}

/// Full-sequence objective (block count 1); same arithmetic as bdlm_loss.
template <class S>
std::optional<LossResult<S>> mdlm_loss(Graph<S>& g, const std::vector<RowLogits<S>>& fwd,
                                       const NoisedBatch& batch) {
    return detail_losses::weighted_masked_nll(g, fwd, batch);
}

/// Conditional objective: identical arithmetic, but rows are expected to be
/// pair rows whose maskable set covers response tokens only. Prompt tokens
/// are never masked, so their logits are never even computed.
template <class S>
std::optional<LossResult<S>> sft_loss(Graph<S>& g, const std::vector<RowLogits<S>>& fwd,
                                      const NoisedBatch& batch) {
    for (const auto& row : batch.rows)
        if (row.maskable_count() == 0)
            throw std::invalid_argument("sft_loss: a row has no response tokens to supervise");
    return detail_losses::weighted_masked_nll(g, fwd, batch);
}

template <class S>
struct ConfidenceResult {
    Tensor<S> value;  // scalar; constant zero when nothing qualifies
    int64_t qualifying = 0;
};

/// Mean entropy (nats) of the predictive distribution over masked positions
/// whose strict argmax equals the target; zero when no position qualifies.
/// Ties count as incorrect.
template <class S>
ConfidenceResult<S> confidence_loss(Graph<S>& g, const std::vector<RowLogits<S>>& fwd,
                                    const NoisedBatch& batch) {
    ConfidenceResult<S> res;
    Tensor<S> total;
    bool first = true;
    int64_t count = 0;
    for (size_t r = 0; r < fwd.size(); ++r) {
        const auto& f = fwd[r];
        if (f.positions.empty()) continue;
        const int64_t v = f.logits.dim(1);
        std::vector<int64_t> sel;
        for (size_t i = 0; i < f.positions.size(); ++i) {
            const int64_t am =
                detail_losses::strict_argmax(f.logits.values().data() + int64_t(i) * v, v);
            if (am == batch.rows[r].clean[size_t(f.positions[i])]) sel.push_back(int64_t(i));
        }
        if (sel.empty()) continue;
        count += int64_t(sel.size());
        Tensor<S> ent = entropy_rows(g, gather_rows(g, f.logits, sel));
        Tensor<S> s = sum_all(g, ent);
        total = first ? s : add(g, total, s);
        first = false;
    }
    res.qualifying = count;
    res.value = count > 0 ? scale(g, total, S(1) / S(count)) : Tensor<S>::scalar(S(0));
    return res;
}

/// Combined objective: sft + lambda * confidence.
template <class S>
LossResult<S> cap_loss(Graph<S>& g, const LossResult<S>& sft, const ConfidenceResult<S>& conf,
                       const CapConfig& cfg) {
    if (cfg.lambda < 0.0) throw std::invalid_argument("cap_loss: lambda must be >= 0");
    LossResult<S> res;
    res.value = cfg.lambda == 0.0 ? sft.value
                                  : add(g, sft.value, scale(g, conf.value, S(cfg.lambda)));
    res.report = sft.report;
    res.report.value = double(res.value.item());
    res.report.extras["confidence_entropy"] = double(conf.value.item());
    res.report.extras["confidence_count"] = double(conf.qualifying);
    return res;
}

/// One Monte Carlo draw used by the ELBO: a corrupted pair row. Draws are
/// created once and reused so that policy and reference see identical noise.
struct ElboDraw {
    NoisedRow row;
};

inline std::vector<ElboDraw> make_elbo_draws(const PackedRow& pair_row,
                                             const NoiseSchedule& sched, int64_t n_samples,
                                             uint64_t seed) {
    std::vector<ElboDraw> draws;
    draws.reserve(size_t(n_samples));
    for (int64_t s = 0; s < n_samples; ++s) {
        // Re-draw on empty masks; an all-clean row carries no signal.
        for (uint64_t attempt = 0;; ++attempt) {
            Rng rng(split_seed(seed, uint64_t(s) * 97 + attempt));
            NoisedRow row = noise_row(pair_row, sched, rng);
            if (row.masked_count() > 0 || attempt >= 16) {
                draws.push_back(ElboDraw{std::move(row)});
                break;
            }
        }
    }
    return draws;
}

/// Monte Carlo estimate of the conditional block-diffusion ELBO in
/// nats/token: the negation of the conditional loss on the same draws.
template <class S>
Tensor<S> bdlm_elbo_on_draws(Graph<S>& g, const DenoiserParams<S>& params, const ModelConfig& cfg,
                             const std::vector<ElboDraw>& draws) {
    Tensor<S> acc;
    bool first = true;
    for (const auto& d : draws) {
        NoisedBatch b;
        b.rows.push_back(d.row);
        auto fwd = forward_train_batch(g, params, cfg, b);
        auto loss = detail_losses::weighted_masked_nll(g, fwd, b);
        Tensor<S> v = loss ? loss->value : Tensor<S>::scalar(S(0));
        acc = first ? v : add(g, acc, v);
        first = false;
    }
    return scale(g, acc, S(-1) / S(draws.size()));
}

template <class S>
Tensor<S> bdlm_elbo(Graph<S>& g, const DenoiserParams<S>& params, const ModelConfig& cfg,
                    const std::vector<TokenId>& prompt, const std::vector<TokenId>& response,
                    int64_t block_size, const NoiseSchedule& sched, const DpoConfig& dcfg,
                    uint64_t seed) {
    if (response.empty()) throw std::invalid_argument("bdlm_elbo: response must be non-empty");
    PackedRow row = build_pair_row(prompt, response, block_size);
    auto draws = make_elbo_draws(row, sched, dcfg.mc_samples, seed);
    return bdlm_elbo_on_draws(g, params, cfg, draws);
}

template <class S>
struct DpoResult {
    Tensor<S> loss;  // scalar graph node on the policy side
    double margin = 0.0;
    double elbo_chosen_policy = 0.0, elbo_rejected_policy = 0.0;
    double elbo_chosen_ref = 0.0, elbo_rejected_ref = 0.0;
};

/// Preference loss -log sigmoid(beta * [dB(chosen) - dB(rejected)]) where
/// dB is the policy-minus-reference ELBO advantage. The reference pass runs
/// on a detached graph; with shared noise all four estimates reuse the same
/// (t, mask) draws.
template <class S>
DpoResult<S> dpo_loss(Graph<S>& g, const DenoiserParams<S>& policy, const DenoiserParams<S>& ref,
                      const ModelConfig& cfg, const PairExample& pair, int64_t block_size,
                      const NoiseSchedule& sched, const DpoConfig& dcfg, uint64_t seed) {
    if (!(dcfg.beta > 0.0)) throw std::invalid_argument("dpo_loss: beta must be > 0");
    PackedRow row_w = build_pair_row(pair.prompt, pair.chosen, block_size);
    PackedRow row_l = build_pair_row(pair.prompt, pair.rejected, block_size);

    auto draws_w = make_elbo_draws(row_w, sched, dcfg.mc_samples, split_seed(seed, 1));
    auto draws_l = make_elbo_draws(row_l, sched, dcfg.mc_samples, split_seed(seed, 2));

    double ref_w, ref_l;
    {
        Graph<S> g_ref;
        if (dcfg.shared_noise) {
            ref_w = double(bdlm_elbo_on_draws(g_ref, ref, cfg, draws_w).item());
            ref_l = double(bdlm_elbo_on_draws(g_ref, ref, cfg, draws_l).item());
        } else {
            auto rw = make_elbo_draws(row_w, sched, dcfg.mc_samples, split_seed(seed, 3));
            auto rl = make_elbo_draws(row_l, sched, dcfg.mc_samples, split_seed(seed, 4));
            ref_w = double(bdlm_elbo_on_draws(g_ref, ref, cfg, rw).item());
            ref_l = double(bdlm_elbo_on_draws(g_ref, ref, cfg, rl).item());
        }
    }

    Tensor<S> b_w = bdlm_elbo_on_draws(g, policy, cfg, draws_w);
    Tensor<S> b_l = bdlm_elbo_on_draws(g, policy, cfg, draws_l);
    Tensor<S> adv_w = sub(g, b_w, Tensor<S>::scalar(S(ref_w)));
    Tensor<S> adv_l = sub(g, b_l, Tensor<S>::scalar(S(ref_l)));
    Tensor<S> margin = scale(g, sub(g, adv_w, adv_l), S(dcfg.beta));

    DpoResult<S> res;
    res.loss = neg_log_sigmoid(g, margin);
    res.margin = double(margin.item());
    res.elbo_chosen_policy = double(b_w.item());
    res.elbo_rejected_policy = double(b_l.item());
    res.elbo_chosen_ref = ref_w;
    res.elbo_rejected_ref = ref_l;
    return res;
}

}  // namespace bdlm
