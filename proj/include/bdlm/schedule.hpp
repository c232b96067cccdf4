#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "bdlm/model.hpp"

namespace bdlm {

enum class PhaseObjective { ar, bdlm, mdlm, sft, dpo };

struct Phase {
    std::string name;
    int64_t block_size = 1;
    int64_t token_budget = 0;
    PhaseObjective objective = PhaseObjective::bdlm;
    bool force_full_mask = false;  // AR mode: every maskable token masked
    int64_t steps = 0;             // direct step count for sft/dpo phases
};

/// Warmup-Stable-Decay block-size plan: block size grows to the full
/// sequence, trains there, then shrinks to the deployment block size.
struct BlockSchedule {
    std::vector<Phase> phases;
    int64_t seq_len = 0;
    int64_t final_block_size = 0;

    void validate() const;
    std::vector<int64_t> warmup_sizes() const;
    std::vector<int64_t> decay_sizes() const;
};

/// Desk-scale default plan. Warmup climbs a x4 ladder from 1 to seq_len
/// (1,4,32,64,... at seq_len 4096), stable trains at the full sequence, and
/// decay steps through seq_len/4 down to the final block size. Budget split:
/// 30% warmup (10% on the full-sequence step), 50% stable, 20% decay.
BlockSchedule default_wsd(int64_t seq_len, int64_t final_block_size, int64_t total_tokens);

struct CheckpointMeta {
    std::string path;
    int64_t step = 0;
    double validation_elbo = 0.0;  // lower is better
};

/// The k lowest-ELBO entries; ties broken in favour of the later step.
std::vector<CheckpointMeta> select_top_k(std::vector<CheckpointMeta> candidates, int64_t k);

/// Elementwise arithmetic mean of identically-shaped parameter sets.
/// Per-element values are sorted before summing, so the result is invariant
/// to the order of the checkpoint list.
template <class S>
DenoiserParams<S> merge_checkpoints(const std::vector<DenoiserParams<S>>& checkpoints) {
    if (checkpoints.empty()) throw std::invalid_argument("merge: no checkpoints given");
    const auto& head = checkpoints.front();
    for (const auto& cp : checkpoints) {
        if (cp.items.size() != head.items.size())
            throw std::invalid_argument("merge: checkpoints have different tensor counts");
        for (size_t i = 0; i < head.items.size(); ++i) {
            if (cp.items[i].first != head.items[i].first)
                throw std::invalid_argument("merge: tensor name mismatch: " + cp.items[i].first +
                                            " vs " + head.items[i].first);
            if (cp.items[i].second.shape() != head.items[i].second.shape())
                throw std::invalid_argument(
                    "merge: shape mismatch for tensor " + head.items[i].first + ": " +
                    shape_str(cp.items[i].second.shape()) + " vs " +
                    shape_str(head.items[i].second.shape()));
        }
    }
    const size_t k = checkpoints.size();
    DenoiserParams<S> out;
    std::vector<S> vals(k);
    for (size_t i = 0; i < head.items.size(); ++i) {
        Tensor<S> merged = Tensor<S>::zeros(head.items[i].second.shape(), true);
        for (int64_t e = 0; e < merged.numel(); ++e) {
            for (size_t c = 0; c < k; ++c) vals[c] = checkpoints[c].items[i].second.value_at(e);
            std::sort(vals.begin(), vals.end());
            if (vals.front() == vals.back()) {  // identical inputs stay bitwise identical
                merged.values_mut()[e] = vals.front();
                continue;
            }
            S sum = 0;
            for (S v : vals) sum += v;
            merged.values_mut()[e] = sum / S(k);
        }
        out.items.emplace_back(head.items[i].first, merged);
    }
    return out;
}

}  // namespace bdlm
