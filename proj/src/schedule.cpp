#include "bdlm/schedule.hpp"

namespace bdlm {

void BlockSchedule::validate() const {
    if (phases.empty()) throw std::invalid_argument("schedule: no phases");
    auto warm = warmup_sizes();
    auto dec = decay_sizes();
    if (warm.empty() || warm.back() != seq_len)
        throw std::invalid_argument("schedule: warmup must end at the full sequence length");
    for (size_t i = 1; i < warm.size(); ++i)
        if (warm[i] <= warm[i - 1])
            throw std::invalid_argument("schedule: warmup block sizes must strictly increase");
    if (dec.empty() || dec.back() != final_block_size)
        throw std::invalid_argument("schedule: decay must end at the final block size");
    for (size_t i = 1; i < dec.size(); ++i)
        if (dec[i] >= dec[i - 1])
            throw std::invalid_argument("schedule: decay block sizes must strictly decrease");
    for (const auto& p : phases)
        if (seq_len % p.block_size != 0)
            throw std::invalid_argument("schedule: block size " + std::to_string(p.block_size) +
                                        " does not divide sequence length " +
                                        std::to_string(seq_len));
}

std::vector<int64_t> BlockSchedule::warmup_sizes() const {
    std::vector<int64_t> out;
    for (const auto& p : phases)
        if (p.name.rfind("warmup", 0) == 0) out.push_back(p.block_size);
    return out;
}

std::vector<int64_t> BlockSchedule::decay_sizes() const {
    std::vector<int64_t> out;
    for (const auto& p : phases)
        if (p.name.rfind("decay", 0) == 0) out.push_back(p.block_size);
    return out;
}

BlockSchedule default_wsd(int64_t seq_len, int64_t final_block_size, int64_t total_tokens) {
    if (seq_len < 1 || final_block_size < 1 || final_block_size > seq_len ||
        seq_len % final_block_size != 0)
        throw std::invalid_argument("default_wsd: final block size " +
                                    std::to_string(final_block_size) +
                                    " must divide sequence length " + std::to_string(seq_len));

    std::vector<int64_t> warm;
    if (final_block_size == seq_len) {
        // Degenerate plan: nothing to decay, single hop to the full sequence.
        warm = {1};
        if (seq_len > 1) warm.push_back(seq_len);
    } else if (seq_len == 4096) {
        warm = {1, 4, 32, 64, 4096};
    } else {
        warm = {1};
        for (int64_t b = 4; b < seq_len; b *= 4)
            if (seq_len % b == 0) warm.push_back(b);
        warm.push_back(seq_len);
    }

    std::vector<int64_t> dec;
    const int64_t mid = seq_len / 4;
    if (mid > final_block_size && mid < seq_len && seq_len % mid == 0) dec.push_back(mid);
    dec.push_back(final_block_size);

    BlockSchedule s;
    s.seq_len = seq_len;
    s.final_block_size = final_block_size;

    const double warm_head = warm.size() > 1 ? 0.20 / double(warm.size() - 1) : 0.30;
    for (size_t i = 0; i < warm.size(); ++i) {
        Phase p;
        p.name = "warmup_" + std::to_string(i + 1);
        p.block_size = warm[i];
        const double frac = (i + 1 == warm.size() && warm.size() > 1) ? 0.10 : warm_head;
        p.token_budget = int64_t(frac * double(total_tokens));
        p.objective = PhaseObjective::bdlm;
        s.phases.push_back(p);
    }
    {
        Phase p;
        p.name = "stable";
        p.block_size = seq_len;
        p.token_budget = int64_t(0.50 * double(total_tokens));
        p.objective = PhaseObjective::mdlm;
        s.phases.push_back(p);
    }
    for (size_t i = 0; i < dec.size(); ++i) {
        Phase p;
        p.name = "decay_" + std::to_string(i + 1);
        p.block_size = dec[i];
        p.token_budget = int64_t(0.20 / double(dec.size()) * double(total_tokens));
        p.objective = PhaseObjective::bdlm;
        s.phases.push_back(p);
    }
    s.validate();
    return s;
}

std::vector<CheckpointMeta> select_top_k(std::vector<CheckpointMeta> candidates, int64_t k) {
    if (k < 0 || k > int64_t(candidates.size()))
        throw std::invalid_argument("select_top_k: k=" + std::to_string(k) + " with " +
                                    std::to_string(candidates.size()) + " candidates");
    for (const auto& c : candidates)
        if (!std::isfinite(c.validation_elbo))
            throw std::invalid_argument("select_top_k: non-finite validation elbo for " + c.path);
    std::sort(candidates.begin(), candidates.end(), [](const auto& a, const auto& b) {
        if (a.validation_elbo != b.validation_elbo) return a.validation_elbo < b.validation_elbo;
        if (a.step != b.step) return a.step > b.step;
        return a.path < b.path;
    });
    candidates.resize(size_t(k));
    return candidates;
}

}  // namespace bdlm
