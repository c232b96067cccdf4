#include "bdlm/noise.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bdlm {

void NoiseSchedule::validate() const {
    if (!(t_min > 0.0 && t_min <= t_max && t_max <= 1.0))
        throw std::invalid_argument("noise schedule: need 0 < t_min <= t_max <= 1");
    if (has_bandwidth) {
        if (!(band_min >= 0.0 && band_min <= band_max && band_max <= 1.0))
            throw std::invalid_argument("noise schedule: need 0 <= band_min <= band_max <= 1");
        if (band_max < t_min || band_min > t_max)
            throw std::invalid_argument(
                "noise schedule: bandwidth [" + std::to_string(band_min) + "," +
                std::to_string(band_max) + "] incompatible with t range [" +
                std::to_string(t_min) + "," + std::to_string(t_max) + "]");
    }
}

std::pair<double, double> NoiseSchedule::effective_range() const {
    if (!has_bandwidth) return {t_min, t_max};
    return {std::max(t_min, band_min), std::min(t_max, band_max)};
}

int64_t NoisedRow::masked_count() const {
    int64_t n = 0;
    for (auto m : is_masked) n += m;
    return n;
}

int64_t NoisedRow::maskable_count() const {
    int64_t n = 0;
    for (auto m : maskable) n += m;
    return n;
}

namespace {

// Flip `need` entries of is_masked among the candidates, chosen uniformly
// without replacement.
void flip_random(std::vector<uint8_t>& is_masked, std::vector<int64_t>& candidates, int64_t need,
                 uint8_t to, Rng& rng) {
    for (int64_t i = 0; i < need; ++i) {
        const int64_t pick = i + rng.uniform_int(0, int64_t(candidates.size()) - 1 - i);
        std::swap(candidates[size_t(i)], candidates[size_t(pick)]);
        is_masked[size_t(candidates[size_t(i)])] = to;
    }
}

}  // namespace

NoisedRow noise_row(const PackedRow& row, const NoiseSchedule& schedule, Rng& rng,
                    std::optional<double> force_t) {
    schedule.validate();
    const auto [lo, hi] = schedule.effective_range();
    double t = force_t ? *force_t : rng.uniform(lo, hi);
    if (!force_t) t = std::clamp(t, lo, hi);
    if (t <= 0.0) throw std::invalid_argument("noise: t must be positive");

    NoisedRow out;
    out.clean = row.tokens;
    out.noisy = row.tokens;
    out.loss_mask = row.loss_mask;
    out.maskable = row.maskable;
    out.layout = row.layout;
    out.t = t;
    out.weight = schedule.weight(t);
    out.is_masked.assign(row.tokens.size(), 0);

    int64_t n_maskable = 0, n_masked = 0;
    for (size_t i = 0; i < row.tokens.size(); ++i) {
        if (!row.maskable[i]) continue;
        ++n_maskable;
        if (rng.bernoulli(t)) {
            out.is_masked[i] = 1;
            ++n_masked;
        }
    }

    if (schedule.has_bandwidth && n_maskable > 0) {
        int64_t kmin = int64_t(std::ceil(schedule.band_min * double(n_maskable) - 1e-9));
        int64_t kmax = int64_t(std::floor(schedule.band_max * double(n_maskable) + 1e-9));
        if (kmin > kmax) {  // tiny rows: fall back to the nearest feasible count
            kmin = kmax = std::clamp<int64_t>(int64_t(std::lround(t * double(n_maskable))), 0,
                                              n_maskable);
        }
        if (n_masked < kmin) {
            std::vector<int64_t> cand;
            for (size_t i = 0; i < out.is_masked.size(); ++i)
                if (row.maskable[i] && !out.is_masked[i]) cand.push_back(int64_t(i));
            flip_random(out.is_masked, cand, kmin - n_masked, 1, rng);
        } else if (n_masked > kmax) {
            std::vector<int64_t> cand;
            for (size_t i = 0; i < out.is_masked.size(); ++i)
                if (out.is_masked[i]) cand.push_back(int64_t(i));
            flip_random(out.is_masked, cand, n_masked - kmax, 0, rng);
        }
    }

    for (size_t i = 0; i < out.is_masked.size(); ++i)
        if (out.is_masked[i]) out.noisy[i] = Vocab::MASK;
    return out;
}

NoisedBatch sample_noised(const std::vector<PackedRow>& rows, const NoiseSchedule& schedule,
                          uint64_t seed, std::optional<double> force_t) {
    NoisedBatch batch;
    batch.rows.reserve(rows.size());
    for (size_t r = 0; r < rows.size(); ++r) {
        Rng rng(split_seed(seed, r));
        batch.rows.push_back(noise_row(rows[r], schedule, rng, force_t));
    }
    return batch;
}

namespace {

std::pair<NoisedRow, NoisedRow> draw_pair(const PackedRow& row, double t, Rng& rng) {
    NoisedRow a;
    a.clean = row.tokens;
    a.noisy = row.tokens;
    a.loss_mask = row.loss_mask;
    a.maskable = row.maskable;
    a.layout = row.layout;
    a.t = t;
    a.weight = 1.0 / t;
    a.is_masked.assign(row.tokens.size(), 0);
    NoisedRow b = a;
    for (size_t i = 0; i < row.tokens.size(); ++i) {
        if (!row.maskable[i]) continue;
        if (rng.bernoulli(t)) {
            a.is_masked[i] = 1;
            a.noisy[i] = Vocab::MASK;
        } else {
            b.is_masked[i] = 1;
            b.noisy[i] = Vocab::MASK;
        }
    }
    return {std::move(a), std::move(b)};
}

}  // namespace

std::optional<std::pair<NoisedRow, NoisedRow>> complementary_pair_row(const PackedRow& row,
                                                                      double t, uint64_t seed) {
    if (!(t > 0.0 && t < 1.0))
        throw std::invalid_argument("complementary pair: t must lie in (0,1)");
    Rng rng(seed);
    for (int attempt = 0; attempt < 2; ++attempt) {
        auto pair = draw_pair(row, t, rng);
        if (pair.first.masked_count() > 0 && pair.second.masked_count() > 0) return pair;
    }
    return std::nullopt;
}

std::optional<std::pair<NoisedBatch, NoisedBatch>> complementary_pair(
    const std::vector<PackedRow>& rows, double t, uint64_t seed) {
    NoisedBatch a, b;
    for (size_t r = 0; r < rows.size(); ++r) {
        auto pair = complementary_pair_row(rows[r], t, split_seed(seed, r));
        if (!pair) return std::nullopt;
        a.rows.push_back(std::move(pair->first));
        b.rows.push_back(std::move(pair->second));
    }
    return std::make_pair(std::move(a), std::move(b));
}

}  // namespace bdlm
