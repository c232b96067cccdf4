#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "bdlm/data.hpp"
#include "bdlm/rng.hpp"

namespace bdlm {

/// Linear corruption schedule: alpha_t = 1 - t, so the masking probability is
/// t and the time weight -alpha'_t / (1 - alpha_t) is exactly 1/t. The
/// optional bandwidth clips the sampled mask rate to [band_min, band_max].
struct NoiseSchedule {
    double t_min = 0.02;
    double t_max = 1.0;
    bool has_bandwidth = false;
    double band_min = 0.0;
    double band_max = 1.0;

    void validate() const;
    double alpha(double t) const { return 1.0 - t; }
    double weight(double t) const { return 1.0 / t; }
    /// Sampling interval after intersecting [t_min, t_max] with the bandwidth.
    std::pair<double, double> effective_range() const;
};

/// One corrupted row: clean tokens, the noisy copy with MASK substitutions,
/// and the per-sequence timestep/weight.
struct NoisedRow {
    std::vector<TokenId> clean;
    std::vector<TokenId> noisy;
    std::vector<uint8_t> is_masked;
    std::vector<uint8_t> loss_mask;
    std::vector<uint8_t> maskable;
    PackedLayout layout;
    double t = 1.0;
    double weight = 1.0;

    int64_t masked_count() const;
    int64_t maskable_count() const;
};

struct NoisedBatch {
    std::vector<NoisedRow> rows;
};

/// Corrupt one row: draw t (unless forced), mask each maskable token
/// independently with probability t, then nudge the realized count into the
/// bandwidth when one is configured.
NoisedRow noise_row(const PackedRow& row, const NoiseSchedule& schedule, Rng& rng,
                    std::optional<double> force_t = std::nullopt);

/// Batch version; rows draw independent per-row streams from the seed.
NoisedBatch sample_noised(const std::vector<PackedRow>& rows, const NoiseSchedule& schedule,
                          uint64_t seed, std::optional<double> force_t = std::nullopt);

/// Two corruptions of the same row whose masks partition the maskable set.
/// Degenerate draws (either side empty) are resampled once; a second
/// degenerate draw rejects the row (nullopt).
std::optional<std::pair<NoisedRow, NoisedRow>> complementary_pair_row(const PackedRow& row,
                                                                      double t, uint64_t seed);

std::optional<std::pair<NoisedBatch, NoisedBatch>> complementary_pair(
    const std::vector<PackedRow>& rows, double t, uint64_t seed);

}  // namespace bdlm
