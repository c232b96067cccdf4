#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace bdlm {

/// Layout of one packed training row: total length, document spans and the
/// active block size. Spans are half-open [start, end), ascending, and
/// partition [0, total_len). Both total_len and every span length must be
/// multiples of block_size.
struct PackedLayout {
    int64_t total_len = 0;
    std::vector<std::pair<int64_t, int64_t>> doc_spans;
    int64_t block_size = 1;

    void validate() const;
    int64_t num_blocks() const { return total_len / block_size; }
    /// Index of the doc span containing position k, or -1.
    int doc_of(int64_t k) const;
};

enum class MaskKind { bdlm_train, mdlm_train, decode };

/// Dense boolean attention mask. bits[i*dim + j] == 1 means query i may
/// attend to key j.
struct AttentionMask {
    int64_t dim = 0;
    std::vector<uint8_t> bits;
    MaskKind kind = MaskKind::mdlm_train;
    int64_t block_size = 1;

    bool at(int64_t i, int64_t j) const { return bits[size_t(i) * dim + j] != 0; }
    void set(int64_t i, int64_t j, bool v) { bits[size_t(i) * dim + j] = v ? 1 : 0; }

    /// One row per line, '0'/'1' characters; for golden-file tests.
    std::string to_text() const;
};

/// Block index of token position k for the given block size.
int64_t block_index(int64_t k, int64_t block_size);

/// Training mask over the concatenated [x_t; x_0] row of length 2L.
/// Within x_t attention is block-diagonal, x_t sees strictly earlier clean
/// blocks, clean blocks are block-causal among themselves, and x_0 never
/// attends into x_t. All of it intersected with same-document membership.
AttentionMask build_bdlm_mask(const PackedLayout& layout);

/// L x L mask allowing attention exactly within shared document spans.
AttentionMask build_mdlm_mask(const PackedLayout& layout);

/// Square decode-time mask over [prompt | finalized blocks | current block].
/// Context rows are block-causal; current-block rows see everything up to and
/// including the whole current block.
AttentionMask build_decode_mask(int64_t prompt_len, int64_t finalized_blocks,
                                int64_t block_size);

}  // namespace bdlm
