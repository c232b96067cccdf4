#include "bdlm/mask.hpp"

#include <stdexcept>

namespace bdlm {

void PackedLayout::validate() const {
    if (block_size < 1) throw std::invalid_argument("layout: block_size must be >= 1");
    if (total_len <= 0) throw std::invalid_argument("layout: total_len must be positive");
    if (total_len % block_size != 0)
        throw std::invalid_argument("layout: total_len " + std::to_string(total_len) +
                                    " not divisible by block_size " + std::to_string(block_size));
    int64_t cursor = 0;
    for (const auto& [s, e] : doc_spans) {
        if (s != cursor || e <= s)
            throw std::invalid_argument("layout: doc spans must partition [0, total_len) in order");
        if ((e - s) % block_size != 0)
            throw std::invalid_argument("layout: span length " + std::to_string(e - s) +
                                        " not a multiple of block_size " + std::to_string(block_size));
        cursor = e;
    }
    if (cursor != total_len)
        throw std::invalid_argument("layout: doc spans do not cover the row");
}

int PackedLayout::doc_of(int64_t k) const {
    for (size_t d = 0; d < doc_spans.size(); ++d)
        if (k >= doc_spans[d].first && k < doc_spans[d].second) return int(d);
    return -1;
}

std::string AttentionMask::to_text() const {
    std::string out;
    out.reserve(size_t(dim) * (dim + 1));
    for (int64_t i = 0; i < dim; ++i) {
        for (int64_t j = 0; j < dim; ++j) out.push_back(at(i, j) ? '1' : '0');
        out.push_back('\n');
    }
    return out;
}

int64_t block_index(int64_t k, int64_t block_size) {
    if (block_size <= 0) throw std::invalid_argument("block_index: block_size must be >= 1");
    if (k < 0) throw std::invalid_argument("block_index: negative position");
    return k / block_size;
}

AttentionMask build_bdlm_mask(const PackedLayout& layout) {
    layout.validate();
    const int64_t L = layout.total_len;
    const int64_t LB = layout.block_size;
    AttentionMask m;
    m.dim = 2 * L;
    m.kind = MaskKind::bdlm_train;
    m.block_size = LB;
    m.bits.assign(size_t(m.dim) * m.dim, 0);

    // Document id per position, shared by the noisy and clean copies.
    std::vector<int> doc(L);
    for (int64_t k = 0; k < L; ++k) doc[k] = layout.doc_of(k);

    for (int64_t i = 0; i < 2 * L; ++i) {
        const bool i_noisy = i < L;
        const int64_t pi = i_noisy ? i : i - L;
        for (int64_t j = 0; j < 2 * L; ++j) {
            const bool j_noisy = j < L;
            const int64_t pj = j_noisy ? j : j - L;
            if (doc[pi] != doc[pj]) continue;
            bool allow = false;
            if (i_noisy && j_noisy) allow = block_index(i, LB) == block_index(j, LB);
            else if (i_noisy && !j_noisy) allow = block_index(i, LB) > block_index(j - L, LB);
            else if (!i_noisy && !j_noisy) allow = block_index(i - L, LB) >= block_index(j - L, LB);
            // clean -> noisy stays 0
            if (allow) m.set(i, j, true);
        }
    }
    return m;
}

AttentionMask build_mdlm_mask(const PackedLayout& layout) {
    layout.validate();
    const int64_t L = layout.total_len;
    AttentionMask m;
    m.dim = L;
    m.kind = MaskKind::mdlm_train;
    m.block_size = L;
    m.bits.assign(size_t(L) * L, 0);
    for (const auto& [s, e] : layout.doc_spans)
        for (int64_t i = s; i < e; ++i)
            for (int64_t j = s; j < e; ++j) m.set(i, j, true);
    return m;
}

AttentionMask build_decode_mask(int64_t prompt_len, int64_t finalized_blocks,
                                int64_t block_size) {
    if (prompt_len < 0) throw std::invalid_argument("decode mask: prompt_len must be >= 0");
    if (block_size < 1) throw std::invalid_argument("decode mask: block_size must be >= 1");
    const int64_t ctx = prompt_len + finalized_blocks * block_size;
    const int64_t n = ctx + block_size;
    AttentionMask m;
    m.dim = n;
    m.kind = MaskKind::decode;
    m.block_size = block_size;
    m.bits.assign(size_t(n) * n, 0);

    // Block grid: prompt positions fall on the grid from 0; generated blocks
    // start at prompt_len (callers align prompt_len to the grid when they
    // need train/decode geometry to match exactly).
    auto blk = [&](int64_t k) {
        if (k < prompt_len) return block_index(k, block_size);
        int64_t prompt_blocks = (prompt_len + block_size - 1) / block_size;
        return prompt_blocks + block_index(k - prompt_len, block_size);
    };

    for (int64_t i = 0; i < n; ++i) {
        if (i < ctx) {
            for (int64_t j = 0; j < ctx; ++j)
                if (blk(j) <= blk(i)) m.set(i, j, true);
        } else {
            for (int64_t j = 0; j < n; ++j) m.set(i, j, true);
        }
    }
    return m;
}

}  // namespace bdlm
