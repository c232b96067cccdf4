#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "bdlm/mask.hpp"

namespace bdlm {

using TokenId = int32_t;

/// Byte-level vocabulary: ids 0..255 are raw bytes, then the specials.
struct Vocab {
    static constexpr TokenId MASK = 256;
    static constexpr TokenId PAD = 257;
    static constexpr TokenId BOS = 258;
    static constexpr TokenId EOS = 259;
    static constexpr int32_t size = 260;
};

std::vector<TokenId> encode_bytes(std::string_view text);
/// Inverse of encode_bytes; special ids are stripped.
std::string decode_bytes(const std::vector<TokenId>& tokens);

/// One training row: tokens plus which positions are real (loss_mask) and
/// which may be corrupted by the noising process (maskable).
struct PackedRow {
    std::vector<TokenId> tokens;
    std::vector<uint8_t> loss_mask;  // false on PAD
    std::vector<uint8_t> maskable;   // false on PAD and on prompt/conditioning
    PackedLayout layout;
};

/// Smallest multiple of block_size that is >= n.
int64_t quantize_length(int64_t n, int64_t block_size);

/// Greedy first-fit packing of documents into rows of length target_len.
/// Docs are quantized to block multiples first; docs longer than target_len
/// are chunked at target_len boundaries, each chunk its own span. Row
/// remainders become trailing PAD-only spans excluded from the loss.
std::vector<PackedRow> pack_documents(const std::vector<std::vector<TokenId>>& docs,
                                      int64_t target_len, int64_t block_size);

/// Pretraining corpus: UTF-8 text, documents separated by a blank line.
std::vector<std::vector<TokenId>> split_corpus_documents(std::string_view text);
std::vector<std::vector<TokenId>> load_corpus_documents(const std::string& path);

/// Prompt/response pair; chosen/rejected are filled for preference data.
struct PairExample {
    std::vector<TokenId> prompt;
    std::vector<TokenId> response;
    std::vector<TokenId> chosen;
    std::vector<TokenId> rejected;
};

enum class PairKind { sft, dpo };

struct JsonlLoadResult {
    std::vector<PairExample> pairs;
    int64_t skipped = 0;
    std::vector<std::string> diagnostics;
};

/// One JSON record per line; keys "prompt"/"response" for SFT,
/// "prompt"/"chosen"/"rejected" for DPO. Malformed lines are skipped and
/// reported with their line number. Responses get a terminating EOS.
JsonlLoadResult load_jsonl_pairs(const std::string& path, PairKind kind);

/// Single-pair training row: [prompt | pad-to-block | response | pad]. The
/// prompt is padded to a block boundary so training geometry matches the
/// block-aligned decode path. Only response tokens are maskable.
PackedRow build_pair_row(const std::vector<TokenId>& prompt,
                         const std::vector<TokenId>& response, int64_t block_size);

/// Padded prompt length used by build_pair_row and block decoding.
int64_t padded_prompt_len(int64_t prompt_len, int64_t block_size);

}  // namespace bdlm
