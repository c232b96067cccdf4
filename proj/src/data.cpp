#include "bdlm/data.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace bdlm {

std::vector<TokenId> encode_bytes(std::string_view text) {
    std::vector<TokenId> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(TokenId(c));
    return out;
}

std::string decode_bytes(const std::vector<TokenId>& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (TokenId t : tokens)
        if (t >= 0 && t < 256) out.push_back(char(static_cast<unsigned char>(t)));
    return out;
}

int64_t quantize_length(int64_t n, int64_t block_size) {
    if (n < 1 || block_size < 1)
        throw std::invalid_argument("quantize_length: n and block_size must be >= 1");
    return ((n + block_size - 1) / block_size) * block_size;
}

std::vector<PackedRow> pack_documents(const std::vector<std::vector<TokenId>>& docs,
                                      int64_t target_len, int64_t block_size) {
    if (target_len % block_size != 0)
        throw std::invalid_argument("pack_documents: target_len " + std::to_string(target_len) +
                                    " not divisible by block_size " + std::to_string(block_size));
    // Chunk oversized docs at row-length boundaries; each chunk is its own doc.
    std::vector<std::vector<TokenId>> chunks;
    for (const auto& doc : docs) {
        if (doc.empty()) throw std::invalid_argument("pack_documents: empty document");
        for (size_t off = 0; off < doc.size(); off += size_t(target_len))
            chunks.emplace_back(doc.begin() + off,
                                doc.begin() + std::min(doc.size(), off + size_t(target_len)));
    }

    struct OpenRow {
        PackedRow row;
        int64_t used = 0;
    };
    std::vector<OpenRow> rows;
    auto new_row = [&]() {
        OpenRow r;
        r.row.tokens.assign(size_t(target_len), Vocab::PAD);
        r.row.loss_mask.assign(size_t(target_len), 0);
        r.row.maskable.assign(size_t(target_len), 0);
        r.row.layout.total_len = target_len;
        r.row.layout.block_size = block_size;
        rows.push_back(std::move(r));
    };

    for (const auto& chunk : chunks) {
        const int64_t qlen = quantize_length(int64_t(chunk.size()), block_size);
        size_t target = rows.size();
        for (size_t r = 0; r < rows.size(); ++r) {
            if (rows[r].used + qlen <= target_len) {
                target = r;
                break;
            }
        }
        if (target == rows.size()) new_row();
        OpenRow& r = rows[target];
        const int64_t start = r.used;
        for (size_t i = 0; i < chunk.size(); ++i) {
            r.row.tokens[size_t(start) + i] = chunk[i];
            r.row.loss_mask[size_t(start) + i] = 1;
            r.row.maskable[size_t(start) + i] = 1;
        }
        r.row.layout.doc_spans.emplace_back(start, start + qlen);
        r.used += qlen;
    }

    std::vector<PackedRow> out;
    out.reserve(rows.size());
    for (auto& r : rows) {
        if (r.used < target_len)  // trailing PAD-only span
            r.row.layout.doc_spans.emplace_back(r.used, target_len);
        r.row.layout.validate();
        out.push_back(std::move(r.row));
    }
    return out;
}

std::vector<std::vector<TokenId>> split_corpus_documents(std::string_view text) {
    std::vector<std::vector<TokenId>> docs;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t sep = text.find("\n\n", pos);
        std::string_view piece =
            sep == std::string_view::npos ? text.substr(pos) : text.substr(pos, sep - pos);
        if (!piece.empty()) docs.push_back(encode_bytes(piece));
        if (sep == std::string_view::npos) break;
        pos = sep + 2;
        while (pos < text.size() && text[pos] == '\n') ++pos;
    }
    return docs;
}

std::vector<std::vector<TokenId>> load_corpus_documents(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("corpus: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return split_corpus_documents(ss.str());
}

namespace {

std::vector<TokenId> field_tokens(const nlohmann::json& rec, const char* key, bool add_eos) {
    auto toks = encode_bytes(rec.at(key).get<std::string>());
    if (add_eos && (toks.empty() || toks.back() != Vocab::EOS)) toks.push_back(Vocab::EOS);
    return toks;
}

}  // namespace

JsonlLoadResult load_jsonl_pairs(const std::string& path, PairKind kind) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("pairs: cannot open " + path);
    JsonlLoadResult res;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            auto rec = nlohmann::json::parse(line);
            PairExample ex;
            ex.prompt = encode_bytes(rec.at("prompt").get<std::string>());
            if (ex.prompt.empty()) throw std::runtime_error("empty prompt");
            if (kind == PairKind::sft) {
                ex.response = field_tokens(rec, "response", true);
                if (ex.response.size() <= 1) throw std::runtime_error("empty response");
            } else {
                ex.chosen = field_tokens(rec, "chosen", true);
                ex.rejected = field_tokens(rec, "rejected", true);
                if (ex.chosen.size() <= 1 || ex.rejected.size() <= 1)
                    throw std::runtime_error("empty chosen/rejected");
            }
            res.pairs.push_back(std::move(ex));
        } catch (const std::exception& e) {
            ++res.skipped;
            res.diagnostics.push_back("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (res.pairs.empty())
        res.diagnostics.push_back("warning: no usable records in " + path);
    return res;
}

int64_t padded_prompt_len(int64_t prompt_len, int64_t block_size) {
    if (prompt_len <= 0) return 0;
    return quantize_length(prompt_len, block_size);
}

PackedRow build_pair_row(const std::vector<TokenId>& prompt,
                         const std::vector<TokenId>& response, int64_t block_size) {
    if (response.empty())
        throw std::invalid_argument("pair row: response must contain at least one token");
    const int64_t plen = padded_prompt_len(int64_t(prompt.size()), block_size);
    const int64_t rlen = quantize_length(int64_t(response.size()), block_size);
    const int64_t total = plen + rlen;

    PackedRow row;
    row.tokens.assign(size_t(total), Vocab::PAD);
    row.loss_mask.assign(size_t(total), 0);
    row.maskable.assign(size_t(total), 0);
    for (size_t i = 0; i < prompt.size(); ++i) {
        row.tokens[i] = prompt[i];
        row.loss_mask[i] = 1;
    }
    for (size_t i = 0; i < response.size(); ++i) {
        row.tokens[size_t(plen) + i] = response[i];
        row.loss_mask[size_t(plen) + i] = 1;
        row.maskable[size_t(plen) + i] = 1;
    }
    row.layout.total_len = total;
    row.layout.block_size = block_size;
    row.layout.doc_spans.emplace_back(0, total);
    row.layout.validate();
    return row;
}

}  // namespace bdlm
