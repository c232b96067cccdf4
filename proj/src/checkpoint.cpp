#include "bdlm/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace bdlm {

namespace {

constexpr char kMagic[4] = {'B', 'D', 'L', 'M'};

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const std::string& buf, size_t off) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(buf[off + i])) << (8 * i);
    return v;
}

nlohmann::json model_to_json(const ModelConfig& m) {
    return {{"d_model", m.d_model}, {"n_layers", m.n_layers}, {"n_heads", m.n_heads},
            {"d_ff", m.d_ff},       {"max_len", m.max_len},   {"vocab", m.vocab},
            {"rope_base", m.rope_base}};
}

ModelConfig model_from_json(const nlohmann::json& j) {
    ModelConfig m;
    m.d_model = j.at("d_model").get<int64_t>();
    m.n_layers = j.at("n_layers").get<int64_t>();
    m.n_heads = j.at("n_heads").get<int64_t>();
    m.d_ff = j.at("d_ff").get<int64_t>();
    m.max_len = j.at("max_len").get<int64_t>();
    m.vocab = j.at("vocab").get<int32_t>();
    m.rope_base = j.at("rope_base").get<double>();
    return m;
}

std::vector<int64_t> expected_shape(const ModelConfig& m, const std::string& name) {
    auto ends_with = [&](const char* suffix) {
        const std::string s(suffix);
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (name == "embed.weight") return {m.vocab, m.d_model};
    if (ends_with("norm.gain")) return {m.d_model};
    if (ends_with("ffn.w1")) return {m.d_ff, m.d_model};
    if (ends_with("ffn.w2")) return {m.d_model, m.d_ff};
    if (ends_with(".wq") || ends_with(".wk") || ends_with(".wv") || ends_with(".wo"))
        return {m.d_model, m.d_model};
    throw std::runtime_error("checkpoint: unknown tensor name " + name);
}

}  // namespace

void save_checkpoint_raw(const std::string& path, const CheckpointInfo& info,
                         const std::vector<std::vector<float>>& payload) {
    if (info.tensors.size() != payload.size())
        throw std::invalid_argument("checkpoint: tensor info/payload count mismatch");
    nlohmann::json header;
    header["dtype"] = "f32";
    header["step"] = info.step;
    header["model"] = model_to_json(info.model);
    if (std::isfinite(info.validation_elbo)) header["val_elbo"] = info.validation_elbo;
    if (std::isfinite(info.final_lr)) header["final_lr"] = info.final_lr;
    auto tensors = nlohmann::json::array();
    for (const auto& t : info.tensors) tensors.push_back({{"name", t.name}, {"shape", t.shape}});
    header["tensors"] = tensors;
    const std::string hbytes = header.dump();

    std::string out;
    out.append(kMagic, 4);
    put_u32(out, info.version);
    put_u32(out, uint32_t(hbytes.size()));
    out += hbytes;
    for (const auto& flat : payload) {
        static_assert(sizeof(float) == 4);
        const size_t off = out.size();
        out.resize(off + flat.size() * 4);
        std::memcpy(out.data() + off, flat.data(), flat.size() * 4);
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) throw std::runtime_error("checkpoint: short write to " + path);
}

namespace {

std::string read_all(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return buf;
}

CheckpointInfo parse_header(const std::string& buf, size_t& payload_off) {
    if (buf.size() < 12 || std::memcmp(buf.data(), kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic");
    CheckpointInfo info;
    info.version = get_u32(buf, 4);
    if (info.version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported format version " +
                                 std::to_string(info.version));
    const uint32_t hlen = get_u32(buf, 8);
    if (buf.size() < 12 + size_t(hlen)) throw std::runtime_error("checkpoint: truncated header");
    const auto header = nlohmann::json::parse(buf.substr(12, hlen));
    info.step = header.value("step", int64_t(0));
    info.validation_elbo = header.value("val_elbo", std::nan(""));
    info.final_lr = header.value("final_lr", std::nan(""));
    info.model = model_from_json(header.at("model"));
    for (const auto& t : header.at("tensors")) {
        CheckpointTensorInfo ti;
        ti.name = t.at("name").get<std::string>();
        ti.shape = t.at("shape").get<std::vector<int64_t>>();
        const auto expect = expected_shape(info.model, ti.name);
        if (ti.shape != expect)
            throw std::runtime_error("checkpoint: shape mismatch for tensor " + ti.name +
                                     ": header " + shape_str(ti.shape) + ", expected " +
                                     shape_str(expect));
        info.tensors.push_back(std::move(ti));
    }
    payload_off = 12 + hlen;
    return info;
}

}  // namespace

CheckpointInfo load_checkpoint_info(const std::string& path) {
    const std::string buf = read_all(path);
    size_t off = 0;
    return parse_header(buf, off);
}

std::pair<CheckpointInfo, std::vector<std::vector<float>>> load_checkpoint_raw(
    const std::string& path) {
    const std::string buf = read_all(path);
    size_t off = 0;
    CheckpointInfo info = parse_header(buf, off);

    size_t expected_bytes = 0;
    for (const auto& t : info.tensors) {
        size_t n = 1;
        for (auto d : t.shape) n *= size_t(d);
        expected_bytes += n * 4;
    }
    if (buf.size() - off != expected_bytes)
        throw std::runtime_error("checkpoint: truncated payload: expected " +
                                 std::to_string(expected_bytes) + " bytes, got " +
                                 std::to_string(buf.size() - off));

    std::vector<std::vector<float>> payload;
    for (const auto& t : info.tensors) {
        size_t n = 1;
        for (auto d : t.shape) n *= size_t(d);
        std::vector<float> flat(n);
        std::memcpy(flat.data(), buf.data() + off, n * 4);
        off += n * 4;
        payload.push_back(std::move(flat));
    }
    return {std::move(info), std::move(payload)};
}

}  // namespace bdlm
