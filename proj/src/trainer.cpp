#include "bdlm/trainer.hpp"

#include <fstream>

#include <json.hpp>

namespace bdlm {

std::string MetricsLog::to_jsonl() const {
    std::string out;
    for (const auto& r : records) {
        nlohmann::json j{{"step", r.step},          {"phase", r.phase},
                         {"block_size", r.block_size}, {"loss", r.loss},
                         {"grad_norm", r.grad_norm},   {"tokens_per_sec", r.tokens_per_sec}};
        out += j.dump();
        out += "\n";
    }
    return out;
}

void MetricsLog::write_file(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("metrics: cannot write " + path);
    f << to_jsonl();
}

}  // namespace bdlm
