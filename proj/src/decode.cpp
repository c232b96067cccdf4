#include "bdlm/decode.hpp"

#include <json.hpp>

namespace bdlm {

std::string DecodeMetrics::to_json() const {
    nlohmann::json j{{"generated", generated},
                     {"forward_passes", forward_passes},
                     {"tpf", tpf},
                     {"tps", tps},
                     {"wall_seconds", wall_seconds},
                     {"steps_per_block", steps_per_block}};
    return j.dump();
}

}  // namespace bdlm
