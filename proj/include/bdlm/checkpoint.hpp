#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "bdlm/model.hpp"

namespace bdlm {

/// On-disk layout: "BDLM" magic, u32 LE format version, u32 LE header
/// length, UTF-8 JSON header, then raw little-endian IEEE-754 f32 tensors in
/// header order.
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointTensorInfo {
    std::string name;
    std::vector<int64_t> shape;
};

struct CheckpointInfo {
    uint32_t version = kCheckpointVersion;
    int64_t step = 0;
    double validation_elbo = std::nan("");
    double final_lr = std::nan("");
    ModelConfig model;
    std::vector<CheckpointTensorInfo> tensors;
};

void save_checkpoint_raw(const std::string& path, const CheckpointInfo& info,
                         const std::vector<std::vector<float>>& payload);

CheckpointInfo load_checkpoint_info(const std::string& path);

std::pair<CheckpointInfo, std::vector<std::vector<float>>> load_checkpoint_raw(
    const std::string& path);

template <class S>
void save_checkpoint(const DenoiserParams<S>& params, CheckpointInfo info,
                     const std::string& path) {
    info.tensors.clear();
    std::vector<std::vector<float>> payload;
    for (const auto& [name, t] : params.items) {
        info.tensors.push_back({name, t.shape()});
        std::vector<float> flat(t.values().begin(), t.values().end());
        payload.push_back(std::move(flat));
    }
    save_checkpoint_raw(path, info, payload);
}

template <class S>
std::pair<CheckpointInfo, DenoiserParams<S>> load_checkpoint(const std::string& path,
                                                             bool requires_grad = true) {
    auto [info, payload] = load_checkpoint_raw(path);
    DenoiserParams<S> params;
    for (size_t i = 0; i < info.tensors.size(); ++i) {
        std::vector<S> vals(payload[i].begin(), payload[i].end());
        params.items.emplace_back(info.tensors[i].name,
                                  Tensor<S>::from(info.tensors[i].shape, std::move(vals),
                                                  requires_grad));
    }
    return {info, std::move(params)};
}

}  // namespace bdlm
