#pragma once

// Checkpoint format: one-line JSON manifest (format, version, stage, step,
// seed, config hash, model config, array names/shapes/offsets, payload
// hash) followed by the concatenated little-endian f32 arrays in manifest
// order. The payload hash is verified on load.

#include <cstdint>
#include <string>

#include "vtbr/model_core.hpp"

namespace vtbr {

std::uint64_t fnv1a64(const void* data, std::size_t bytes);
std::string fnv1a64_hex(const void* data, std::size_t bytes);
std::string fnv1a64_hex(const std::string& s);

struct CheckpointMeta {
    std::string stage;  // "pretrain" | "finetune" | ...
    int step = 0;
    std::uint64_t seed = 0;
    std::string config_hash;
    ModelConfig model_config;
    int num_classes = 0;  // finetune checkpoints carry the head size
};

void save_checkpoint(const std::string& path, const ParamStore<float>& params,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
    CheckpointMeta meta;
    ParamStore<float> params;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// Copies arrays with the given name prefix from a loaded store into a live
// one; shapes must agree. Returns the number of arrays copied.
int copy_arrays(const ParamStore<float>& from, ParamStore<float>& to,
                const std::string& prefix);

std::string model_config_to_json_string(const ModelConfig& cfg);
ModelConfig model_config_from_json_string(const std::string& s);

}  // namespace vtbr
