#include "vtbr/checkpoint.hpp"

#include <fstream>

#include "vtbr/error.hpp"
#include "json.hpp"

namespace vtbr {

using nlohmann::json;

constexpr int kCheckpointVersion = 1;

std::uint64_t fnv1a64(const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string fnv1a64_hex(const void* data, std::size_t bytes) {
    static const char* digits = "0123456789abcdef";
    std::uint64_t h = fnv1a64(data, bytes);
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

std::string fnv1a64_hex(const std::string& s) { return fnv1a64_hex(s.data(), s.size()); }

namespace {

json model_config_to_json(const ModelConfig& cfg) {
    return json{{"image_height", cfg.image_height},
                {"image_width", cfg.image_width},
                {"stage_channels", cfg.stage_channels},
                {"blocks_per_stage", cfg.blocks_per_stage},
                {"hidden", cfg.hidden},
                {"layers", cfg.layers},
                {"heads", cfg.heads},
                {"vocab_size", cfg.vocab_size},
                {"max_caption_len", cfg.max_caption_len}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.image_height = j.at("image_height").get<int>();
    cfg.image_width = j.at("image_width").get<int>();
    cfg.stage_channels = j.at("stage_channels").get<std::vector<int>>();
    cfg.blocks_per_stage = j.at("blocks_per_stage").get<int>();
    cfg.hidden = j.at("hidden").get<int>();
    cfg.layers = j.at("layers").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.max_caption_len = j.at("max_caption_len").get<int>();
    return cfg;
}

}  // namespace

std::string model_config_to_json_string(const ModelConfig& cfg) {
    return model_config_to_json(cfg).dump();
}

ModelConfig model_config_from_json_string(const std::string& s) {
    try {
        return model_config_from_json(json::parse(s));
    } catch (const json::exception& e) {
        throw ParseError(std::string("model config: ") + e.what());
    }
}

void save_checkpoint(const std::string& path, const ParamStore<float>& params,
                     const CheckpointMeta& meta) {
    std::vector<float> payload;
    payload.reserve(params.total_size());
    json arrays = json::array();
    std::size_t offset = 0;
    for (const auto& a : params.arrays) {
        arrays.push_back({{"name", a.name},
                          {"shape", a.shape},
                          {"offset", offset},
                          {"no_decay", a.no_decay}});
        payload.insert(payload.end(), a.w.begin(), a.w.end());
        offset += a.size();
    }
    const std::size_t payload_bytes = payload.size() * sizeof(float);
    json manifest{{"format", "vtbr-ckpt"},
                  {"version", kCheckpointVersion},
                  {"stage", meta.stage},
                  {"step", meta.step},
                  {"seed", meta.seed},
                  {"config_hash", meta.config_hash},
                  {"model_config", model_config_to_json(meta.model_config)},
                  {"num_classes", meta.num_classes},
                  {"arrays", arrays},
                  {"payload_floats", payload.size()},
                  {"payload_hash", fnv1a64_hex(payload.data(), payload_bytes)}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out << manifest.dump() << "\n";
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload_bytes));
    if (!out) throw IoError("short write on checkpoint: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::string header;
    if (!std::getline(in, header)) throw CheckpointError("checkpoint has no manifest: " + path);
    json manifest;
    try {
        manifest = json::parse(header);
    } catch (const json::exception& e) {
        throw CheckpointError("checkpoint manifest: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "vtbr-ckpt") {
        throw CheckpointError("not a checkpoint file: " + path);
    }
    if (manifest.at("version").get<int>() != kCheckpointVersion) {
        throw CheckpointError("checkpoint version " +
                              std::to_string(manifest.at("version").get<int>()) +
                              " needs migration; this build reads version " +
                              std::to_string(kCheckpointVersion));
    }

    LoadedCheckpoint loaded;
    loaded.meta.stage = manifest.at("stage").get<std::string>();
    loaded.meta.step = manifest.at("step").get<int>();
    loaded.meta.seed = manifest.at("seed").get<std::uint64_t>();
    loaded.meta.config_hash = manifest.at("config_hash").get<std::string>();
    loaded.meta.model_config = model_config_from_json(manifest.at("model_config"));
    loaded.meta.num_classes = manifest.value("num_classes", 0);

    const std::size_t payload_floats = manifest.at("payload_floats").get<std::size_t>();
    std::vector<float> payload(payload_floats);
    in.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(payload_floats * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(payload_floats * sizeof(float))) {
        throw CheckpointError("checkpoint payload is truncated: " + path);
    }
    const std::string hash = fnv1a64_hex(payload.data(), payload_floats * sizeof(float));
    if (hash != manifest.at("payload_hash").get<std::string>()) {
        throw CheckpointError("checkpoint payload hash mismatch (corrupt file): " + path);
    }

    for (const auto& a : manifest.at("arrays")) {
        const auto name = a.at("name").get<std::string>();
        const auto shape = a.at("shape").get<std::vector<int>>();
        const auto offset = a.at("offset").get<std::size_t>();
        auto& arr = loaded.params.add(name, shape, a.value("no_decay", false));
        if (offset + arr.size() > payload.size()) {
            throw CheckpointError("checkpoint array " + name + " exceeds the payload");
        }
        std::copy(payload.begin() + static_cast<long>(offset),
                  payload.begin() + static_cast<long>(offset + arr.size()), arr.w.begin());
    }
    return loaded;
}

int copy_arrays(const ParamStore<float>& from, ParamStore<float>& to,
                const std::string& prefix) {
    int copied = 0;
    for (const auto& src : from.arrays) {
        if (src.name.rfind(prefix, 0) != 0) continue;
        auto* dst = to.find(src.name);
        if (dst == nullptr) throw CheckpointError("target store lacks array " + src.name);
        if (dst->shape != src.shape) {
            throw CheckpointError("array " + src.name + " changed shape between checkpoints");
        }
        dst->w = src.w;
        ++copied;
    }
    if (copied == 0) throw CheckpointError("no arrays matched prefix \"" + prefix + "\"");
    return copied;
}

}  // namespace vtbr
