#pragma once

// Single-file JSON run configuration shared by every CLI stage. Field
// errors name the offending path (e.g. "rs.alpha"). VTBR_SEED and VTBR_OUT
// environment variables override the file; CLI flags override both.

#include <cstdint>
#include <string>
#include <vector>

#include "vtbr/attribute_store.hpp"
#include "vtbr/captiongen.hpp"
#include "vtbr/finetune.hpp"
#include "vtbr/model_core.hpp"
#include "vtbr/pretrainer.hpp"
#include "vtbr/synthscene.hpp"

namespace vtbr {

struct DatasetConfig {
    int identities = 64;
    int cameras = 4;
    SplitConfig split;
    std::vector<DomainSpec> domains;  // first entry is the training domain
};

struct EvalConfig {
    std::vector<int> cmc_ranks = {1, 5, 10};
    int saliency_images = 10;
};

struct RunConfig {
    std::uint64_t seed = 7;
    std::string out_dir;
    AttributeSchema schema;
    std::vector<CaptionTemplate> templates;
    RSConfig rs;
    int vocab_min_freq = 1;
    RenderConfig render;
    DatasetConfig dataset;
    ModelConfig model;  // image dims mirror render; vocab_size resolved later
    PretrainConfig pretrain;
    FinetuneConfig finetune;
    EvalConfig eval;
    std::string config_hash;  // hash of the canonicalized config document

    void validate() const;
};

RunConfig run_config_from_json_string(const std::string& text);
// Parses the file and applies VTBR_SEED / VTBR_OUT.
RunConfig load_run_config(const std::string& path);

}  // namespace vtbr
