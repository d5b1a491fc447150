#pragma once

// Stage orchestration behind the CLI: run-directory layout, dataset
// generation, caption generation, pretraining, fine-tuning, evaluation and
// saliency export. Every stage is callable on its own given a run dir
// produced by the stages before it.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vtbr/evalkit.hpp"
#include "vtbr/finetune.hpp"
#include "vtbr/run_config.hpp"

namespace vtbr {

struct RunPaths {
    std::string root;
    std::string captions;
    std::string images;
    std::string ckpt;
    std::string reports;
    std::string logs;

    // Creates the directory tree under out_dir.
    static RunPaths create(const std::string& out_dir);
};

struct DomainData {
    std::string name;
    AttributeSchema schema;
    std::vector<AttributeRecord> records;
    SplitManifest split;
    RenderConfig render;
    std::string images_dir;
};

std::string domain_dir(const RunPaths& paths, const std::string& domain);
std::string image_file_path(const std::string& domain_dir, std::size_t record_index,
                            std::uint64_t seed);

// Reads a domain back from its dataset.json manifest.
DomainData load_domain(const std::string& manifest_path);

void stage_synth_data(const RunConfig& cfg, const RunPaths& paths);
void stage_gen_captions(const RunConfig& cfg, const RunPaths& paths);

struct PretrainArtifacts {
    std::string checkpoint_path;
    double holdout_ppl = 0.0;
    int vocab_size = 0;
};
PretrainArtifacts stage_pretrain(const RunConfig& cfg, const RunPaths& paths);

// init: "vtbr" (ckpt/pretrain.ckpt), "random", or a checkpoint path.
// tag names the output files (ckpt/finetune_<tag>.ckpt, logs, reports).
std::string stage_finetune(const RunConfig& cfg, const RunPaths& paths,
                           const std::string& init, std::uint64_t seed,
                           const std::string& tag);

EvalReport stage_eval(const RunConfig& cfg, const RunPaths& paths,
                      const std::string& model_path, const std::string& data_manifest,
                      const std::optional<std::string>& cross_domain_manifest,
                      const std::string& tag);

void stage_saliency(const RunConfig& cfg, const RunPaths& paths,
                    const std::string& model_path, int count);

// All stages in order; returns 0 on success.
int run_pipeline(const RunConfig& cfg, const RunPaths& paths);

// ---- helpers shared with tests ----

// Pretraining corpus for a domain: RS-selected train-split entries paired
// with encoded captions. Returns (train, holdout) honoring cfg.pretrain.holdout.
std::pair<std::vector<CaptionSample>, std::vector<CaptionSample>> build_caption_samples(
    const RunConfig& cfg, const DomainData& domain, const Vocabulary& vocab,
    const std::vector<CorpusEntry>& corpus, bool load_from_disk);

// Fine-tuning dataset over the train split with contiguous labels.
std::pair<std::vector<ReidSample>, int> build_reid_samples(const DomainData& domain,
                                                           bool load_from_disk);

// Query/gallery embeddings + meta for a domain's test split.
EvalReport evaluate_model(const Model<float>& model, const DomainData& domain,
                          const std::vector<int>& cmc_ranks, bool load_from_disk);

// Caption token ids for one record under the run config (template chosen by
// identity, frequencies from the full domain record set).
std::vector<int> caption_ids_for_record(const RunConfig& cfg, const DomainData& domain,
                                        const FrequencyTable& freq, const Vocabulary& vocab,
                                        std::size_t record_index);

}  // namespace vtbr
