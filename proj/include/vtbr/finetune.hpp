#pragma once

// Transfer of the pretrained backbone to the retrieval task: identity
// classifier + cross-entropy + batch-hard triplet loss over PK-sampled
// batches, optimized with Adam under linear warmup.

#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "vtbr/model_core.hpp"

namespace vtbr {

struct FinetuneConfig {
    int p = 16;  // identities per batch
    int k = 4;   // images per identity
    double margin = 0.5;
    int steps = 0;
    double lr = 3.5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double warmup_frac = 0.1;  // linear warmup, then constant
    bool batch_hard = true;    // false: plain mean over all triplets
    std::uint64_t seed = 0;

    int batch_size() const { return p * k; }
    void validate() const;
};

enum class FinetuneInit { vtbr_checkpoint, random, external };

// Backbone plus identity classifier. The classifier lives in the shared
// parameter store under head.*; only visual.* and head.* train here.
struct ReIDModel {
    Model<float> model;
    int num_classes = 0;

    std::vector<float> classify(const std::vector<float>& embedding) const;
};

ReIDModel make_reid_model(const ModelConfig& cfg, int num_classes, Rng& rng);

// Batch of exactly P distinct identities, K entries each; identities with
// fewer than K images are sampled with replacement.
std::vector<std::pair<std::size_t, int>> pk_sample(
    const std::map<int, std::vector<std::size_t>>& index_by_label, int p, int k,
    Rng& rng);

// Mean over anchors of max(0, d(hardest positive) - d(nearest negative) + m)
// under Euclidean distance, or the mean over all (a, p, n) triples when
// batch_hard is false. grad (same shape as embeddings) is accumulated when
// non-null.
double triplet_loss(const std::vector<float>& embeddings, int batch, int dim,
                    const std::vector<int>& labels, double margin,
                    std::vector<float>* grad, bool batch_hard = true);

// Mean cross-entropy; grad gets (softmax - onehot)/batch when non-null.
double cross_entropy_loss(const std::vector<float>& logits, int batch, int classes,
                          const std::vector<int>& labels, std::vector<float>* grad);

// cross_entropy + triplet with unit weights.
double reid_loss(const std::vector<float>& logits, const std::vector<float>& embeddings,
                 int batch, int classes, int dim, const std::vector<int>& labels,
                 const FinetuneConfig& cfg);

struct ReidSample {
    ImageTensor image;
    int label = 0;  // contiguous training-identity label
};

struct FinetuneStepMetrics {
    int step = 0;
    double loss_ce = 0.0;
    double loss_triplet = 0.0;
    double lr = 0.0;
};

using FinetuneMetricsSink = std::function<void(const FinetuneStepMetrics&)>;

struct FinetuneResult {
    double final_loss = 0.0;
    int steps_run = 0;
};

FinetuneResult run_finetune(ReIDModel& reid, const std::vector<ReidSample>& dataset,
                            const FinetuneConfig& cfg,
                            const FinetuneMetricsSink& sink = nullptr);

}  // namespace vtbr
