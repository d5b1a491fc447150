#pragma once

// Joint from-scratch training of the backbone, projection and both
// decoders on (image, caption) pairs: SGD with momentum wrapped in
// LookAhead, linear warmup into cosine decay, two learning-rate scales
// (visual backbone vs textual head).

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "vtbr/model_core.hpp"

namespace vtbr {

struct PretrainConfig {
    double max_lr_visual = 0.025;    // 0.2 at reference batch 256, scaled linearly
    double max_lr_textual = 1.25e-4; // 1e-3 at reference batch 256, scaled linearly
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double lookahead_alpha = 0.5;
    int lookahead_k = 5;
    int warmup_steps = 0;
    int total_steps = 0;
    int batch_size = 32;
    int holdout = 0;  // trailing samples reserved for perplexity
    double clip_norm = 10.0;
    bool clip_enabled = false;
    std::uint64_t seed = 0;

    void validate() const;
};

// (lr_visual, lr_textual) at a step in [0, total_steps]: linear warmup to
// the max values, then cosine decay to zero.
std::pair<double, double> lr_at_step(int step, const PretrainConfig& cfg);

struct LookAheadState {
    std::vector<std::vector<float>> slow;
    int counter = 0;  // inner steps since the last sync, in [0, k)

    static LookAheadState init(const ParamStore<float>& params);
};

// One momentum-SGD update over every array: v <- momentum*v + (g + wd*p),
// p <- p - lr*v. Arrays flagged no_decay (biases, normalization parameters)
// use wd = 0. Throws DivergenceError on non-finite gradients.
void sgd_momentum_step(ParamStore<float>& params,
                       std::vector<std::vector<float>>& velocity,
                       double lr_visual, double lr_textual,
                       double momentum, double weight_decay);

// Counter increments each call; on reaching k the slow weights absorb the
// fast ones (slow += alpha*(fast - slow)) and the fast weights reset to
// them.
void lookahead_update(LookAheadState& state, ParamStore<float>& params,
                      double alpha, int k);

// Scales gradients so their global norm is at most max_norm.
void clip_global_norm(ParamStore<float>& params, double max_norm);

struct CaptionSample {
    ImageTensor image;
    std::vector<int> token_ids;
};

struct PretrainStepMetrics {
    int step = 0;
    double loss_fwd = 0.0;
    double loss_bwd = 0.0;
    double lr_visual = 0.0;
    double lr_textual = 0.0;
    std::optional<double> ppl_holdout;
};

using PretrainMetricsSink = std::function<void(const PretrainStepMetrics&)>;

struct PretrainResult {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double holdout_ppl = 0.0;  // 0 when no holdout
    int steps_run = 0;
};

// exp(mean per-position bidirectional NLL) over the given samples.
double caption_perplexity(const Model<float>& model,
                          const std::vector<CaptionSample>& samples);

PretrainResult run_pretraining(Model<float>& model,
                               const std::vector<CaptionSample>& train,
                               const std::vector<CaptionSample>& holdout,
                               const PretrainConfig& cfg,
                               const PretrainMetricsSink& sink = nullptr);

}  // namespace vtbr
