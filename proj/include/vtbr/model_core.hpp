#pragma once

// The captioning network: a small residual conv backbone, a linear
// projection from the feature grid to the decoder width, and two causal
// transformer decoders that read the caption forward and backward over
// cross-attention into the projected grid. The pooled backbone output is
// the retrieval embedding.
//
// Everything is templated on the scalar type: float for training, double
// for the finite-difference gradient checks.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "vtbr/rng.hpp"
#include "vtbr/synthscene.hpp"

namespace vtbr {

struct ModelConfig {
    int image_height = 64;
    int image_width = 32;
    std::vector<int> stage_channels = {16, 32};  // each stage halves the grid
    int blocks_per_stage = 1;
    int hidden = 32;           // decoder width H
    int layers = 2;            // decoder depth L
    int heads = 4;             // attention heads A
    int vocab_size = 0;        // |Vb|
    int max_caption_len = 32;  // tokens including the boundary markers

    int grid_h() const { return image_height >> stage_channels.size(); }
    int grid_w() const { return image_width >> stage_channels.size(); }
    int grid_cells() const { return grid_h() * grid_w(); }
    int feature_channels() const { return stage_channels.back(); }  // D

    void validate() const;
};

template <typename T>
struct ParamArray {
    std::string name;
    std::vector<int> shape;
    std::vector<T> w;
    std::vector<T> g;
    bool no_decay = false;

    std::size_t size() const { return w.size(); }
};

template <typename T>
struct ParamStore {
    std::vector<ParamArray<T>> arrays;

    ParamArray<T>& add(const std::string& name, std::vector<int> shape, bool no_decay);
    ParamArray<T>* find(const std::string& name);
    const ParamArray<T>* find(const std::string& name) const;
    void zero_grads();
    std::size_t total_size() const;
    bool finite_weights() const;
    bool finite_grads() const;
};

template <typename T>
struct FeatureMap {
    int channels = 0;
    int h = 0;
    int w = 0;
    std::vector<T> v;  // CHW

    int cells() const { return h * w; }
};

enum class Direction { forward, backward };

struct BicaptionLoss {
    double total = 0.0;
    double fwd = 0.0;
    double bwd = 0.0;
    int predicted_positions = 0;  // both directions combined
};

// ---- activation caches (training-mode forward keeps these for backward) ----
template <typename T>
struct ConvCache {
    std::vector<T> in;   // input CHW
    std::vector<T> col;  // im2col matrix
    std::vector<T> pre;  // pre-activation output CHW
    int in_c = 0, in_h = 0, in_w = 0;
    int oh = 0, ow = 0;
};

template <typename T>
struct VisualCache {
    std::vector<ConvCache<T>> convs;          // all convs in execution order
    std::vector<std::vector<T>> block_sums;   // residual pre-activations
    FeatureMap<T> features;
};

template <typename T>
class Model {
public:
    Model() = default;
    explicit Model(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    void init_weights(Rng& rng);

    // ---- inference-mode pieces ----
    FeatureMap<T> visual_forward(const ImageTensor& image) const;
    // Grid flattened cell-major and mapped to H-dim vectors (plus the
    // learned per-cell position code). Result is grid_cells x hidden.
    std::vector<T> project(const FeatureMap<T>& features) const;
    // Spatial average per channel; dimension = feature_channels().
    static std::vector<T> global_pool(const FeatureMap<T>& features);
    std::vector<T> embed_image(const ImageTensor& image) const;

    // Logits for every input position (len x vocab); position k predicts
    // the next token in the reading order. The backward direction consumes
    // the reversed sequence.
    std::vector<T> decode_direction(const std::vector<T>& memory,
                                    const std::vector<int>& token_ids,
                                    Direction dir) const;

    BicaptionLoss bicaption_loss(const std::vector<T>& memory,
                                 const std::vector<int>& token_ids) const;

    // ---- training-mode pieces (accumulate into params().g) ----
    // Full image+caption step; the gradient of (grad_scale * loss) is
    // added to the parameter grads.
    BicaptionLoss caption_step(const ImageTensor& image,
                               const std::vector<int>& token_ids, T grad_scale);

    // Retrieval-head support: pooled-embedding forward with a cache, and
    // the matching backward given d(embedding).
    std::vector<T> embed_forward(const ImageTensor& image, VisualCache<T>& cache) const;
    void embed_backward(const VisualCache<T>& cache, const std::vector<T>& d_embedding,
                        T grad_scale);

    // Gradient of the summed forward-caption log-probability w.r.t. the
    // final feature map, for saliency. Returns d(feature map) values (CHW).
    std::vector<T> caption_logprob_feature_grad(const ImageTensor& image,
                                                const std::vector<int>& token_ids) const;

private:
    ModelConfig cfg_;
    ParamStore<T> params_;
};

// Test hook: zero every logit by clearing the tied embedding table.
template <typename T>
void zero_output_layer(Model<T>& model) {
    auto* e = model.params().find("embed.token");
    if (e != nullptr) std::fill(e->w.begin(), e->w.end(), T(0));
}

}  // namespace vtbr
