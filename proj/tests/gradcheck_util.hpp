#pragma once

// Central finite-difference check of the caption-loss gradients, run in
// 64-bit. Each trial draws fresh parameters, a fresh image and caption,
// computes analytic gradients once, then probes random coordinates in every
// parameter group against (L(w+h) - L(w-h)) / 2h.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "vtbr/model_core.hpp"
#include "vtbr/rng.hpp"

namespace vtbr_test {

inline vtbr::ModelConfig gradcheck_config() {
    vtbr::ModelConfig cfg;
    cfg.image_height = 16;
    cfg.image_width = 8;
    cfg.stage_channels = {4, 6};
    cfg.blocks_per_stage = 1;
    cfg.hidden = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.vocab_size = 12;
    cfg.max_caption_len = 16;
    return cfg;
}

struct GradCheckResult {
    double max_rel_err = 0.0;
    int coords_checked = 0;
    std::string worst_array;
};

inline GradCheckResult run_gradcheck(int trials, std::uint64_t seed,
                                     int coords_per_group = 2) {
    const double h = 1e-4;
    const std::vector<std::string> groups{"visual.", "proj.", "embed.", "fwd.", "bwd."};
    GradCheckResult result;
    vtbr::Rng rng(seed);

    for (int trial = 0; trial < trials; ++trial) {
        vtbr::Model<double> model(gradcheck_config());
        vtbr::Rng init_rng(rng.next_u64());
        model.init_weights(init_rng);

        vtbr::ImageTensor img;
        img.height = 16;
        img.width = 8;
        img.channels = 3;
        img.values.resize(3 * 16 * 8);
        for (float& v : img.values) v = static_cast<float>(rng.uniform());

        std::vector<int> ids{0};
        const int interior = 3 + static_cast<int>(rng.uniform_below(6));
        for (int i = 0; i < interior; ++i) {
            ids.push_back(4 + static_cast<int>(rng.uniform_below(8)));
        }
        ids.push_back(1);

        auto loss_at = [&]() {
            const auto features = model.visual_forward(img);
            const auto memory = model.project(features);
            return model.bicaption_loss(memory, ids).total;
        };

        model.params().zero_grads();
        model.caption_step(img, ids, 1.0);

        for (const auto& group : groups) {
            std::vector<vtbr::ParamArray<double>*> arrays;
            for (auto& a : model.params().arrays) {
                if (a.name.rfind(group, 0) == 0) arrays.push_back(&a);
            }
            for (int c = 0; c < coords_per_group; ++c) {
                auto* arr = arrays[rng.uniform_below(arrays.size())];
                const std::size_t idx = rng.uniform_below(arr->size());
                const double saved = arr->w[idx];
                arr->w[idx] = saved + h;
                const double up = loss_at();
                arr->w[idx] = saved - h;
                const double down = loss_at();
                arr->w[idx] = saved;
                const double fd = (up - down) / (2.0 * h);
                const double analytic = arr->g[idx];
                const double rel = std::fabs(analytic - fd) /
                                   std::max({std::fabs(analytic), std::fabs(fd), 1.0});
                ++result.coords_checked;
                if (rel > result.max_rel_err) {
                    result.max_rel_err = rel;
                    result.worst_array = arr->name;
                }
            }
        }
    }
    return result;
}

}  // namespace vtbr_test
