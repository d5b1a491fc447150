#include "doctest.h"

#include "gradcheck_util.hpp"

// Quick version; the acceptance suite runs the full 100 trials.
TEST_CASE("caption-loss gradients match central finite differences") {
    const auto result = vtbr_test::run_gradcheck(10, 71);
    CAPTURE(result.worst_array);
    CHECK(result.coords_checked == 100);
    CHECK(result.max_rel_err <= 1e-4);
}

// The retrieval-path backward (pooled embedding) shares the conv backward
// with the caption path; check it directly through a random linear target.
#include "vtbr/rng.hpp"

TEST_CASE("embedding-path gradients match finite differences") {
    using namespace vtbr;
    Model<double> model(vtbr_test::gradcheck_config());
    Rng rng(123);
    model.init_weights(rng);

    ImageTensor img;
    img.height = 16;
    img.width = 8;
    img.channels = 3;
    img.values.resize(3 * 16 * 8);
    for (float& v : img.values) v = static_cast<float>(rng.uniform());

    // scalar target: dot(embedding, t)
    std::vector<double> target(static_cast<std::size_t>(model.config().feature_channels()));
    for (double& t : target) t = rng.normal();

    auto loss_at = [&]() {
        const auto emb = model.embed_image(img);
        double s = 0.0;
        for (std::size_t i = 0; i < emb.size(); ++i) s += emb[i] * target[i];
        return s;
    };

    model.params().zero_grads();
    VisualCache<double> cache;
    model.embed_forward(img, cache);
    model.embed_backward(cache, target, 1.0);

    const double h = 1e-5;
    double max_rel = 0.0;
    for (int probe = 0; probe < 40; ++probe) {
        auto& arrays = model.params().arrays;
        auto& arr = arrays[rng.uniform_below(arrays.size())];
        if (arr.name.rfind("visual.", 0) != 0) continue;  // only the backbone feeds the pool
        const std::size_t idx = rng.uniform_below(arr.size());
        const double saved = arr.w[idx];
        arr.w[idx] = saved + h;
        const double up = loss_at();
        arr.w[idx] = saved - h;
        const double down = loss_at();
        arr.w[idx] = saved;
        const double fd = (up - down) / (2.0 * h);
        const double rel = std::fabs(arr.g[idx] - fd) /
                           std::max({std::fabs(arr.g[idx]), std::fabs(fd), 1.0});
        max_rel = std::max(max_rel, rel);
    }
    CHECK(max_rel <= 1e-6);
}
