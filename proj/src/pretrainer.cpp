#include "vtbr/pretrainer.hpp"

#include <algorithm>
#include <cmath>

#include "vtbr/error.hpp"
#include "vtbr/kernels.hpp"

namespace vtbr {

void PretrainConfig::validate() const {
    if (max_lr_visual <= 0.0 || max_lr_textual <= 0.0) {
        throw ConfigError("pretrain: learning rates must be positive");
    }
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("pretrain: momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("pretrain: weight_decay must be >= 0");
    if (lookahead_alpha < 0.0 || lookahead_alpha > 1.0) {
        throw ConfigError("pretrain: lookahead_alpha must be in [0, 1]");
    }
    if (lookahead_k < 1) throw ConfigError("pretrain: lookahead_k must be >= 1");
    if (total_steps < 0 || warmup_steps < 0) throw ConfigError("pretrain: steps must be >= 0");
    if (total_steps > 0 && warmup_steps >= total_steps) {
        throw ConfigError("pretrain: warmup_steps must be < total_steps");
    }
    if (batch_size < 1) throw ConfigError("pretrain: batch_size must be >= 1");
    if (holdout < 0) throw ConfigError("pretrain: holdout must be >= 0");
}

std::pair<double, double> lr_at_step(int step, const PretrainConfig& cfg) {
    if (step < 0 || step > cfg.total_steps) {
        throw Error("lr_at_step: step " + std::to_string(step) + " outside [0, " +
                    std::to_string(cfg.total_steps) + "]");
    }
    double factor = 0.0;
    if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps) {
        factor = static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    } else {
        const double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
        const double t = span > 0.0 ? static_cast<double>(step - cfg.warmup_steps) / span : 1.0;
        factor = 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
    }
    return {cfg.max_lr_visual * factor, cfg.max_lr_textual * factor};
}

LookAheadState LookAheadState::init(const ParamStore<float>& params) {
    LookAheadState st;
    st.slow.reserve(params.arrays.size());
    for (const auto& a : params.arrays) st.slow.push_back(a.w);
    st.counter = 0;
    return st;
}

void sgd_momentum_step(ParamStore<float>& params,
                       std::vector<std::vector<float>>& velocity,
                       double lr_visual, double lr_textual,
                       double momentum, double weight_decay) {
    if (velocity.size() != params.arrays.size()) {
        throw DimensionError("sgd_momentum_step: velocity does not mirror the parameters");
    }
    if (!params.finite_grads()) {
        throw DivergenceError("sgd_momentum_step: non-finite gradient");
    }
    for (std::size_t i = 0; i < params.arrays.size(); ++i) {
        auto& a = params.arrays[i];
        auto& v = velocity[i];
        if (v.size() != a.w.size()) {
            throw DimensionError("sgd_momentum_step: velocity shape mismatch for " + a.name);
        }
        const bool visual = a.name.rfind("visual.", 0) == 0;
        const float lr = static_cast<float>(visual ? lr_visual : lr_textual);
        const float wd = a.no_decay ? 0.0f : static_cast<float>(weight_decay);
        kernels::sgd_momentum(a.w.data(), v.data(), a.g.data(), a.w.size(), lr,
                              static_cast<float>(momentum), wd);
    }
}

void lookahead_update(LookAheadState& state, ParamStore<float>& params,
                      double alpha, int k) {
    if (state.slow.size() != params.arrays.size()) {
        throw DimensionError("lookahead_update: state does not mirror the parameters");
    }
    ++state.counter;
    if (state.counter < k) return;
    for (std::size_t i = 0; i < params.arrays.size(); ++i) {
        kernels::lookahead_sync(state.slow[i].data(), params.arrays[i].w.data(),
                                state.slow[i].size(), static_cast<float>(alpha));
    }
    state.counter = 0;
}

void clip_global_norm(ParamStore<float>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& a : params.arrays) {
        sq += static_cast<double>(kernels::dot(a.g.data(), a.g.data(), a.g.size()));
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0.0) return;
    const float s = static_cast<float>(max_norm / norm);
    for (auto& a : params.arrays) kernels::scale(a.g.data(), s, a.g.size());
}

double caption_perplexity(const Model<float>& model,
                          const std::vector<CaptionSample>& samples) {
    double nll = 0.0;
    std::int64_t positions = 0;
    for (const auto& s : samples) {
        const auto features = model.visual_forward(s.image);
        const auto memory = model.project(features);
        const BicaptionLoss loss = model.bicaption_loss(memory, s.token_ids);
        nll += loss.total;
        positions += loss.predicted_positions;
    }
    if (positions == 0) throw Error("caption_perplexity: no predicted positions");
    return std::exp(nll / static_cast<double>(positions));
}

PretrainResult run_pretraining(Model<float>& model,
                               const std::vector<CaptionSample>& train,
                               const std::vector<CaptionSample>& holdout,
                               const PretrainConfig& cfg,
                               const PretrainMetricsSink& sink) {
    cfg.validate();
    if (train.empty()) throw Error("run_pretraining: empty training corpus");

    auto& params = model.params();
    std::vector<std::vector<float>> velocity;
    velocity.reserve(params.arrays.size());
    for (const auto& a : params.arrays) velocity.emplace_back(a.size(), 0.0f);
    LookAheadState lookahead = LookAheadState::init(params);

    Rng order_rng(mix64(cfg.seed, 0x0bafULL));
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = order.size();  // forces a shuffle on first use

    PretrainResult result;
    std::vector<std::vector<float>> snapshot;
    for (int step = 1; step <= cfg.total_steps; ++step) {
        // snapshot so a diverged step can be rolled back
        snapshot.clear();
        for (const auto& a : params.arrays) snapshot.push_back(a.w);

        params.zero_grads();
        double batch_fwd = 0.0;
        double batch_bwd = 0.0;
        const float scale = 1.0f / static_cast<float>(cfg.batch_size);
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor == order.size()) {
                order_rng.shuffle(order);
                cursor = 0;
            }
            const auto& sample = train[order[cursor++]];
            const BicaptionLoss loss = model.caption_step(sample.image, sample.token_ids, scale);
            batch_fwd += loss.fwd;
            batch_bwd += loss.bwd;
        }
        batch_fwd /= cfg.batch_size;
        batch_bwd /= cfg.batch_size;
        if (!std::isfinite(batch_fwd) || !std::isfinite(batch_bwd)) {
            for (std::size_t i = 0; i < params.arrays.size(); ++i) {
                params.arrays[i].w = snapshot[i];
            }
            throw DivergenceError("pretraining diverged at step " + std::to_string(step) +
                                  "; parameters rolled back to the last finite step");
        }
        if (step == 1) result.initial_loss = batch_fwd + batch_bwd;
        result.final_loss = batch_fwd + batch_bwd;

        if (cfg.clip_enabled) clip_global_norm(params, cfg.clip_norm);
        const auto [lr_v, lr_t] = lr_at_step(step, cfg);
        sgd_momentum_step(params, velocity, lr_v, lr_t, cfg.momentum, cfg.weight_decay);
        lookahead_update(lookahead, params, cfg.lookahead_alpha, cfg.lookahead_k);
        result.steps_run = step;

        if (sink) {
            PretrainStepMetrics m;
            m.step = step;
            m.loss_fwd = batch_fwd;
            m.loss_bwd = batch_bwd;
            m.lr_visual = lr_v;
            m.lr_textual = lr_t;
            if (step == cfg.total_steps && !holdout.empty()) {
                result.holdout_ppl = caption_perplexity(model, holdout);
                m.ppl_holdout = result.holdout_ppl;
            }
            sink(m);
        } else if (step == cfg.total_steps && !holdout.empty()) {
            result.holdout_ppl = caption_perplexity(model, holdout);
        }
    }
    if (cfg.total_steps == 0 && !holdout.empty()) {
        result.holdout_ppl = caption_perplexity(model, holdout);
    }
    return result;
}

}  // namespace vtbr
