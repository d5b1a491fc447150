#include "vtbr/model_core.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "vtbr/error.hpp"
#include "vtbr/kernels.hpp"

namespace vtbr {

void ModelConfig::validate() const {
    if (stage_channels.empty()) throw ConfigError("model: stage_channels must be non-empty");
    for (int c : stage_channels) {
        if (c < 1) throw ConfigError("model: stage channels must be positive");
    }
    if (blocks_per_stage < 0) throw ConfigError("model: blocks_per_stage must be >= 0");
    if (hidden < 1 || layers < 1 || heads < 1 || vocab_size < 5 || max_caption_len < 3) {
        throw ConfigError("model: dims must be positive (vocab >= 5, max len >= 3)");
    }
    if (hidden % heads != 0) throw ConfigError("model: hidden must be divisible by heads");
    const int stages = static_cast<int>(stage_channels.size());
    if ((image_height >> stages) << stages != image_height ||
        (image_width >> stages) << stages != image_width) {
        throw ConfigError("model: image dims must be divisible by 2^stages");
    }
    if (grid_h() < 1 || grid_w() < 1) throw ConfigError("model: feature grid has no cells");
}

// ---------------------------------------------------------------------------
// ParamStore

template <typename T>
ParamArray<T>& ParamStore<T>::add(const std::string& name, std::vector<int> shape,
                                  bool no_decay) {
    ParamArray<T> arr;
    arr.name = name;
    arr.shape = std::move(shape);
    std::size_t n = 1;
    for (int d : arr.shape) n *= static_cast<std::size_t>(d);
    arr.w.assign(n, T(0));
    arr.g.assign(n, T(0));
    arr.no_decay = no_decay;
    arrays.push_back(std::move(arr));
    return arrays.back();
}

template <typename T>
ParamArray<T>* ParamStore<T>::find(const std::string& name) {
    for (auto& a : arrays) {
        if (a.name == name) return &a;
    }
    return nullptr;
}

template <typename T>
const ParamArray<T>* ParamStore<T>::find(const std::string& name) const {
    for (const auto& a : arrays) {
        if (a.name == name) return &a;
    }
    return nullptr;
}

template <typename T>
void ParamStore<T>::zero_grads() {
    for (auto& a : arrays) std::fill(a.g.begin(), a.g.end(), T(0));
}

template <typename T>
std::size_t ParamStore<T>::total_size() const {
    std::size_t n = 0;
    for (const auto& a : arrays) n += a.size();
    return n;
}

template <typename T>
bool ParamStore<T>::finite_weights() const {
    for (const auto& a : arrays) {
        for (T v : a.w) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
    }
    return true;
}

template <typename T>
bool ParamStore<T>::finite_grads() const {
    for (const auto& a : arrays) {
        for (T v : a.g) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// Small math helpers

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
constexpr double kLnEps = 1e-5;

template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + T(std::erf(static_cast<double>(x) * kInvSqrt2)));
}

template <typename T>
T gelu_grad(T x) {
    const double xd = static_cast<double>(x);
    const double cdf = 0.5 * (1.0 + std::erf(xd * kInvSqrt2));
    return T(cdf + xd * kInvSqrt2Pi * std::exp(-0.5 * xd * xd));
}

// y = x * W^T + b; x is [m x in], W is [out x in].
template <typename T>
void linear_forward(const T* x, const T* w, const T* b, T* y,
                    std::size_t m, std::size_t in, std::size_t out) {
    kernels::gemm_nt(m, out, in, x, w, y, false);
    if (b != nullptr) {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t o = 0; o < out; ++o) y[i * out + o] += b[o];
        }
    }
}

// dx (+)= dy * W; dW += dy^T * x; db += column sums of dy.
template <typename T>
void linear_backward(const T* x, const T* w, const T* dy,
                     T* dx, bool dx_accumulate, T* dw, T* db,
                     std::size_t m, std::size_t in, std::size_t out) {
    if (dx != nullptr) kernels::gemm_nn(m, in, out, dy, w, dx, dx_accumulate);
    if (dw != nullptr) kernels::gemm_tn(out, in, m, dy, x, dw, true);
    if (db != nullptr) {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t o = 0; o < out; ++o) db[o] += dy[i * out + o];
        }
    }
}

template <typename T>
struct LnCache {
    std::vector<T> xhat;  // [m x h]
    std::vector<T> rstd;  // [m]
};

template <typename T>
void layernorm_forward(const T* x, const T* g, const T* b, T* y,
                       std::size_t m, std::size_t h, LnCache<T>& cache) {
    cache.xhat.resize(m * h);
    cache.rstd.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = x + i * h;
        T mean = kernels::sum(row, h) / T(h);
        T var = T(0);
        for (std::size_t j = 0; j < h; ++j) {
            const T d = row[j] - mean;
            var += d * d;
        }
        var /= T(h);
        const T rstd = T(1) / std::sqrt(var + T(kLnEps));
        cache.rstd[i] = rstd;
        for (std::size_t j = 0; j < h; ++j) {
            const T xh = (row[j] - mean) * rstd;
            cache.xhat[i * h + j] = xh;
            y[i * h + j] = g[j] * xh + b[j];
        }
    }
}

template <typename T>
void layernorm_backward(const T* g, const T* dy, const LnCache<T>& cache,
                        T* dx, bool dx_accumulate, T* dg, T* db,
                        std::size_t m, std::size_t h) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* dyr = dy + i * h;
        const T* xh = cache.xhat.data() + i * h;
        T sum_dxhat = T(0);
        T sum_dxhat_xhat = T(0);
        for (std::size_t j = 0; j < h; ++j) {
            const T dxhat = dyr[j] * g[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xh[j];
            if (dg != nullptr) dg[j] += dyr[j] * xh[j];
            if (db != nullptr) db[j] += dyr[j];
        }
        const T rstd = cache.rstd[i];
        for (std::size_t j = 0; j < h; ++j) {
            const T dxhat = dyr[j] * g[j];
            const T v = (dxhat - sum_dxhat / T(h) - xh[j] * sum_dxhat_xhat / T(h)) * rstd;
            if (dx_accumulate) {
                dx[i * h + j] += v;
            } else {
                dx[i * h + j] = v;
            }
        }
    }
}

// Softmax over the first `valid` entries of a row; the rest become zero.
template <typename T>
void prefix_softmax(T* row, std::size_t valid, std::size_t cols) {
    T mx = row[0];
    for (std::size_t j = 1; j < valid; ++j) mx = row[j] > mx ? row[j] : mx;
    T total = T(0);
    for (std::size_t j = 0; j < valid; ++j) {
        row[j] = std::exp(row[j] - mx);
        total += row[j];
    }
    const T inv = T(1) / total;
    for (std::size_t j = 0; j < valid; ++j) row[j] *= inv;
    for (std::size_t j = valid; j < cols; ++j) row[j] = T(0);
}

}  // namespace

// ---------------------------------------------------------------------------
// Parameter layout

namespace {

template <typename T>
void register_attention(ParamStore<T>& ps, const std::string& prefix, int h) {
    for (const char* nm : {"wq", "wk", "wv", "wo"}) {
        ps.add(prefix + "." + nm, {h, h}, false);
    }
    for (const char* nm : {"bq", "bk", "bv", "bo"}) {
        ps.add(prefix + "." + nm, {h}, true);
    }
}

template <typename T>
void register_decoder(ParamStore<T>& ps, const std::string& dir, const ModelConfig& cfg) {
    const int h = cfg.hidden;
    ps.add(dir + ".pos", {cfg.max_caption_len, h}, false);
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = dir + ".l" + std::to_string(l);
        ps.add(p + ".ln1.g", {h}, true);
        ps.add(p + ".ln1.b", {h}, true);
        register_attention(ps, p + ".self", h);
        ps.add(p + ".ln2.g", {h}, true);
        ps.add(p + ".ln2.b", {h}, true);
        register_attention(ps, p + ".cross", h);
        ps.add(p + ".ln3.g", {h}, true);
        ps.add(p + ".ln3.b", {h}, true);
        ps.add(p + ".mlp.w1", {4 * h, h}, false);
        ps.add(p + ".mlp.b1", {4 * h}, true);
        ps.add(p + ".mlp.w2", {h, 4 * h}, false);
        ps.add(p + ".mlp.b2", {h}, true);
    }
    ps.add(dir + ".lnf.g", {h}, true);
    ps.add(dir + ".lnf.b", {h}, true);
}

}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    int ci = 3;
    for (std::size_t s = 0; s < cfg_.stage_channels.size(); ++s) {
        const int co = cfg_.stage_channels[s];
        const std::string sp = "visual.s" + std::to_string(s);
        params_.add(sp + ".down.w", {co, ci, 3, 3}, false);
        params_.add(sp + ".down.b", {co}, true);
        for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
            const std::string bp = sp + ".b" + std::to_string(b);
            params_.add(bp + ".c1.w", {co, co, 3, 3}, false);
            params_.add(bp + ".c1.b", {co}, true);
            params_.add(bp + ".c2.w", {co, co, 3, 3}, false);
            params_.add(bp + ".c2.b", {co}, true);
        }
        ci = co;
    }
    params_.add("proj.w", {cfg_.hidden, cfg_.feature_channels()}, false);
    params_.add("proj.b", {cfg_.hidden}, true);
    params_.add("proj.mem_pos", {cfg_.grid_cells(), cfg_.hidden}, false);
    params_.add("embed.token", {cfg_.vocab_size, cfg_.hidden}, false);
    register_decoder(params_, "fwd", cfg_);
    register_decoder(params_, "bwd", cfg_);
}

template <typename T>
void Model<T>::init_weights(Rng& rng) {
    for (auto& a : params_.arrays) {
        if (a.name.find(".ln") != std::string::npos) {
            const T v = a.name.back() == 'g' ? T(1) : T(0);
            std::fill(a.w.begin(), a.w.end(), v);
            continue;
        }
        if (a.no_decay) {  // remaining no-decay arrays are biases
            std::fill(a.w.begin(), a.w.end(), T(0));
            continue;
        }
        double std_dev = 0.02;
        if (a.shape.size() == 4) {
            const double fan_in = static_cast<double>(a.shape[1]) * a.shape[2] * a.shape[3];
            std_dev = std::sqrt(2.0 / fan_in);
        } else if (a.name.find("pos") != std::string::npos) {
            std_dev = 0.01;
        }
        for (T& w : a.w) w = T(std_dev * rng.normal());
    }
}

// ---------------------------------------------------------------------------
// Conv backbone

namespace {

template <typename T>
void im2col(const T* in, int ci, int h, int w, int stride, T* col, int oh, int ow) {
    // col is [(ci*9) x (oh*ow)], 3x3 kernel, pad 1.
    const int cells = oh * ow;
    for (int c = 0; c < ci; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                T* crow = col + static_cast<std::size_t>((c * 9 + ky * 3 + kx)) * cells;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - 1;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx - 1;
                        T v = T(0);
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                            v = in[(static_cast<std::size_t>(c) * h + iy) * w + ix];
                        }
                        crow[oy * ow + ox] = v;
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, int ci, int h, int w, int stride, T* din, int oh, int ow) {
    const int cells = oh * ow;
    for (int c = 0; c < ci; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const T* crow = col + static_cast<std::size_t>((c * 9 + ky * 3 + kx)) * cells;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx - 1;
                        if (ix < 0 || ix >= w) continue;
                        din[(static_cast<std::size_t>(c) * h + iy) * w + ix] += crow[oy * ow + ox];
                    }
                }
            }
        }
    }
}

// Forward one 3x3 conv, caching what the backward pass needs. Output is the
// pre-activation.
template <typename T>
void conv_forward(const std::vector<T>& in, int ci, int h, int w, int stride,
                  const ParamArray<T>& wt, const ParamArray<T>& bias,
                  ConvCache<T>& cache, std::vector<T>& out, int& oh, int& ow) {
    oh = (h + 2 - 3) / stride + 1;
    ow = (w + 2 - 3) / stride + 1;
    const int co = wt.shape[0];
    const int cells = oh * ow;
    cache.in = in;
    cache.in_c = ci;
    cache.in_h = h;
    cache.in_w = w;
    cache.oh = oh;
    cache.ow = ow;
    cache.col.resize(static_cast<std::size_t>(ci) * 9 * cells);
    im2col(in.data(), ci, h, w, stride, cache.col.data(), oh, ow);
    out.resize(static_cast<std::size_t>(co) * cells);
    kernels::gemm_nn(static_cast<std::size_t>(co), static_cast<std::size_t>(cells),
                     static_cast<std::size_t>(ci) * 9, wt.w.data(), cache.col.data(),
                     out.data(), false);
    for (int o = 0; o < co; ++o) {
        T* row = out.data() + static_cast<std::size_t>(o) * cells;
        const T b = bias.w[static_cast<std::size_t>(o)];
        for (int i = 0; i < cells; ++i) row[i] += b;
    }
    cache.pre = out;
}

// dout is d(pre-activation). Returns d(input) in din (overwritten).
template <typename T>
void conv_backward(const ConvCache<T>& cache, int stride,
                   ParamArray<T>& wt, ParamArray<T>& bias,
                   const std::vector<T>& dout, std::vector<T>& din) {
    const int co = wt.shape[0];
    const int ci = cache.in_c;
    const int cells = cache.oh * cache.ow;
    kernels::gemm_nt(static_cast<std::size_t>(co), static_cast<std::size_t>(ci) * 9,
                     static_cast<std::size_t>(cells), dout.data(), cache.col.data(),
                     wt.g.data(), true);
    for (int o = 0; o < co; ++o) {
        bias.g[static_cast<std::size_t>(o)] +=
            kernels::sum(dout.data() + static_cast<std::size_t>(o) * cells,
                         static_cast<std::size_t>(cells));
    }
    std::vector<T> dcol(static_cast<std::size_t>(ci) * 9 * cells);
    kernels::gemm_tn(static_cast<std::size_t>(ci) * 9, static_cast<std::size_t>(cells),
                     static_cast<std::size_t>(co), wt.w.data(), dout.data(), dcol.data(),
                     false);
    din.assign(static_cast<std::size_t>(ci) * cache.in_h * cache.in_w, T(0));
    col2im_add(dcol.data(), ci, cache.in_h, cache.in_w, stride, din.data(), cache.oh,
               cache.ow);
}

template <typename T>
void gelu_inplace(std::vector<T>& x) {
    for (T& v : x) v = gelu(v);
}

}  // namespace

template <typename T>
std::vector<T> Model<T>::embed_forward(const ImageTensor& image, VisualCache<T>& cache) const {
    if (image.height != cfg_.image_height || image.width != cfg_.image_width ||
        image.channels != 3) {
        throw DimensionError("image shape does not match the model config");
    }
    cache.convs.clear();
    cache.block_sums.clear();

    std::vector<T> cur(image.values.begin(), image.values.end());
    int h = image.height;
    int w = image.width;
    int ci = 3;
    for (std::size_t s = 0; s < cfg_.stage_channels.size(); ++s) {
        const int co = cfg_.stage_channels[s];
        const std::string sp = "visual.s" + std::to_string(s);
        int oh = 0, ow = 0;
        {
            cache.convs.emplace_back();
            std::vector<T> out;
            conv_forward(cur, ci, h, w, 2, *params_.find(sp + ".down.w"),
                         *params_.find(sp + ".down.b"), cache.convs.back(), out, oh, ow);
            gelu_inplace(out);
            cur = std::move(out);
            h = oh;
            w = ow;
            ci = co;
        }
        for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
            const std::string bp = sp + ".b" + std::to_string(b);
            std::vector<T> t1;
            int th = 0, tw = 0;
            cache.convs.emplace_back();
            conv_forward(cur, co, h, w, 1, *params_.find(bp + ".c1.w"),
                         *params_.find(bp + ".c1.b"), cache.convs.back(), t1, th, tw);
            gelu_inplace(t1);
            std::vector<T> t2;
            cache.convs.emplace_back();
            conv_forward(t1, co, h, w, 1, *params_.find(bp + ".c2.w"),
                         *params_.find(bp + ".c2.b"), cache.convs.back(), t2, th, tw);
            // residual add, then activation
            for (std::size_t i = 0; i < t2.size(); ++i) t2[i] += cur[i];
            cache.block_sums.push_back(t2);
            gelu_inplace(t2);
            cur = std::move(t2);
        }
    }
    cache.features.channels = ci;
    cache.features.h = h;
    cache.features.w = w;
    cache.features.v = cur;

    // global average pool
    const int cells = h * w;
    std::vector<T> pooled(static_cast<std::size_t>(ci));
    for (int c = 0; c < ci; ++c) {
        pooled[static_cast<std::size_t>(c)] =
            kernels::sum(cur.data() + static_cast<std::size_t>(c) * cells,
                         static_cast<std::size_t>(cells)) /
            T(cells);
    }
    return pooled;
}

namespace {

// Walks the conv stack backward from d(feature map). The cache holds convs
// in execution order; blocks contributed their residual pre-activations.
template <typename T>
void visual_backward_impl(const ModelConfig& cfg, ParamStore<T>& params,
                          const VisualCache<T>& cache, std::vector<T> dcur) {
    int conv_idx = static_cast<int>(cache.convs.size()) - 1;
    int sum_idx = static_cast<int>(cache.block_sums.size()) - 1;
    for (int s = static_cast<int>(cfg.stage_channels.size()) - 1; s >= 0; --s) {
        const std::string sp = "visual.s" + std::to_string(s);
        for (int b = cfg.blocks_per_stage - 1; b >= 0; --b) {
            const std::string bp = sp + ".b" + std::to_string(b);
            const auto& sum_pre = cache.block_sums[static_cast<std::size_t>(sum_idx--)];
            // through the post-residual activation
            for (std::size_t i = 0; i < dcur.size(); ++i) dcur[i] *= gelu_grad(sum_pre[i]);
            // c2 branch
            const auto& c2 = cache.convs[static_cast<std::size_t>(conv_idx--)];
            std::vector<T> d_t1;
            conv_backward(c2, 1, *params.find(bp + ".c2.w"), *params.find(bp + ".c2.b"),
                          dcur, d_t1);
            const auto& c1 = cache.convs[static_cast<std::size_t>(conv_idx--)];
            for (std::size_t i = 0; i < d_t1.size(); ++i) d_t1[i] *= gelu_grad(c1.pre[i]);
            std::vector<T> d_in;
            conv_backward(c1, 1, *params.find(bp + ".c1.w"), *params.find(bp + ".c1.b"),
                          d_t1, d_in);
            // skip connection
            for (std::size_t i = 0; i < dcur.size(); ++i) dcur[i] += d_in[i];
        }
        const auto& down = cache.convs[static_cast<std::size_t>(conv_idx--)];
        for (std::size_t i = 0; i < dcur.size(); ++i) dcur[i] *= gelu_grad(down.pre[i]);
        std::vector<T> d_in;
        conv_backward(down, 2, *params.find(sp + ".down.w"), *params.find(sp + ".down.b"),
                      dcur, d_in);
        dcur = std::move(d_in);
    }
}

}  // namespace

template <typename T>
void Model<T>::embed_backward(const VisualCache<T>& cache, const std::vector<T>& d_embedding,
                              T grad_scale) {
    const int cells = cache.features.cells();
    std::vector<T> d_feat(cache.features.v.size());
    for (int c = 0; c < cache.features.channels; ++c) {
        const T d = grad_scale * d_embedding[static_cast<std::size_t>(c)] / T(cells);
        for (int i = 0; i < cells; ++i) {
            d_feat[static_cast<std::size_t>(c) * cells + i] = d;
        }
    }
    visual_backward_impl(cfg_, params_, cache, std::move(d_feat));
}

template <typename T>
FeatureMap<T> Model<T>::visual_forward(const ImageTensor& image) const {
    VisualCache<T> cache;
    embed_forward(image, cache);
    return std::move(cache.features);
}

template <typename T>
std::vector<T> Model<T>::global_pool(const FeatureMap<T>& features) {
    const int cells = features.cells();
    std::vector<T> pooled(static_cast<std::size_t>(features.channels));
    for (int c = 0; c < features.channels; ++c) {
        pooled[static_cast<std::size_t>(c)] =
            kernels::sum(features.v.data() + static_cast<std::size_t>(c) * cells,
                         static_cast<std::size_t>(cells)) /
            T(cells);
    }
    return pooled;
}

template <typename T>
std::vector<T> Model<T>::embed_image(const ImageTensor& image) const {
    VisualCache<T> cache;
    return embed_forward(image, cache);
}

// ---------------------------------------------------------------------------
// Projection

namespace {

// CHW feature map -> cell-major [cells x channels] matrix.
template <typename T>
std::vector<T> flatten_cells(const FeatureMap<T>& f) {
    const int cells = f.cells();
    std::vector<T> out(static_cast<std::size_t>(cells) * f.channels);
    for (int c = 0; c < f.channels; ++c) {
        for (int i = 0; i < cells; ++i) {
            out[static_cast<std::size_t>(i) * f.channels + c] =
                f.v[static_cast<std::size_t>(c) * cells + i];
        }
    }
    return out;
}

}  // namespace

template <typename T>
std::vector<T> Model<T>::project(const FeatureMap<T>& features) const {
    if (features.cells() != cfg_.grid_cells() || features.channels != cfg_.feature_channels()) {
        throw DimensionError("feature map does not match the model grid");
    }
    const int cells = features.cells();
    const int d = features.channels;
    const int h = cfg_.hidden;
    const std::vector<T> mem_in = flatten_cells(features);
    std::vector<T> memory(static_cast<std::size_t>(cells) * h);
    const auto* pw = params_.find("proj.w");
    const auto* pb = params_.find("proj.b");
    const auto* pos = params_.find("proj.mem_pos");
    linear_forward(mem_in.data(), pw->w.data(), pb->w.data(), memory.data(),
                   static_cast<std::size_t>(cells), static_cast<std::size_t>(d),
                   static_cast<std::size_t>(h));
    for (std::size_t i = 0; i < memory.size(); ++i) memory[i] += pos->w[i];
    return memory;
}

// ---------------------------------------------------------------------------
// Decoder

namespace {

template <typename T>
struct AttnCache {
    std::vector<T> q, k, v;  // [tq x h], [tk x h], [tk x h]
    std::vector<T> probs;    // [heads x tq x tk]
    std::vector<T> ctx;      // [tq x h]
};

template <typename T>
struct DecBlockCache {
    std::vector<T> x0;  // block input
    LnCache<T> ln1;
    std::vector<T> n1;
    AttnCache<T> self_at;
    std::vector<T> x1;
    LnCache<T> ln2;
    std::vector<T> n2;
    AttnCache<T> cross_at;
    std::vector<T> x2;
    LnCache<T> ln3;
    std::vector<T> n3;
    std::vector<T> mlp_pre;  // [t x 4h]
    std::vector<T> mlp_act;
};

template <typename T>
struct DecodeCache {
    std::vector<int> seq;  // reading-order ids
    std::vector<T> emb;    // [t x h]
    std::vector<DecBlockCache<T>> blocks;
    std::vector<T> xfinal;
    LnCache<T> lnf;
    std::vector<T> hfinal;
    std::vector<T> logits;  // [t x vocab]
};

struct AttnParamNames {
    std::string wq, bq, wk, bk, wv, bv, wo, bo;
    explicit AttnParamNames(const std::string& p)
        : wq(p + ".wq"), bq(p + ".bq"), wk(p + ".wk"), bk(p + ".bk"),
          wv(p + ".wv"), bv(p + ".bv"), wo(p + ".wo"), bo(p + ".bo") {}
};

template <typename T>
void gather_head(const T* x, std::size_t rows, std::size_t h, std::size_t hd,
                 std::size_t head, T* out) {
    for (std::size_t i = 0; i < rows; ++i) {
        const T* src = x + i * h + head * hd;
        T* dst = out + i * hd;
        for (std::size_t d = 0; d < hd; ++d) dst[d] = src[d];
    }
}

template <typename T>
void scatter_head_add(const T* in, std::size_t rows, std::size_t h, std::size_t hd,
                      std::size_t head, T* x) {
    for (std::size_t i = 0; i < rows; ++i) {
        const T* src = in + i * hd;
        T* dst = x + i * h + head * hd;
        for (std::size_t d = 0; d < hd; ++d) dst[d] += src[d];
    }
}

// Multi-head attention: queries from xq [tq x h], keys/values from xkv
// [tk x h]. Causal restricts row i to keys 0..i (requires tq == tk).
template <typename T>
void attention_forward(const ParamStore<T>& ps, const AttnParamNames& n,
                       const T* xq, std::size_t tq, const T* xkv, std::size_t tk,
                       std::size_t h, std::size_t heads, bool causal,
                       AttnCache<T>& cache, std::vector<T>& out) {
    const std::size_t hd = h / heads;
    const T scale = T(1) / std::sqrt(T(hd));
    cache.q.resize(tq * h);
    cache.k.resize(tk * h);
    cache.v.resize(tk * h);
    linear_forward(xq, ps.find(n.wq)->w.data(), ps.find(n.bq)->w.data(), cache.q.data(),
                   tq, h, h);
    linear_forward(xkv, ps.find(n.wk)->w.data(), ps.find(n.bk)->w.data(), cache.k.data(),
                   tk, h, h);
    linear_forward(xkv, ps.find(n.wv)->w.data(), ps.find(n.bv)->w.data(), cache.v.data(),
                   tk, h, h);
    cache.probs.assign(heads * tq * tk, T(0));
    cache.ctx.assign(tq * h, T(0));
    std::vector<T> qh(tq * hd), kh(tk * hd), vh(tk * hd), scores(tq * tk), ctxh(tq * hd);
    for (std::size_t head = 0; head < heads; ++head) {
        gather_head(cache.q.data(), tq, h, hd, head, qh.data());
        gather_head(cache.k.data(), tk, h, hd, head, kh.data());
        gather_head(cache.v.data(), tk, h, hd, head, vh.data());
        kernels::gemm_nt(tq, tk, hd, qh.data(), kh.data(), scores.data(), false);
        for (std::size_t i = 0; i < tq; ++i) {
            T* row = scores.data() + i * tk;
            for (std::size_t j = 0; j < tk; ++j) row[j] *= scale;
            const std::size_t valid = causal ? i + 1 : tk;
            prefix_softmax(row, valid, tk);
        }
        std::copy(scores.begin(), scores.end(), cache.probs.begin() + head * tq * tk);
        kernels::gemm_nn(tq, hd, tk, scores.data(), vh.data(), ctxh.data(), false);
        scatter_head_add(ctxh.data(), tq, h, hd, head, cache.ctx.data());
    }
    out.resize(tq * h);
    linear_forward(cache.ctx.data(), ps.find(n.wo)->w.data(), ps.find(n.bo)->w.data(),
                   out.data(), tq, h, h);
}

// d_out -> d_xq (overwritten) and d_xkv (accumulated).
template <typename T>
void attention_backward(ParamStore<T>& ps, const AttnParamNames& n,
                        const T* xq, std::size_t tq, const T* xkv, std::size_t tk,
                        std::size_t h, std::size_t heads, bool causal,
                        const AttnCache<T>& cache, const std::vector<T>& d_out,
                        std::vector<T>& d_xq, T* d_xkv_accum) {
    const std::size_t hd = h / heads;
    const T scale = T(1) / std::sqrt(T(hd));
    std::vector<T> d_ctx(tq * h);
    linear_backward(cache.ctx.data(), ps.find(n.wo)->w.data(), d_out.data(), d_ctx.data(),
                    false, ps.find(n.wo)->g.data(), ps.find(n.bo)->g.data(), tq, h, h);

    std::vector<T> dq(tq * h, T(0)), dk(tk * h, T(0)), dv(tk * h, T(0));
    std::vector<T> qh(tq * hd), kh(tk * hd), vh(tk * hd);
    std::vector<T> d_ctxh(tq * hd), dp(tq * tk), ds(tq * tk), dqh(tq * hd), dkh(tk * hd),
        dvh(tk * hd);
    for (std::size_t head = 0; head < heads; ++head) {
        gather_head(cache.q.data(), tq, h, hd, head, qh.data());
        gather_head(cache.k.data(), tk, h, hd, head, kh.data());
        gather_head(cache.v.data(), tk, h, hd, head, vh.data());
        gather_head(d_ctx.data(), tq, h, hd, head, d_ctxh.data());
        const T* probs = cache.probs.data() + head * tq * tk;
        kernels::gemm_nt(tq, tk, hd, d_ctxh.data(), vh.data(), dp.data(), false);
        kernels::gemm_tn(tk, hd, tq, probs, d_ctxh.data(), dvh.data(), false);
        for (std::size_t i = 0; i < tq; ++i) {
            const std::size_t valid = causal ? i + 1 : tk;
            const T* prow = probs + i * tk;
            const T* dprow = dp.data() + i * tk;
            T inner = T(0);
            for (std::size_t j = 0; j < valid; ++j) inner += dprow[j] * prow[j];
            T* dsrow = ds.data() + i * tk;
            for (std::size_t j = 0; j < valid; ++j) {
                dsrow[j] = prow[j] * (dprow[j] - inner) * scale;
            }
            for (std::size_t j = valid; j < tk; ++j) dsrow[j] = T(0);
        }
        kernels::gemm_nn(tq, hd, tk, ds.data(), kh.data(), dqh.data(), false);
        kernels::gemm_tn(tk, hd, tq, ds.data(), qh.data(), dkh.data(), false);
        scatter_head_add(dqh.data(), tq, h, hd, head, dq.data());
        scatter_head_add(dkh.data(), tk, h, hd, head, dk.data());
        scatter_head_add(dvh.data(), tk, h, hd, head, dv.data());
    }

    d_xq.assign(tq * h, T(0));
    linear_backward(xq, ps.find(n.wq)->w.data(), dq.data(), d_xq.data(), false,
                    ps.find(n.wq)->g.data(), ps.find(n.bq)->g.data(), tq, h, h);
    if (d_xkv_accum != nullptr) {
        linear_backward(xkv, ps.find(n.wk)->w.data(), dk.data(), d_xkv_accum, true,
                        ps.find(n.wk)->g.data(), ps.find(n.bk)->g.data(), tk, h, h);
        linear_backward(xkv, ps.find(n.wv)->w.data(), dv.data(), d_xkv_accum, true,
                        ps.find(n.wv)->g.data(), ps.find(n.bv)->g.data(), tk, h, h);
    } else {
        linear_backward(xkv, ps.find(n.wk)->w.data(), dk.data(), static_cast<T*>(nullptr),
                        false, ps.find(n.wk)->g.data(), ps.find(n.bk)->g.data(), tk, h, h);
        linear_backward(xkv, ps.find(n.wv)->w.data(), dv.data(), static_cast<T*>(nullptr),
                        false, ps.find(n.wv)->g.data(), ps.find(n.bv)->g.data(), tk, h, h);
    }
}

const char* dir_prefix(Direction dir) {
    return dir == Direction::forward ? "fwd" : "bwd";
}

template <typename T>
void decode_forward_impl(const ModelConfig& cfg, const ParamStore<T>& ps,
                         const std::vector<T>& memory, const std::vector<int>& token_ids,
                         Direction dir, DecodeCache<T>& cache) {
    const std::size_t len = token_ids.size();
    if (len < 2) throw DimensionError("caption must include both boundary markers");
    if (static_cast<int>(len) > cfg.max_caption_len) {
        throw DimensionError("caption longer than the configured max length");
    }
    for (int id : token_ids) {
        if (id < 0 || id >= cfg.vocab_size) throw DimensionError("token id outside vocabulary");
    }
    const std::size_t h = static_cast<std::size_t>(cfg.hidden);
    const std::size_t cells = static_cast<std::size_t>(cfg.grid_cells());
    if (memory.size() != cells * h) throw DimensionError("memory has the wrong shape");

    cache.seq = token_ids;
    if (dir == Direction::backward) std::reverse(cache.seq.begin(), cache.seq.end());
    const std::string dp = dir_prefix(dir);

    const auto* embed = ps.find("embed.token");
    const auto* pos = ps.find(dp + ".pos");
    cache.emb.resize(len * h);
    for (std::size_t t = 0; t < len; ++t) {
        const T* erow = embed->w.data() + static_cast<std::size_t>(cache.seq[t]) * h;
        const T* prow = pos->w.data() + t * h;
        T* dst = cache.emb.data() + t * h;
        for (std::size_t j = 0; j < h; ++j) dst[j] = erow[j] + prow[j];
    }

    cache.blocks.assign(static_cast<std::size_t>(cfg.layers), DecBlockCache<T>{});
    std::vector<T> x = cache.emb;
    for (int l = 0; l < cfg.layers; ++l) {
        auto& bc = cache.blocks[static_cast<std::size_t>(l)];
        const std::string lp = dp + ".l" + std::to_string(l);
        bc.x0 = x;
        bc.n1.resize(len * h);
        layernorm_forward(bc.x0.data(), ps.find(lp + ".ln1.g")->w.data(),
                          ps.find(lp + ".ln1.b")->w.data(), bc.n1.data(), len, h, bc.ln1);
        std::vector<T> attn_out;
        attention_forward(ps, AttnParamNames(lp + ".self"), bc.n1.data(), len,
                          bc.n1.data(), len, h, static_cast<std::size_t>(cfg.heads), true,
                          bc.self_at, attn_out);
        bc.x1 = bc.x0;
        for (std::size_t i = 0; i < bc.x1.size(); ++i) bc.x1[i] += attn_out[i];

        bc.n2.resize(len * h);
        layernorm_forward(bc.x1.data(), ps.find(lp + ".ln2.g")->w.data(),
                          ps.find(lp + ".ln2.b")->w.data(), bc.n2.data(), len, h, bc.ln2);
        std::vector<T> cross_out;
        attention_forward(ps, AttnParamNames(lp + ".cross"), bc.n2.data(), len,
                          memory.data(), cells, h, static_cast<std::size_t>(cfg.heads),
                          false, bc.cross_at, cross_out);
        bc.x2 = bc.x1;
        for (std::size_t i = 0; i < bc.x2.size(); ++i) bc.x2[i] += cross_out[i];

        bc.n3.resize(len * h);
        layernorm_forward(bc.x2.data(), ps.find(lp + ".ln3.g")->w.data(),
                          ps.find(lp + ".ln3.b")->w.data(), bc.n3.data(), len, h, bc.ln3);
        bc.mlp_pre.resize(len * 4 * h);
        linear_forward(bc.n3.data(), ps.find(lp + ".mlp.w1")->w.data(),
                       ps.find(lp + ".mlp.b1")->w.data(), bc.mlp_pre.data(), len, h, 4 * h);
        bc.mlp_act = bc.mlp_pre;
        gelu_inplace(bc.mlp_act);
        std::vector<T> mlp_out(len * h);
        linear_forward(bc.mlp_act.data(), ps.find(lp + ".mlp.w2")->w.data(),
                       ps.find(lp + ".mlp.b2")->w.data(), mlp_out.data(), len, 4 * h, h);
        x = bc.x2;
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += mlp_out[i];
    }
    cache.xfinal = x;
    cache.hfinal.resize(len * h);
    layernorm_forward(cache.xfinal.data(), ps.find(dp + ".lnf.g")->w.data(),
                      ps.find(dp + ".lnf.b")->w.data(), cache.hfinal.data(), len, h,
                      cache.lnf);
    // tied output layer: logits = h * E^T
    cache.logits.resize(len * static_cast<std::size_t>(cfg.vocab_size));
    kernels::gemm_nt(len, static_cast<std::size_t>(cfg.vocab_size), h, cache.hfinal.data(),
                     embed->w.data(), cache.logits.data(), false);
}

// d_logits -> parameter grads plus d_memory (accumulated).
template <typename T>
void decode_backward_impl(const ModelConfig& cfg, ParamStore<T>& ps,
                          const std::vector<T>& memory, Direction dir,
                          const DecodeCache<T>& cache, const std::vector<T>& d_logits,
                          std::vector<T>& d_memory_accum) {
    const std::size_t len = cache.seq.size();
    const std::size_t h = static_cast<std::size_t>(cfg.hidden);
    const std::size_t v = static_cast<std::size_t>(cfg.vocab_size);
    const std::size_t cells = static_cast<std::size_t>(cfg.grid_cells());
    const std::string dp = dir_prefix(dir);
    auto* embed = ps.find("embed.token");

    // through the tied logit layer
    std::vector<T> d_hfinal(len * h);
    kernels::gemm_nn(len, h, v, d_logits.data(), embed->w.data(), d_hfinal.data(), false);
    kernels::gemm_tn(v, h, len, d_logits.data(), cache.hfinal.data(), embed->g.data(), true);

    std::vector<T> dx(len * h);
    layernorm_backward(ps.find(dp + ".lnf.g")->w.data(), d_hfinal.data(), cache.lnf,
                       dx.data(), false, ps.find(dp + ".lnf.g")->g.data(),
                       ps.find(dp + ".lnf.b")->g.data(), len, h);

    for (int l = cfg.layers - 1; l >= 0; --l) {
        const auto& bc = cache.blocks[static_cast<std::size_t>(l)];
        const std::string lp = dp + ".l" + std::to_string(l);

        // mlp sublayer: x3 = x2 + W2(gelu(W1 n3 + b1)) + b2
        std::vector<T> d_act(len * 4 * h);
        linear_backward(bc.mlp_act.data(), ps.find(lp + ".mlp.w2")->w.data(), dx.data(),
                        d_act.data(), false, ps.find(lp + ".mlp.w2")->g.data(),
                        ps.find(lp + ".mlp.b2")->g.data(), len, 4 * h, h);
        for (std::size_t i = 0; i < d_act.size(); ++i) d_act[i] *= gelu_grad(bc.mlp_pre[i]);
        std::vector<T> d_n3(len * h);
        linear_backward(bc.n3.data(), ps.find(lp + ".mlp.w1")->w.data(), d_act.data(),
                        d_n3.data(), false, ps.find(lp + ".mlp.w1")->g.data(),
                        ps.find(lp + ".mlp.b1")->g.data(), len, h, 4 * h);
        layernorm_backward(ps.find(lp + ".ln3.g")->w.data(), d_n3.data(), bc.ln3, dx.data(),
                           true, ps.find(lp + ".ln3.g")->g.data(),
                           ps.find(lp + ".ln3.b")->g.data(), len, h);

        // cross-attention sublayer: x2 = x1 + cross(ln2(x1), memory)
        std::vector<T> d_n2;
        attention_backward(ps, AttnParamNames(lp + ".cross"), bc.n2.data(), len,
                           memory.data(), cells, h, static_cast<std::size_t>(cfg.heads),
                           false, bc.cross_at, dx, d_n2, d_memory_accum.data());
        layernorm_backward(ps.find(lp + ".ln2.g")->w.data(), d_n2.data(), bc.ln2, dx.data(),
                           true, ps.find(lp + ".ln2.g")->g.data(),
                           ps.find(lp + ".ln2.b")->g.data(), len, h);

        // self-attention sublayer: x1 = x0 + self(ln1(x0))
        std::vector<T> d_n1_q;
        std::vector<T> d_n1_kv(len * h, T(0));
        attention_backward(ps, AttnParamNames(lp + ".self"), bc.n1.data(), len,
                           bc.n1.data(), len, h, static_cast<std::size_t>(cfg.heads), true,
                           bc.self_at, dx, d_n1_q, d_n1_kv.data());
        for (std::size_t i = 0; i < d_n1_q.size(); ++i) d_n1_q[i] += d_n1_kv[i];
        layernorm_backward(ps.find(lp + ".ln1.g")->w.data(), d_n1_q.data(), bc.ln1,
                           dx.data(), true, ps.find(lp + ".ln1.g")->g.data(),
                           ps.find(lp + ".ln1.b")->g.data(), len, h);
    }

    // embeddings
    auto* pos = ps.find(dp + ".pos");
    for (std::size_t t = 0; t < len; ++t) {
        const T* src = dx.data() + t * h;
        T* de = embed->g.data() + static_cast<std::size_t>(cache.seq[t]) * h;
        T* dpos = pos->g.data() + t * h;
        for (std::size_t j = 0; j < h; ++j) {
            de[j] += src[j];
            dpos[j] += src[j];
        }
    }
}

// Per-direction NLL over positions 0..len-2 (position len-1 predicts
// nothing). Writes softmax-minus-onehot rows scaled by `scale` into
// d_logits when it is non-null.
template <typename T>
double nll_and_grad(const std::vector<T>& logits, const std::vector<int>& seq,
                    std::size_t vocab, T scale, std::vector<T>* d_logits) {
    const std::size_t len = seq.size();
    if (d_logits != nullptr) d_logits->assign(len * vocab, T(0));
    double loss = 0.0;
    std::vector<T> probs(vocab);
    for (std::size_t t = 0; t + 1 < len; ++t) {
        const T* row = logits.data() + t * vocab;
        T mx = row[0];
        for (std::size_t j = 1; j < vocab; ++j) mx = row[j] > mx ? row[j] : mx;
        T total = T(0);
        for (std::size_t j = 0; j < vocab; ++j) {
            probs[j] = std::exp(row[j] - mx);
            total += probs[j];
        }
        const int target = seq[t + 1];
        const double logp =
            static_cast<double>(row[static_cast<std::size_t>(target)] - mx) -
            std::log(static_cast<double>(total));
        loss -= logp;
        if (d_logits != nullptr) {
            const T inv = T(1) / total;
            T* drow = d_logits->data() + t * vocab;
            for (std::size_t j = 0; j < vocab; ++j) drow[j] = scale * probs[j] * inv;
            drow[static_cast<std::size_t>(target)] -= scale;
        }
    }
    return loss;
}

}  // namespace

template <typename T>
std::vector<T> Model<T>::decode_direction(const std::vector<T>& memory,
                                          const std::vector<int>& token_ids,
                                          Direction dir) const {
    DecodeCache<T> cache;
    decode_forward_impl(cfg_, params_, memory, token_ids, dir, cache);
    return std::move(cache.logits);
}

template <typename T>
BicaptionLoss Model<T>::bicaption_loss(const std::vector<T>& memory,
                                       const std::vector<int>& token_ids) const {
    BicaptionLoss out;
    DecodeCache<T> cache;
    decode_forward_impl(cfg_, params_, memory, token_ids, Direction::forward, cache);
    out.fwd = nll_and_grad<T>(cache.logits, cache.seq,
                              static_cast<std::size_t>(cfg_.vocab_size), T(0), nullptr);
    decode_forward_impl(cfg_, params_, memory, token_ids, Direction::backward, cache);
    out.bwd = nll_and_grad<T>(cache.logits, cache.seq,
                              static_cast<std::size_t>(cfg_.vocab_size), T(0), nullptr);
    out.total = out.fwd + out.bwd;
    out.predicted_positions = 2 * (static_cast<int>(token_ids.size()) - 1);
    return out;
}

template <typename T>
BicaptionLoss Model<T>::caption_step(const ImageTensor& image,
                                     const std::vector<int>& token_ids, T grad_scale) {
    VisualCache<T> vcache;
    embed_forward(image, vcache);
    const std::vector<T> memory = project(vcache.features);

    const std::size_t h = static_cast<std::size_t>(cfg_.hidden);
    const std::size_t cells = static_cast<std::size_t>(cfg_.grid_cells());
    std::vector<T> d_memory(cells * h, T(0));

    BicaptionLoss out;
    std::vector<T> d_logits;
    for (Direction dir : {Direction::forward, Direction::backward}) {
        DecodeCache<T> cache;
        decode_forward_impl(cfg_, params_, memory, token_ids, dir, cache);
        const double nll =
            nll_and_grad<T>(cache.logits, cache.seq,
                            static_cast<std::size_t>(cfg_.vocab_size), grad_scale, &d_logits);
        (dir == Direction::forward ? out.fwd : out.bwd) = nll;
        decode_backward_impl(cfg_, params_, memory, dir, cache, d_logits, d_memory);
    }
    out.total = out.fwd + out.bwd;
    out.predicted_positions = 2 * (static_cast<int>(token_ids.size()) - 1);

    // memory = mem_in * projW^T + projb + mem_pos
    auto* pos = params_.find("proj.mem_pos");
    for (std::size_t i = 0; i < d_memory.size(); ++i) pos->g[i] += d_memory[i];
    const std::vector<T> mem_in = flatten_cells(vcache.features);
    const std::size_t d = static_cast<std::size_t>(cfg_.feature_channels());
    std::vector<T> d_mem_in(cells * d);
    linear_backward(mem_in.data(), params_.find("proj.w")->w.data(), d_memory.data(),
                    d_mem_in.data(), false, params_.find("proj.w")->g.data(),
                    params_.find("proj.b")->g.data(), cells, d, h);

    // cell-major back to CHW
    std::vector<T> d_feat(vcache.features.v.size());
    for (std::size_t c = 0; c < d; ++c) {
        for (std::size_t i = 0; i < cells; ++i) {
            d_feat[c * cells + i] = d_mem_in[i * d + c];
        }
    }
    visual_backward_impl(cfg_, params_, vcache, std::move(d_feat));
    return out;
}

template <typename T>
std::vector<T> Model<T>::caption_logprob_feature_grad(const ImageTensor& image,
                                                      const std::vector<int>& token_ids) const {
    // Runs the forward-direction loss backward with flipped sign down to the
    // feature map, on scratch gradients; the model itself stays untouched.
    Model<T>& self = const_cast<Model<T>&>(*this);
    std::vector<std::vector<T>> saved;
    saved.reserve(self.params_.arrays.size());
    for (auto& a : self.params_.arrays) saved.push_back(std::move(a.g));
    for (auto& a : self.params_.arrays) a.g.assign(a.w.size(), T(0));

    VisualCache<T> vcache;
    self.embed_forward(image, vcache);
    const std::vector<T> memory = self.project(vcache.features);
    const std::size_t h = static_cast<std::size_t>(cfg_.hidden);
    const std::size_t cells = static_cast<std::size_t>(cfg_.grid_cells());
    std::vector<T> d_memory(cells * h, T(0));

    DecodeCache<T> cache;
    decode_forward_impl(cfg_, self.params_, memory, token_ids, Direction::forward, cache);
    std::vector<T> d_logits;
    // scale -1: gradient of +sum(log p) rather than the NLL
    nll_and_grad<T>(cache.logits, cache.seq, static_cast<std::size_t>(cfg_.vocab_size),
                    T(-1), &d_logits);
    decode_backward_impl(cfg_, self.params_, memory, Direction::forward, cache, d_logits,
                         d_memory);

    const std::vector<T> mem_in = flatten_cells(vcache.features);
    const std::size_t d = static_cast<std::size_t>(cfg_.feature_channels());
    std::vector<T> d_mem_in(cells * d);
    linear_backward(mem_in.data(), self.params_.find("proj.w")->w.data(), d_memory.data(),
                    d_mem_in.data(), false, self.params_.find("proj.w")->g.data(),
                    self.params_.find("proj.b")->g.data(), cells, d, h);
    std::vector<T> d_feat(vcache.features.v.size());
    for (std::size_t c = 0; c < d; ++c) {
        for (std::size_t i = 0; i < cells; ++i) d_feat[c * cells + i] = d_mem_in[i * d + c];
    }

    for (std::size_t i = 0; i < self.params_.arrays.size(); ++i) {
        self.params_.arrays[i].g = std::move(saved[i]);
    }
    return d_feat;
}

template struct ParamArray<float>;
template struct ParamArray<double>;
template struct ParamStore<float>;
template struct ParamStore<double>;
template class Model<float>;
template class Model<double>;

}  // namespace vtbr
