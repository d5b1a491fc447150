#include "vtbr/finetune.hpp"

#include <algorithm>
#include <cmath>

#include "vtbr/error.hpp"
#include "vtbr/kernels.hpp"

namespace vtbr {

void FinetuneConfig::validate() const {
    if (p < 2) throw ConfigError("finetune: p must be >= 2 (triplet loss needs two classes)");
    if (k < 2) throw ConfigError("finetune: k must be >= 2 (triplet loss needs positives)");
    if (margin < 0.0) throw ConfigError("finetune: margin must be >= 0");
    if (steps < 0) throw ConfigError("finetune: steps must be >= 0");
    if (lr <= 0.0) throw ConfigError("finetune: lr must be positive");
    if (warmup_frac < 0.0 || warmup_frac > 1.0) {
        throw ConfigError("finetune: warmup_frac must be in [0, 1]");
    }
}

std::vector<float> ReIDModel::classify(const std::vector<float>& embedding) const {
    const auto* w = model.params().find("head.w");
    const auto* b = model.params().find("head.b");
    const int d = model.config().feature_channels();
    std::vector<float> logits(static_cast<std::size_t>(num_classes));
    for (int c = 0; c < num_classes; ++c) {
        logits[static_cast<std::size_t>(c)] =
            kernels::dot(embedding.data(), w->w.data() + static_cast<std::size_t>(c) * d,
                         static_cast<std::size_t>(d)) +
            b->w[static_cast<std::size_t>(c)];
    }
    return logits;
}

ReIDModel make_reid_model(const ModelConfig& cfg, int num_classes, Rng& rng) {
    if (num_classes < 1) throw ConfigError("finetune: need at least one training identity");
    ReIDModel reid;
    reid.model = Model<float>(cfg);
    reid.model.init_weights(rng);
    reid.num_classes = num_classes;
    auto& head_w = reid.model.params().add("head.w", {num_classes, cfg.feature_channels()}, false);
    reid.model.params().add("head.b", {num_classes}, true);
    for (float& w : head_w.w) w = static_cast<float>(0.02 * rng.normal());
    return reid;
}

std::vector<std::pair<std::size_t, int>> pk_sample(
    const std::map<int, std::vector<std::size_t>>& index_by_label, int p, int k,
    Rng& rng) {
    if (static_cast<int>(index_by_label.size()) < p) {
        throw Error("pk_sample: need " + std::to_string(p) + " identities, have " +
                    std::to_string(index_by_label.size()));
    }
    std::vector<int> labels;
    labels.reserve(index_by_label.size());
    for (const auto& [label, refs] : index_by_label) {
        if (refs.empty()) throw Error("pk_sample: identity with no images");
        labels.push_back(label);
    }
    rng.shuffle(labels);
    labels.resize(static_cast<std::size_t>(p));

    std::vector<std::pair<std::size_t, int>> batch;
    batch.reserve(static_cast<std::size_t>(p) * k);
    for (int label : labels) {
        const auto& refs = index_by_label.at(label);
        if (static_cast<int>(refs.size()) >= k) {
            std::vector<std::size_t> pool = refs;
            rng.shuffle(pool);
            for (int i = 0; i < k; ++i) batch.emplace_back(pool[static_cast<std::size_t>(i)], label);
        } else {
            for (int i = 0; i < k; ++i) {
                batch.emplace_back(refs[rng.uniform_below(refs.size())], label);
            }
        }
    }
    return batch;
}

namespace {

// d(i, j) in double so the value does not depend on the kernel backend.
double pair_distance(const float* a, const float* b, int dim) {
    double acc = 0.0;
    for (int t = 0; t < dim; ++t) {
        const double diff = static_cast<double>(a[t] - b[t]);
        acc += diff * diff;
    }
    return std::sqrt(acc);
}

void add_distance_grad(const float* a, const float* b, int dim, double dist,
                       double coeff, float* ga, float* gb) {
    if (dist <= 1e-12) return;  // subgradient 0 at coincident points
    const double s = coeff / dist;
    for (int d = 0; d < dim; ++d) {
        const double diff = static_cast<double>(a[d]) - static_cast<double>(b[d]);
        ga[d] += static_cast<float>(s * diff);
        gb[d] -= static_cast<float>(s * diff);
    }
}

void check_triplet_preconditions(const std::vector<int>& labels) {
    std::map<int, int> counts;
    for (int l : labels) ++counts[l];
    if (counts.size() < 2) throw Error("triplet_loss: need at least two distinct labels");
    for (const auto& [label, count] : counts) {
        if (count < 2) {
            throw Error("triplet_loss: label " + std::to_string(label) +
                        " occurs only once in the batch");
        }
    }
}

}  // namespace

double triplet_loss(const std::vector<float>& embeddings, int batch, int dim,
                    const std::vector<int>& labels, double margin,
                    std::vector<float>* grad, bool batch_hard) {
    if (static_cast<int>(labels.size()) != batch ||
        embeddings.size() != static_cast<std::size_t>(batch) * dim) {
        throw DimensionError("triplet_loss: shape mismatch");
    }
    check_triplet_preconditions(labels);

    std::vector<double> dist(static_cast<std::size_t>(batch) * batch, 0.0);
    for (int i = 0; i < batch; ++i) {
        for (int j = i + 1; j < batch; ++j) {
            const double d = pair_distance(embeddings.data() + static_cast<std::size_t>(i) * dim,
                                           embeddings.data() + static_cast<std::size_t>(j) * dim,
                                           dim);
            dist[static_cast<std::size_t>(i) * batch + j] = d;
            dist[static_cast<std::size_t>(j) * batch + i] = d;
        }
    }
    auto emb = [&](int i) { return embeddings.data() + static_cast<std::size_t>(i) * dim; };
    auto gr = [&](int i) { return grad->data() + static_cast<std::size_t>(i) * dim; };

    double loss = 0.0;
    if (batch_hard) {
        for (int a = 0; a < batch; ++a) {
            int hardest_pos = -1, hardest_neg = -1;
            double dp = -1.0, dn = 0.0;
            for (int j = 0; j < batch; ++j) {
                if (j == a) continue;
                const double d = dist[static_cast<std::size_t>(a) * batch + j];
                if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)]) {
                    if (d > dp) { dp = d; hardest_pos = j; }
                } else if (hardest_neg < 0 || d < dn) {
                    dn = d;
                    hardest_neg = j;
                }
            }
            const double term = dp - dn + margin;
            if (term > 0.0) {
                loss += term;
                if (grad != nullptr) {
                    const double c = 1.0 / batch;
                    add_distance_grad(emb(a), emb(hardest_pos), dim, dp, c, gr(a), gr(hardest_pos));
                    add_distance_grad(emb(a), emb(hardest_neg), dim, dn, -c, gr(a), gr(hardest_neg));
                }
            }
        }
        return loss / batch;
    }

    // all-triplets variant: mean hinge over every valid (anchor, pos, neg)
    std::int64_t triples = 0;
    for (int a = 0; a < batch; ++a) {
        for (int p = 0; p < batch; ++p) {
            if (p == a || labels[static_cast<std::size_t>(p)] != labels[static_cast<std::size_t>(a)]) continue;
            for (int n = 0; n < batch; ++n) {
                if (labels[static_cast<std::size_t>(n)] == labels[static_cast<std::size_t>(a)]) continue;
                ++triples;
            }
        }
    }
    for (int a = 0; a < batch; ++a) {
        for (int p = 0; p < batch; ++p) {
            if (p == a || labels[static_cast<std::size_t>(p)] != labels[static_cast<std::size_t>(a)]) continue;
            const double dp = dist[static_cast<std::size_t>(a) * batch + p];
            for (int n = 0; n < batch; ++n) {
                if (labels[static_cast<std::size_t>(n)] == labels[static_cast<std::size_t>(a)]) continue;
                const double dn = dist[static_cast<std::size_t>(a) * batch + n];
                const double term = dp - dn + margin;
                if (term > 0.0) {
                    loss += term;
                    if (grad != nullptr) {
                        const double c = 1.0 / static_cast<double>(triples);
                        add_distance_grad(emb(a), emb(p), dim, dp, c, gr(a), gr(p));
                        add_distance_grad(emb(a), emb(n), dim, dn, -c, gr(a), gr(n));
                    }
                }
            }
        }
    }
    return loss / static_cast<double>(triples);
}

double cross_entropy_loss(const std::vector<float>& logits, int batch, int classes,
                          const std::vector<int>& labels, std::vector<float>* grad) {
    if (static_cast<int>(labels.size()) != batch ||
        logits.size() != static_cast<std::size_t>(batch) * classes) {
        throw DimensionError("cross_entropy_loss: shape mismatch");
    }
    double loss = 0.0;
    std::vector<double> probs(static_cast<std::size_t>(classes));
    for (int i = 0; i < batch; ++i) {
        const float* row = logits.data() + static_cast<std::size_t>(i) * classes;
        double mx = row[0];
        for (int c = 1; c < classes; ++c) mx = std::max(mx, static_cast<double>(row[c]));
        double total = 0.0;
        for (int c = 0; c < classes; ++c) {
            probs[static_cast<std::size_t>(c)] = std::exp(static_cast<double>(row[c]) - mx);
            total += probs[static_cast<std::size_t>(c)];
        }
        const int t = labels[static_cast<std::size_t>(i)];
        if (t < 0 || t >= classes) throw DimensionError("cross_entropy_loss: label out of range");
        loss -= static_cast<double>(row[t]) - mx - std::log(total);
        if (grad != nullptr) {
            float* g = grad->data() + static_cast<std::size_t>(i) * classes;
            for (int c = 0; c < classes; ++c) {
                const double p = probs[static_cast<std::size_t>(c)] / total;
                g[c] += static_cast<float>((p - (c == t ? 1.0 : 0.0)) / batch);
            }
        }
    }
    return loss / batch;
}

double reid_loss(const std::vector<float>& logits, const std::vector<float>& embeddings,
                 int batch, int classes, int dim, const std::vector<int>& labels,
                 const FinetuneConfig& cfg) {
    const double ce = cross_entropy_loss(logits, batch, classes, labels, nullptr);
    const double tri = triplet_loss(embeddings, batch, dim, labels, cfg.margin, nullptr,
                                    cfg.batch_hard);
    return ce + tri;
}

namespace {

bool trains_in_finetune(const std::string& name) {
    return name.rfind("visual.", 0) == 0 || name.rfind("head.", 0) == 0;
}

}  // namespace

FinetuneResult run_finetune(ReIDModel& reid, const std::vector<ReidSample>& dataset,
                            const FinetuneConfig& cfg, const FinetuneMetricsSink& sink) {
    cfg.validate();
    if (dataset.empty()) throw Error("run_finetune: empty dataset");

    std::map<int, std::vector<std::size_t>> index_by_label;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        index_by_label[dataset[i].label].push_back(i);
    }
    if (static_cast<int>(index_by_label.size()) < 2) {
        throw Error("run_finetune: triplet loss needs at least two identities");
    }

    auto& params = reid.model.params();
    const int dim = reid.model.config().feature_channels();
    const int classes = reid.num_classes;
    const int batch = cfg.batch_size();

    // Adam moments for the trainable subset only.
    std::vector<std::vector<float>> m(params.arrays.size()), v(params.arrays.size());
    for (std::size_t i = 0; i < params.arrays.size(); ++i) {
        if (trains_in_finetune(params.arrays[i].name)) {
            m[i].assign(params.arrays[i].size(), 0.0f);
            v[i].assign(params.arrays[i].size(), 0.0f);
        }
    }

    const int warmup = std::max(1, static_cast<int>(cfg.warmup_frac * cfg.steps + 0.5));
    Rng rng(mix64(cfg.seed, 0xf17eULL));
    FinetuneResult result;

    std::vector<VisualCache<float>> caches(static_cast<std::size_t>(batch));
    for (int step = 1; step <= cfg.steps; ++step) {
        const auto picks = pk_sample(index_by_label, cfg.p, cfg.k, rng);
        std::vector<int> labels(picks.size());
        std::vector<float> embeddings(picks.size() * static_cast<std::size_t>(dim));
        for (std::size_t i = 0; i < picks.size(); ++i) {
            labels[i] = picks[i].second;
            const auto emb = reid.model.embed_forward(dataset[picks[i].first].image, caches[i]);
            std::copy(emb.begin(), emb.end(),
                      embeddings.begin() + i * static_cast<std::size_t>(dim));
        }

        // classifier forward: logits = emb * headW^T + headb
        auto* hw = params.find("head.w");
        auto* hb = params.find("head.b");
        std::vector<float> logits(picks.size() * static_cast<std::size_t>(classes));
        kernels::gemm_nt(picks.size(), static_cast<std::size_t>(classes),
                         static_cast<std::size_t>(dim), embeddings.data(), hw->w.data(),
                         logits.data(), false);
        for (std::size_t i = 0; i < picks.size(); ++i) {
            for (int c = 0; c < classes; ++c) {
                logits[i * static_cast<std::size_t>(classes) + c] += hb->w[static_cast<std::size_t>(c)];
            }
        }

        std::vector<float> d_logits(logits.size(), 0.0f);
        std::vector<float> d_emb(embeddings.size(), 0.0f);
        const double ce = cross_entropy_loss(logits, batch, classes, labels, &d_logits);
        const double tri = triplet_loss(embeddings, batch, dim, labels, cfg.margin, &d_emb,
                                        cfg.batch_hard);
        if (!std::isfinite(ce) || !std::isfinite(tri)) {
            throw DivergenceError("finetune diverged at step " + std::to_string(step) +
                                  " (ce=" + std::to_string(ce) + ", triplet=" +
                                  std::to_string(tri) + ")");
        }
        result.final_loss = ce + tri;

        params.zero_grads();
        // head backward + cross-entropy path into the embeddings
        kernels::gemm_nn(picks.size(), static_cast<std::size_t>(dim),
                         static_cast<std::size_t>(classes), d_logits.data(), hw->w.data(),
                         d_emb.data(), true);
        kernels::gemm_tn(static_cast<std::size_t>(classes), static_cast<std::size_t>(dim),
                         picks.size(), d_logits.data(), embeddings.data(), hw->g.data(), true);
        for (std::size_t i = 0; i < picks.size(); ++i) {
            for (int c = 0; c < classes; ++c) {
                hb->g[static_cast<std::size_t>(c)] += d_logits[i * static_cast<std::size_t>(classes) + c];
            }
        }
        std::vector<float> d_one(static_cast<std::size_t>(dim));
        for (std::size_t i = 0; i < picks.size(); ++i) {
            std::copy(d_emb.begin() + i * static_cast<std::size_t>(dim),
                      d_emb.begin() + (i + 1) * static_cast<std::size_t>(dim), d_one.begin());
            reid.model.embed_backward(caches[i], d_one, 1.0f);
        }

        const double lr = step <= warmup
                              ? cfg.lr * static_cast<double>(step) / static_cast<double>(warmup)
                              : cfg.lr;
        const float c1 = static_cast<float>(1.0 / (1.0 - std::pow(cfg.beta1, step)));
        const float c2 = static_cast<float>(1.0 / (1.0 - std::pow(cfg.beta2, step)));
        for (std::size_t i = 0; i < params.arrays.size(); ++i) {
            auto& a = params.arrays[i];
            if (m[i].empty()) continue;
            if (!std::all_of(a.g.begin(), a.g.end(),
                             [](float x) { return std::isfinite(x); })) {
                throw DivergenceError("finetune: non-finite gradient in " + a.name);
            }
            const float wd = a.no_decay ? 0.0f : static_cast<float>(cfg.weight_decay);
            kernels::adam_update(a.w.data(), m[i].data(), v[i].data(), a.g.data(), a.size(),
                                 static_cast<float>(lr), static_cast<float>(cfg.beta1),
                                 static_cast<float>(cfg.beta2), static_cast<float>(cfg.eps),
                                 wd, c1, c2);
        }
        result.steps_run = step;

        if (sink) {
            FinetuneStepMetrics sm;
            sm.step = step;
            sm.loss_ce = ce;
            sm.loss_triplet = tri;
            sm.lr = lr;
            sink(sm);
        }
    }
    return result;
}

}  // namespace vtbr
