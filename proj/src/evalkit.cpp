#include "vtbr/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "vtbr/error.hpp"
#include "vtbr/kernels.hpp"
#include "json.hpp"

namespace vtbr {

RankingResult rank_gallery(const std::vector<std::vector<float>>& query_embeddings,
                           const std::vector<std::vector<float>>& gallery_embeddings,
                           const std::vector<RetrievalMeta>& query_meta,
                           const std::vector<RetrievalMeta>& gallery_meta) {
    if (query_embeddings.size() != query_meta.size() ||
        gallery_embeddings.size() != gallery_meta.size()) {
        throw DimensionError("rank_gallery: embeddings and meta differ in length");
    }
    const std::size_t q = query_embeddings.size();
    const std::size_t g = gallery_embeddings.size();
    RankingResult result;
    result.order.resize(q);
    result.distances.resize(q);
    result.valid.assign(q, std::vector<char>(g, 1));

    for (std::size_t i = 0; i < q; ++i) {
        const auto& qe = query_embeddings[i];
        std::vector<std::size_t>& order = result.order[i];
        for (std::size_t j = 0; j < g; ++j) {
            if (gallery_embeddings[j].size() != qe.size()) {
                throw DimensionError("rank_gallery: embedding dims differ");
            }
            // junk rule: same identity seen by the same camera
            if (gallery_meta[j].identity == query_meta[i].identity &&
                gallery_meta[j].camera == query_meta[i].camera) {
                result.valid[i][j] = 0;
                continue;
            }
            order.push_back(j);
        }
        if (order.empty()) {
            throw ProtocolError("rank_gallery: query " + std::to_string(i) +
                                " has no valid gallery entry");
        }
        std::vector<double> dist(g, 0.0);
        for (std::size_t j : order) {
            dist[j] = std::sqrt(static_cast<double>(
                kernels::sq_l2(qe.data(), gallery_embeddings[j].data(), qe.size())));
        }
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (dist[a] != dist[b]) return dist[a] < dist[b];
            return a < b;
        });
        result.distances[i].reserve(order.size());
        for (std::size_t j : order) result.distances[i].push_back(dist[j]);
    }
    return result;
}

double average_precision(const std::vector<char>& ranked_relevance) {
    int relevant = 0;
    double ap = 0.0;
    for (std::size_t r = 0; r < ranked_relevance.size(); ++r) {
        if (!ranked_relevance[r]) continue;
        ++relevant;
        ap += static_cast<double>(relevant) / static_cast<double>(r + 1);
    }
    if (relevant == 0) throw ProtocolError("average_precision: no relevant item in ranking");
    return ap / relevant;
}

std::vector<double> compute_cmc(const std::vector<std::vector<char>>& ranked_relevance,
                                int max_rank) {
    if (ranked_relevance.empty()) throw ProtocolError("compute_cmc: no queries");
    std::vector<double> cmc(static_cast<std::size_t>(max_rank), 0.0);
    for (const auto& flags : ranked_relevance) {
        int first = -1;
        for (std::size_t r = 0; r < flags.size(); ++r) {
            if (flags[r]) {
                first = static_cast<int>(r);
                break;
            }
        }
        if (first < 0) continue;  // caller decides how to count hopeless queries
        for (int r = first; r < max_rank; ++r) cmc[static_cast<std::size_t>(r)] += 1.0;
    }
    for (double& v : cmc) v /= static_cast<double>(ranked_relevance.size());
    return cmc;
}

EvalReport evaluate_embeddings(const std::vector<std::vector<float>>& query_embeddings,
                               const std::vector<std::vector<float>>& gallery_embeddings,
                               const std::vector<RetrievalMeta>& query_meta,
                               const std::vector<RetrievalMeta>& gallery_meta,
                               const std::vector<int>& cmc_ranks) {
    const RankingResult ranking =
        rank_gallery(query_embeddings, gallery_embeddings, query_meta, gallery_meta);

    std::vector<std::vector<char>> relevance;
    std::vector<double> aps;
    int skipped = 0;
    for (std::size_t i = 0; i < ranking.order.size(); ++i) {
        std::vector<char> flags(ranking.order[i].size(), 0);
        int total_relevant = 0;
        for (std::size_t r = 0; r < ranking.order[i].size(); ++r) {
            const auto& gm = gallery_meta[ranking.order[i][r]];
            if (gm.identity == query_meta[i].identity) {
                flags[r] = 1;
                ++total_relevant;
            }
        }
        if (total_relevant == 0) {
            ++skipped;
            continue;
        }
        aps.push_back(average_precision(flags));
        relevance.push_back(std::move(flags));
    }
    if (aps.empty()) throw ProtocolError("evaluate: every query was skipped");

    EvalReport report;
    report.mAP = std::accumulate(aps.begin(), aps.end(), 0.0) / static_cast<double>(aps.size());
    report.cmc_ranks = cmc_ranks;
    const int max_rank = *std::max_element(cmc_ranks.begin(), cmc_ranks.end());
    const std::vector<double> curve = compute_cmc(relevance, max_rank);
    for (int r : cmc_ranks) {
        if (r < 1 || r > max_rank) throw ConfigError("evaluate: cmc rank out of range");
        report.cmc.push_back(curve[static_cast<std::size_t>(r - 1)]);
    }
    report.queries = static_cast<int>(query_embeddings.size());
    report.gallery = static_cast<int>(gallery_embeddings.size());
    report.skipped_queries = skipped;
    return report;
}

std::string eval_report_to_json(const EvalReport& report, std::uint64_t seed,
                                const std::string& config_hash) {
    nlohmann::json cmc = nlohmann::json::object();
    for (std::size_t i = 0; i < report.cmc_ranks.size(); ++i) {
        cmc[std::to_string(report.cmc_ranks[i])] = report.cmc[i];
    }
    nlohmann::json j{{"map", report.mAP},
                     {"cmc", cmc},
                     {"counts",
                      {{"queries", report.queries},
                       {"gallery", report.gallery},
                       {"skipped_queries", report.skipped_queries}}},
                     {"protocol",
                      {{"train_domain", report.train_domain},
                       {"test_domain", report.test_domain},
                       {"init", report.init}}},
                     {"seed", seed},
                     {"config_hash", config_hash}};
    return j.dump(2);
}

SaliencyMap saliency_map(const Model<float>& model, const ImageTensor& image,
                         const std::vector<int>& token_ids) {
    const auto features = model.visual_forward(image);
    const auto d_feat = model.caption_logprob_feature_grad(image, token_ids);

    const int cells = features.cells();
    const int channels = features.channels;
    // channel weights: spatial mean of the gradient
    std::vector<double> weights(static_cast<std::size_t>(channels));
    for (int c = 0; c < channels; ++c) {
        double s = 0.0;
        for (int i = 0; i < cells; ++i) {
            s += static_cast<double>(d_feat[static_cast<std::size_t>(c) * cells + i]);
        }
        weights[static_cast<std::size_t>(c)] = s / cells;
    }

    std::vector<double> cam(static_cast<std::size_t>(cells), 0.0);
    double mx = 0.0;
    for (int i = 0; i < cells; ++i) {
        double v = 0.0;
        for (int c = 0; c < channels; ++c) {
            v += weights[static_cast<std::size_t>(c)] *
                 static_cast<double>(features.v[static_cast<std::size_t>(c) * cells + i]);
        }
        v = std::max(v, 0.0);  // rectified combination
        cam[static_cast<std::size_t>(i)] = v;
        mx = std::max(mx, v);
    }

    SaliencyMap map;
    map.height = image.height;
    map.width = image.width;
    map.values.assign(static_cast<std::size_t>(image.height) * image.width, 0.0f);
    if (mx <= 0.0) {
        map.flat = true;
        return map;
    }
    for (double& v : cam) v /= mx;

    // bilinear upsample grid -> image
    const int gh = features.h;
    const int gw = features.w;
    const double sy = static_cast<double>(gh) / image.height;
    const double sx = static_cast<double>(gw) / image.width;
    for (int y = 0; y < image.height; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, gh - 1);
        const int y1 = std::min(y0 + 1, gh - 1);
        const double wy = std::clamp(fy - y0, 0.0, 1.0);
        for (int x = 0; x < image.width; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, gw - 1);
            const int x1 = std::min(x0 + 1, gw - 1);
            const double wx = std::clamp(fx - x0, 0.0, 1.0);
            const double v =
                (1.0 - wy) * ((1.0 - wx) * cam[static_cast<std::size_t>(y0 * gw + x0)] +
                              wx * cam[static_cast<std::size_t>(y0 * gw + x1)]) +
                wy * ((1.0 - wx) * cam[static_cast<std::size_t>(y1 * gw + x0)] +
                      wx * cam[static_cast<std::size_t>(y1 * gw + x1)]);
            map.values[static_cast<std::size_t>(y) * image.width + x] = static_cast<float>(v);
        }
    }
    return map;
}

void save_saliency(const std::string& path, const SaliencyMap& map) {
    {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write saliency map: " + path);
        out << "P5\n" << map.width << " " << map.height << "\n255\n";
        for (float v : map.values) {
            const int byte = std::clamp(static_cast<int>(std::lround(v * 255.0f)), 0, 255);
            out.put(static_cast<char>(byte));
        }
    }
    std::ofstream raw(path + ".f32", std::ios::binary);
    if (!raw) throw IoError("cannot write saliency sidecar: " + path + ".f32");
    raw.write(reinterpret_cast<const char*>(map.values.data()),
              static_cast<std::streamsize>(map.values.size() * sizeof(float)));
}

}  // namespace vtbr
