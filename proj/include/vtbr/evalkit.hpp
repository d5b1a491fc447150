#pragma once

// Retrieval evaluation: Euclidean ranking with camera-aware junk
// filtering, mAP and CMC, plus the gradient-based saliency export.

#include <cstdint>
#include <string>
#include <vector>

#include "vtbr/model_core.hpp"

namespace vtbr {

struct RetrievalMeta {
    std::int64_t identity = 0;
    std::int64_t camera = 0;
};

struct RankingResult {
    // Per query: valid gallery indices by ascending Euclidean distance
    // (ties broken by gallery index) and the matching distances. Entries
    // masked by the junk rule (same identity AND same camera as the query)
    // are absent.
    std::vector<std::vector<std::size_t>> order;
    std::vector<std::vector<double>> distances;
    std::vector<std::vector<char>> valid;  // [query][gallery]
};

RankingResult rank_gallery(const std::vector<std::vector<float>>& query_embeddings,
                           const std::vector<std::vector<float>>& gallery_embeddings,
                           const std::vector<RetrievalMeta>& query_meta,
                           const std::vector<RetrievalMeta>& gallery_meta);

// AP over one query's ranked relevance flags: mean, over relevant items, of
// the precision at their rank. Throws when nothing is relevant.
double average_precision(const std::vector<char>& ranked_relevance);

// cmc[r-1] = fraction of queries whose first relevant item sits at rank <= r.
std::vector<double> compute_cmc(const std::vector<std::vector<char>>& ranked_relevance,
                                int max_rank);

struct EvalReport {
    double mAP = 0.0;
    std::vector<int> cmc_ranks;
    std::vector<double> cmc;  // aligned with cmc_ranks
    int queries = 0;
    int gallery = 0;
    int skipped_queries = 0;  // no valid relevant entry; excluded from mAP
    std::string train_domain;
    std::string test_domain;
    std::string init;
};

// Core metric computation over embeddings + meta. Queries with zero valid
// relevant gallery items are skipped and counted.
EvalReport evaluate_embeddings(const std::vector<std::vector<float>>& query_embeddings,
                               const std::vector<std::vector<float>>& gallery_embeddings,
                               const std::vector<RetrievalMeta>& query_meta,
                               const std::vector<RetrievalMeta>& gallery_meta,
                               const std::vector<int>& cmc_ranks);

std::string eval_report_to_json(const EvalReport& report, std::uint64_t seed,
                                const std::string& config_hash);

struct SaliencyMap {
    int height = 0;
    int width = 0;
    std::vector<float> values;  // [0, 1], bilinear-upsampled from the grid
    bool flat = false;          // all-zero gradient; map is identically zero

    float at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

// Grad-CAM over the final feature map with the summed forward-caption
// log-probability as the target scalar.
SaliencyMap saliency_map(const Model<float>& model, const ImageTensor& image,
                         const std::vector<int>& token_ids);

// 8-bit PGM plus a raw f32 sidecar next to it (path + ".f32").
void save_saliency(const std::string& path, const SaliencyMap& map);

}  // namespace vtbr
