#pragma once

// Brute-force retrieval metrics, independent of evalkit: exhaustive
// distance matrix, naive sort, direct AP/first-hit definitions. Shared by
// the unit tests and the acceptance suite.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "vtbr/evalkit.hpp"
#include "vtbr/rng.hpp"

namespace vtbr_test {

struct NaiveMetrics {
    double mAP = 0.0;
    std::vector<double> cmc;  // cmc[r-1]
    int skipped = 0;
};

inline NaiveMetrics naive_metrics(const std::vector<std::vector<float>>& queries,
                                  const std::vector<std::vector<float>>& gallery,
                                  const std::vector<vtbr::RetrievalMeta>& qmeta,
                                  const std::vector<vtbr::RetrievalMeta>& gmeta,
                                  int max_rank) {
    NaiveMetrics out;
    out.cmc.assign(static_cast<std::size_t>(max_rank), 0.0);
    std::vector<double> aps;
    std::size_t counted_queries = 0;

    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        // exhaustive distances to every non-junk gallery item
        std::vector<std::pair<double, std::size_t>> dists;
        for (std::size_t gi = 0; gi < gallery.size(); ++gi) {
            if (gmeta[gi].identity == qmeta[qi].identity &&
                gmeta[gi].camera == qmeta[qi].camera) {
                continue;
            }
            double s = 0.0;
            for (std::size_t d = 0; d < queries[qi].size(); ++d) {
                const double diff = static_cast<double>(queries[qi][d]) - gallery[gi][d];
                s += diff * diff;
            }
            dists.push_back({std::sqrt(s), gi});
        }
        std::stable_sort(dists.begin(), dists.end(),
                         [](const auto& a, const auto& b) {
                             if (a.first != b.first) return a.first < b.first;
                             return a.second < b.second;
                         });
        int relevant_total = 0;
        for (const auto& [d, gi] : dists) {
            if (gmeta[gi].identity == qmeta[qi].identity) ++relevant_total;
        }
        if (relevant_total == 0) {
            ++out.skipped;
            continue;
        }
        ++counted_queries;
        int seen = 0;
        double ap = 0.0;
        int first_hit = -1;
        for (std::size_t r = 0; r < dists.size(); ++r) {
            if (gmeta[dists[r].second].identity != qmeta[qi].identity) continue;
            ++seen;
            ap += static_cast<double>(seen) / static_cast<double>(r + 1);
            if (first_hit < 0) first_hit = static_cast<int>(r);
        }
        aps.push_back(ap / relevant_total);
        for (int r = first_hit; r < max_rank; ++r) out.cmc[static_cast<std::size_t>(r)] += 1.0;
    }
    for (double& v : aps) out.mAP += v;
    out.mAP /= static_cast<double>(aps.size());
    for (double& v : out.cmc) v /= static_cast<double>(counted_queries);
    return out;
}

struct RandomInstance {
    std::vector<std::vector<float>> queries, gallery;
    std::vector<vtbr::RetrievalMeta> qmeta, gmeta;
};

// Random retrieval instance with <= 5 queries and <= 25 gallery items;
// construction guarantees every query keeps a valid relevant match.
inline RandomInstance random_instance(vtbr::Rng& rng) {
    RandomInstance inst;
    const int dim = 2 + static_cast<int>(rng.uniform_below(6));
    const int nq = 1 + static_cast<int>(rng.uniform_below(5));
    const int ng = nq + 1 + static_cast<int>(rng.uniform_below(25 - nq));
    const int identities = 1 + static_cast<int>(rng.uniform_below(5));
    const int cameras = 2 + static_cast<int>(rng.uniform_below(3));

    auto random_vec = [&]() {
        std::vector<float> v(static_cast<std::size_t>(dim));
        for (float& x : v) x = static_cast<float>(rng.uniform() * 4.0 - 2.0);
        return v;
    };
    for (int q = 0; q < nq; ++q) {
        inst.queries.push_back(random_vec());
        inst.qmeta.push_back({static_cast<std::int64_t>(rng.uniform_below(identities)),
                              static_cast<std::int64_t>(rng.uniform_below(cameras))});
    }
    for (int g = 0; g < ng; ++g) {
        inst.gallery.push_back(random_vec());
        inst.gmeta.push_back({static_cast<std::int64_t>(rng.uniform_below(identities)),
                              static_cast<std::int64_t>(rng.uniform_below(cameras))});
    }
    // guarantee a cross-camera relevant item per query
    for (int q = 0; q < nq; ++q) {
        inst.gallery.push_back(random_vec());
        inst.gmeta.push_back({inst.qmeta[static_cast<std::size_t>(q)].identity,
                              (inst.qmeta[static_cast<std::size_t>(q)].camera + 1) % cameras});
    }
    return inst;
}

// Exact expected AP of a uniformly random ranking with r relevant items
// among n. Derived from P(rank k relevant) = r/n and the hypergeometric
// mean of relevant items above a fixed relevant one.
inline double expected_ap_random(int r, int n) {
    double total = 0.0;
    for (int k = 1; k <= n; ++k) {
        const double above = n > 1 ? static_cast<double>((k - 1)) * (r - 1) / (n - 1) : 0.0;
        total += (1.0 + above) / k;
    }
    return total / n;
}

}  // namespace vtbr_test
