#include "doctest.h"

#include <cmath>

#include "gradcheck_util.hpp"
#include "metric_oracle.hpp"
#include "test_util.hpp"
#include "vtbr/error.hpp"
#include "vtbr/evalkit.hpp"

using namespace vtbr;

TEST_CASE("rank_gallery: self match first, junk masked") {
    std::vector<std::vector<float>> queries{{1.0f, 0.0f}};
    std::vector<std::vector<float>> gallery{{0.0f, 1.0f}, {1.0f, 0.0f}, {1.0f, 0.0f}};
    std::vector<RetrievalMeta> qmeta{{7, 0}};
    // same vector from a different camera ranks first; the same-camera copy
    // is junk and never scored
    std::vector<RetrievalMeta> gmeta{{3, 1}, {7, 1}, {7, 0}};
    const auto r = rank_gallery(queries, gallery, qmeta, gmeta);
    REQUIRE(r.order.size() == 1);
    CHECK(r.order[0] == std::vector<std::size_t>{1, 0});
    CHECK(r.valid[0][2] == 0);
    CHECK(r.distances[0][0] == doctest::Approx(0.0));
    // distances non-decreasing
    for (std::size_t i = 1; i < r.distances[0].size(); ++i) {
        CHECK(r.distances[0][i] >= r.distances[0][i - 1]);
    }
}

TEST_CASE("rank_gallery: empty valid gallery is a protocol error") {
    std::vector<std::vector<float>> queries{{1.0f}};
    std::vector<std::vector<float>> gallery{{1.0f}};
    std::vector<RetrievalMeta> qmeta{{5, 2}};
    std::vector<RetrievalMeta> gmeta{{5, 2}};  // junk for this query
    CHECK_THROWS_AS(rank_gallery(queries, gallery, qmeta, gmeta), ProtocolError);
}

TEST_CASE("rank_gallery matches an exhaustive sort on random instances") {
    Rng rng(21);
    for (int iter = 0; iter < 30; ++iter) {
        const auto inst = vtbr_test::random_instance(rng);
        const auto r = rank_gallery(inst.queries, inst.gallery, inst.qmeta, inst.gmeta);
        for (std::size_t q = 0; q < inst.queries.size(); ++q) {
            // reproduce with a plain pairwise sort
            std::vector<std::pair<double, std::size_t>> ref;
            for (std::size_t g = 0; g < inst.gallery.size(); ++g) {
                if (inst.gmeta[g].identity == inst.qmeta[q].identity &&
                    inst.gmeta[g].camera == inst.qmeta[q].camera) {
                    continue;
                }
                double s = 0.0;
                for (std::size_t d = 0; d < inst.queries[q].size(); ++d) {
                    const double diff =
                        static_cast<double>(inst.queries[q][d]) - inst.gallery[g][d];
                    s += diff * diff;
                }
                ref.push_back({std::sqrt(s), g});
            }
            std::stable_sort(ref.begin(), ref.end());
            REQUIRE(ref.size() == r.order[q].size());
            for (std::size_t i = 0; i < ref.size(); ++i) CHECK(ref[i].second == r.order[q][i]);
        }
    }
}

TEST_CASE("average_precision: hand values") {
    // relevant at ranks 1 and 3 of 3
    CHECK(average_precision({1, 0, 1}) == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
    // all relevant
    CHECK(average_precision({1, 1, 1, 1}) == doctest::Approx(1.0));
    // single relevant at rank r of n -> 1/r
    CHECK(average_precision({0, 0, 0, 1, 0}) == doctest::Approx(0.25));
    CHECK_THROWS_AS(average_precision({0, 0}), ProtocolError);
}

TEST_CASE("compute_cmc: hand values and monotonicity") {
    // single query, first match at rank 2
    const auto curve = compute_cmc({{0, 1, 0, 0, 1}}, 5);
    CHECK(curve[0] == 0.0);
    CHECK(curve[1] == 1.0);
    CHECK(curve[4] == 1.0);

    const auto all_top1 = compute_cmc({{1, 0}, {1, 1}, {1, 0}}, 2);
    CHECK(all_top1[0] == 1.0);
    CHECK(all_top1[1] == 1.0);

    Rng rng(22);
    std::vector<std::vector<char>> flags;
    for (int q = 0; q < 12; ++q) {
        std::vector<char> f(10, 0);
        f[rng.uniform_below(10)] = 1;
        flags.push_back(f);
    }
    const auto c = compute_cmc(flags, 10);
    for (std::size_t r = 1; r < c.size(); ++r) CHECK(c[r] >= c[r - 1]);
    // brute-force first-hit scan
    for (int rank = 1; rank <= 10; ++rank) {
        int hits = 0;
        for (const auto& f : flags) {
            for (int i = 0; i < rank; ++i) {
                if (f[static_cast<std::size_t>(i)]) {
                    ++hits;
                    break;
                }
            }
        }
        CHECK(c[static_cast<std::size_t>(rank - 1)] ==
              doctest::Approx(static_cast<double>(hits) / 12.0).epsilon(1e-12));
    }
}

TEST_CASE("evaluate_embeddings: perfect separability gives mAP 1") {
    // one-hot class embeddings, identity encoder
    std::vector<std::vector<float>> queries, gallery;
    std::vector<RetrievalMeta> qmeta, gmeta;
    for (int id = 0; id < 4; ++id) {
        std::vector<float> v(4, 0.0f);
        v[static_cast<std::size_t>(id)] = 1.0f;
        queries.push_back(v);
        qmeta.push_back({id, 0});
        for (int cam = 1; cam < 3; ++cam) {
            gallery.push_back(v);
            gmeta.push_back({id, cam});
        }
    }
    const auto report = evaluate_embeddings(queries, gallery, qmeta, gmeta, {1, 5});
    CHECK(report.mAP == doctest::Approx(1.0));
    CHECK(report.cmc[0] == doctest::Approx(1.0));
    CHECK(report.skipped_queries == 0);
}

TEST_CASE("evaluate_embeddings is deterministic and isometry-invariant") {
    Rng rng(23);
    const auto inst = vtbr_test::random_instance(rng);
    const auto r1 = evaluate_embeddings(inst.queries, inst.gallery, inst.qmeta, inst.gmeta, {1, 5});
    const auto r2 = evaluate_embeddings(inst.queries, inst.gallery, inst.qmeta, inst.gmeta, {1, 5});
    CHECK(r1.mAP == r2.mAP);
    CHECK(r1.cmc == r2.cmc);

    // apply a rotation (Givens in the first two dims) plus a translation
    const std::size_t dim = inst.queries[0].size();
    const double theta = 0.7;
    std::vector<float> shift(dim);
    vtbr_test::fill_random(shift, rng);
    auto transform = [&](std::vector<std::vector<float>> values) {
        for (auto& v : values) {
            const double a = v[0], b = v[1];
            v[0] = static_cast<float>(std::cos(theta) * a - std::sin(theta) * b);
            v[1] = static_cast<float>(std::sin(theta) * a + std::cos(theta) * b);
            for (std::size_t d = 0; d < dim; ++d) v[d] += shift[d];
        }
        return values;
    };
    const auto r3 = evaluate_embeddings(transform(inst.queries), transform(inst.gallery),
                                        inst.qmeta, inst.gmeta, {1, 5});
    CHECK(r3.mAP == doctest::Approx(r1.mAP).epsilon(1e-9));
    for (std::size_t i = 0; i < r1.cmc.size(); ++i) {
        CHECK(r3.cmc[i] == doctest::Approx(r1.cmc[i]).epsilon(1e-9));
    }
}

TEST_CASE("pipeline metrics equal the brute-force reference on random instances") {
    Rng rng(24);
    for (int iter = 0; iter < 50; ++iter) {
        const auto inst = vtbr_test::random_instance(rng);
        const auto report =
            evaluate_embeddings(inst.queries, inst.gallery, inst.qmeta, inst.gmeta, {1, 5});
        const auto naive = vtbr_test::naive_metrics(inst.queries, inst.gallery, inst.qmeta,
                                                    inst.gmeta, 5);
        CHECK(std::fabs(report.mAP - naive.mAP) <= 1e-9);
        CHECK(std::fabs(report.cmc[0] - naive.cmc[0]) <= 1e-9);
        CHECK(std::fabs(report.cmc[1] - naive.cmc[4]) <= 1e-9);
        CHECK(report.skipped_queries == naive.skipped);
    }
}

TEST_CASE("expected_ap_random matches exhaustive permutation enumeration") {
    // n=3, r=2: permutations give (1 + 5/6 + 7/12)/3
    CHECK(vtbr_test::expected_ap_random(2, 3) ==
          doctest::Approx((1.0 + 5.0 / 6.0 + (0.5 + 2.0 / 3.0) / 2.0) / 3.0).epsilon(1e-12));
    CHECK(vtbr_test::expected_ap_random(1, 2) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(vtbr_test::expected_ap_random(3, 3) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("saliency: normalized, deterministic, flat on a dead model") {
    Rng rng(25);
    Model<float> model(vtbr_test::gradcheck_config());
    model.init_weights(rng);

    ImageTensor img;
    img.height = 16;
    img.width = 8;
    img.channels = 3;
    img.values.resize(3 * 16 * 8);
    for (float& v : img.values) v = static_cast<float>(rng.uniform());
    const std::vector<int> ids{0, 4, 5, 6, 1};

    const auto m1 = saliency_map(model, img, ids);
    const auto m2 = saliency_map(model, img, ids);
    CHECK(m1.values == m2.values);
    CHECK_FALSE(m1.flat);
    float mx = 0.0f;
    for (float v : m1.values) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        mx = std::max(mx, v);
    }
    CHECK(mx == doctest::Approx(1.0f));

    // all-zero parameters produce a flat zero map
    Model<float> dead(vtbr_test::gradcheck_config());
    const auto flat = saliency_map(dead, img, ids);
    CHECK(flat.flat);
    for (float v : flat.values) CHECK(v == 0.0f);

    save_saliency("/tmp/vtbr_test_sal.pgm", m1);
    std::remove("/tmp/vtbr_test_sal.pgm");
    std::remove("/tmp/vtbr_test_sal.pgm.f32");
}
