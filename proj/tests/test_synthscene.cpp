#include "doctest.h"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "test_util.hpp"
#include "vtbr/error.hpp"
#include "vtbr/synthscene.hpp"

using namespace vtbr;
using vtbr_test::test_schema;

namespace {

RenderConfig small_render() {
    RenderConfig r;
    r.height = 64;
    r.width = 32;
    r.jitter = 2;
    r.noise = 0.04f;
    return r;
}

AttributeRecord full_record(int id, int cam) {
    const auto schema = test_schema();
    AttributeRecord rec;
    rec.identity_id = id;
    rec.camera_id = cam;
    for (const auto& c : schema.categories) {
        rec.values[c.name] = c.values[static_cast<std::size_t>(id) % c.values.size()];
    }
    return rec;
}

double region_mean(const ImageTensor& img, const Rect& r) {
    double total = 0.0;
    for (int c = 0; c < 3; ++c) {
        for (int y = r.y0; y < r.y1; ++y) {
            for (int x = r.x0; x < r.x1; ++x) total += img.at(c, y, x);
        }
    }
    return total / (3.0 * r.area());
}

}  // namespace

TEST_CASE("rendering is deterministic per (record, seed)") {
    const auto schema = test_schema();
    const auto rec = full_record(3, 1);
    const ImageTensor a = render_image(rec, schema, 42, small_render());
    const ImageTensor b = render_image(rec, schema, 42, small_render());
    CHECK(a.values == b.values);
    for (float v : a.values) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("different seeds differ but keep region colors close") {
    const auto schema = test_schema();
    const auto cfg = small_render();
    const auto rec = full_record(5, 0);
    const ImageTensor a = render_image(rec, schema, 1, cfg);
    const ImageTensor b = render_image(rec, schema, 2, cfg);
    CHECK(a.values != b.values);
    for (const char* cat : {"gender", "hair", "top", "bag"}) {
        const Rect r = category_region(schema, cfg, cat);
        CHECK(std::fabs(region_mean(a, r) - region_mean(b, r)) < 0.1);
    }
}

TEST_CASE("changing one glyph attribute only touches its region") {
    const auto schema = test_schema();
    const auto cfg = small_render();
    AttributeRecord rec1 = full_record(5, 0);
    AttributeRecord rec2 = rec1;
    rec2.values["hair"] = rec1.values.at("hair") == "short" ? "long" : "short";
    const ImageTensor a = render_image(rec1, schema, 9, cfg);
    const ImageTensor b = render_image(rec2, schema, 9, cfg);
    const Rect hair = category_region(schema, cfg, "hair");
    bool any_diff = false;
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < a.height; ++y) {
            for (int x = 0; x < a.width; ++x) {
                if (a.at(c, y, x) != b.at(c, y, x)) {
                    any_diff = true;
                    CAPTURE(x);
                    CAPTURE(y);
                    CHECK(hair.contains(x, y));
                }
            }
        }
    }
    CHECK(any_diff);
}

TEST_CASE("unknown value raises a rendering error") {
    const auto schema = test_schema();
    AttributeRecord rec = full_record(0, 0);
    rec.values["hair"] = "mohawk";
    CHECK_THROWS_AS(render_image(rec, schema, 0, small_render()), Error);
}

TEST_CASE("image file round-trip") {
    const auto schema = test_schema();
    const ImageTensor img = render_image(full_record(1, 0), schema, 7, small_render());
    const std::string path = "/tmp/vtbr_test_img.bin";
    save_image(path, img, {{"stage", "test"}});
    const ImageTensor loaded = load_image(path);
    CHECK(loaded.height == img.height);
    CHECK(loaded.width == img.width);
    CHECK(loaded.values == img.values);
    std::remove(path.c_str());
}

TEST_CASE("truncated image file is rejected") {
    const auto schema = test_schema();
    const ImageTensor img = render_image(full_record(1, 0), schema, 7, small_render());
    const std::string path = "/tmp/vtbr_test_img_trunc.bin";
    save_image(path, img);
    {
        std::ifstream in(path, std::ios::binary);
        std::stringstream buf;
        buf << in.rdbuf();
        std::string data = buf.str();
        data.resize(data.size() / 2);
        std::ofstream out(path, std::ios::binary);
        out << data;
    }
    CHECK_THROWS_AS(load_image(path), ParseError);
    std::remove(path.c_str());
}

TEST_CASE("make_split: identity-disjoint with cross-camera matches") {
    std::vector<AttributeRecord> records;
    for (int id = 0; id < 40; ++id) {
        for (int cam = 0; cam < 4; ++cam) records.push_back(full_record(id, cam));
    }
    SplitConfig cfg;
    cfg.train_ratio = 0.5;
    cfg.seeds_per_record = 2;
    const SplitManifest m = make_split(records, cfg, 13);

    std::set<std::int64_t> train_ids, query_ids, gallery_ids;
    for (const auto& e : m.train) train_ids.insert(records[e.record_index].identity_id);
    for (const auto& e : m.query) query_ids.insert(records[e.record_index].identity_id);
    for (const auto& e : m.gallery) gallery_ids.insert(records[e.record_index].identity_id);

    CHECK(train_ids.size() == 20);
    CHECK(query_ids.size() == 20);
    for (std::int64_t id : query_ids) {
        CHECK(train_ids.count(id) == 0);
        CHECK(gallery_ids.count(id) == 1);  // query identities appear in the gallery
    }

    // query and gallery are disjoint by (identity, camera); every query
    // identity has gallery entries from another camera
    std::set<std::pair<std::int64_t, std::int64_t>> query_idcam, gallery_idcam;
    for (const auto& e : m.query) {
        const auto& r = records[e.record_index];
        query_idcam.insert({r.identity_id, r.camera_id});
    }
    for (const auto& e : m.gallery) {
        const auto& r = records[e.record_index];
        gallery_idcam.insert({r.identity_id, r.camera_id});
    }
    for (const auto& qc : query_idcam) {
        CHECK(gallery_idcam.count(qc) == 0);
        bool cross = false;
        for (const auto& gc : gallery_idcam) {
            if (gc.first == qc.first && gc.second != qc.second) cross = true;
        }
        CHECK(cross);
    }
}

TEST_CASE("make_split: fixed seed gives identical manifest bytes") {
    std::vector<AttributeRecord> records;
    for (int id = 0; id < 10; ++id) {
        for (int cam = 0; cam < 3; ++cam) records.push_back(full_record(id, cam));
    }
    SplitConfig cfg;
    const std::string p1 = "/tmp/vtbr_test_split1.json";
    const std::string p2 = "/tmp/vtbr_test_split2.json";
    save_split(p1, make_split(records, cfg, 99));
    save_split(p2, make_split(records, cfg, 99));
    std::ifstream f1(p1), f2(p2);
    std::stringstream s1, s2;
    s1 << f1.rdbuf();
    s2 << f2.rdbuf();
    CHECK(s1.str() == s2.str());
    CHECK(!s1.str().empty());
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("make_split: degenerate ratios fail") {
    std::vector<AttributeRecord> records;
    for (int id = 0; id < 4; ++id) {
        for (int cam = 0; cam < 2; ++cam) records.push_back(full_record(id, cam));
    }
    SplitConfig cfg;
    cfg.train_ratio = 1.0;
    CHECK_THROWS_AS(make_split(records, cfg, 1), Error);
    cfg.train_ratio = 0.0;
    CHECK_THROWS_AS(make_split(records, cfg, 1), Error);
}

TEST_CASE("make_split: single-camera test identity is rejected") {
    std::vector<AttributeRecord> records;
    records.push_back(full_record(0, 0));
    records.push_back(full_record(0, 1));
    records.push_back(full_record(1, 0));  // only one camera
    SplitConfig cfg;
    cfg.train_ratio = 0.5;
    bool saw_error = false;
    // either identity may land in test depending on the shuffle; try seeds
    for (std::uint64_t seed = 0; seed < 16 && !saw_error; ++seed) {
        try {
            make_split(records, cfg, seed);
        } catch (const Error&) {
            saw_error = true;
        }
    }
    CHECK(saw_error);
}

TEST_CASE("sample_records: distinct identity tuples, sorted output, domain weights") {
    const auto schema = test_schema();
    DomainSpec domain;
    domain.name = "a";
    domain.scene_weights["weather"] = {1.0, 0.0, 0.0};  // always sunny
    const auto records = sample_records(schema, 12, 3, domain, 5);
    REQUIRE(records.size() == 36);
    std::set<std::string> tuples;
    for (const auto& r : records) {
        CHECK(r.values.at("weather") == "sunny");
        std::string key;
        for (const auto& c : schema.categories) {
            if (c.level == AttributeLevel::identity) key += r.values.at(c.name) + "|";
        }
        tuples.insert(key);
    }
    CHECK(tuples.size() == 12);
    for (std::size_t i = 1; i < records.size(); ++i) {
        const bool sorted =
            records[i - 1].identity_id < records[i].identity_id ||
            (records[i - 1].identity_id == records[i].identity_id &&
             records[i - 1].camera_id < records[i].camera_id);
        CHECK(sorted);
    }
    // deterministic
    const auto again = sample_records(schema, 12, 3, domain, 5);
    REQUIRE(again.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) CHECK(again[i].values == records[i].values);
}
