#include "doctest.h"

#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "test_util.hpp"
#include "vtbr/attribute_store.hpp"
#include "vtbr/error.hpp"
#include "vtbr/rng.hpp"

using namespace vtbr;
using vtbr_test::make_record;
using vtbr_test::test_schema;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/vtbr_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

AttributeSchema weather_only_schema() {
    AttributeSchema s;
    s.categories = {{"weather", AttributeLevel::scene, {"sunny", "rainy"}}};
    return s;
}

}  // namespace

TEST_CASE("validate_schema flags the spec'd violations") {
    CHECK(validate_schema(test_schema()).empty());

    AttributeSchema dup = test_schema();
    dup.categories.push_back(dup.categories.front());
    CHECK(validate_schema(dup).size() == 1);

    AttributeSchema empty_vals = test_schema();
    empty_vals.categories[0].values.clear();
    CHECK(validate_schema(empty_vals).size() == 1);
}

TEST_CASE("load_annotations: valid file, order preserved") {
    TempFile f("ann_ok.jsonl");
    {
        std::ofstream out(f.path);
        out << R"({"id": 0, "cam": 0, "attrs": {"weather": "sunny"}})" << "\n";
        out << R"({"id": 1, "cam": 2, "attrs": {"weather": "rainy"}})" << "\n";
        out << R"({"id": 0, "cam": 1, "attrs": {"weather": "rainy"}})" << "\n";
    }
    const auto records = load_annotations(f.path, weather_only_schema());
    REQUIRE(records.size() == 3);
    CHECK(records[0].identity_id == 0);
    CHECK(records[1].camera_id == 2);
    CHECK(records[2].values.at("weather") == "rainy");
}

TEST_CASE("load_annotations: empty file gives empty list") {
    TempFile f("ann_empty.jsonl");
    std::ofstream(f.path).close();
    CHECK(load_annotations(f.path, weather_only_schema()).empty());
}

TEST_CASE("load_annotations: schema violation names the offending line") {
    TempFile f("ann_bad.jsonl");
    {
        std::ofstream out(f.path);
        out << R"({"id": 0, "cam": 0, "attrs": {"weather": "sunny"}})" << "\n";
        out << R"({"id": 1, "cam": 0, "attrs": {"weather": "rainyy"}})" << "\n";
    }
    try {
        load_annotations(f.path, weather_only_schema());
        FAIL("expected SchemaViolation");
    } catch (const SchemaViolation& e) {
        const std::string msg = e.what();
        CHECK(msg.find("line 2") != std::string::npos);
        CHECK(msg.find("rainyy") != std::string::npos);
    }
}

TEST_CASE("load_annotations: malformed JSON carries the line number") {
    TempFile f("ann_parse.jsonl");
    {
        std::ofstream out(f.path);
        out << R"({"id": 0, "cam": 0, "attrs": {"weather": "sunny"}})" << "\n";
        out << "{not json\n";
    }
    CHECK_THROWS_WITH_AS(load_annotations(f.path, weather_only_schema()),
                         doctest::Contains("line 2"), ParseError);
}

TEST_CASE("annotation save/load round-trips record lists") {
    const auto schema = test_schema();
    std::vector<AttributeRecord> records;
    Rng rng(77);
    for (int id = 0; id < 10; ++id) {
        for (int cam = 0; cam < 3; ++cam) {
            AttributeRecord r;
            r.identity_id = id;
            r.camera_id = cam;
            for (const auto& c : schema.categories) {
                // identity-level values keyed by id only
                const std::size_t pick = c.level == AttributeLevel::identity
                                             ? static_cast<std::size_t>(id) % c.values.size()
                                             : rng.uniform_below(c.values.size());
                r.values[c.name] = c.values[pick];
            }
            records.push_back(r);
        }
    }
    TempFile f("ann_rt.jsonl");
    save_annotations(f.path, records);
    const auto loaded = load_annotations(f.path, schema);
    REQUIRE(loaded.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        CHECK(loaded[i].identity_id == records[i].identity_id);
        CHECK(loaded[i].camera_id == records[i].camera_id);
        CHECK(loaded[i].values == records[i].values);
    }
}

TEST_CASE("attribute_frequencies: direct ratio over identities") {
    // 200 identities, 160 with weather=sunny on all their records
    std::vector<AttributeRecord> records;
    for (int id = 0; id < 200; ++id) {
        const char* w = id < 160 ? "sunny" : "rainy";
        records.push_back(make_record(id, 0, {{"weather", w}}));
        records.push_back(make_record(id, 1, {{"weather", w}}));
    }
    // counted per identity here to pin the ratio exactly
    const auto freq = attribute_frequencies(records, weather_only_schema(),
                                            SceneCountUnit::identity);
    CHECK(freq.probability("weather", "sunny") == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(freq.id_count == 200);
}

TEST_CASE("attribute_frequencies: degenerate single record") {
    const auto freq = attribute_frequencies({make_record(3, 0, {{"weather", "sunny"}})},
                                            weather_only_schema());
    CHECK(freq.probability("weather", "sunny") == 1.0);
    CHECK(freq.probability("weather", "rainy") == 0.0);
}

TEST_CASE("attribute_frequencies: errors") {
    CHECK_THROWS_AS(attribute_frequencies({}, weather_only_schema()), Error);

    AttributeSchema s;
    s.categories = {{"hair", AttributeLevel::identity, {"short", "long"}}};
    std::vector<AttributeRecord> bad{make_record(0, 0, {{"hair", "short"}}),
                                     make_record(0, 1, {{"hair", "long"}})};
    CHECK_THROWS_WITH_AS(attribute_frequencies(bad, s), doctest::Contains("inconsistent"),
                         Error);
}

TEST_CASE("attribute_frequencies matches a brute-force recount on random fixtures") {
    const auto schema = test_schema();
    Rng rng(2024);
    std::vector<AttributeRecord> records;
    for (int id = 0; id < 50; ++id) {
        std::map<std::string, std::string> identity_vals;
        for (const auto& c : schema.categories) {
            if (c.level == AttributeLevel::identity) {
                identity_vals[c.name] = c.values[rng.uniform_below(c.values.size())];
            }
        }
        const int cams = 1 + static_cast<int>(rng.uniform_below(4));
        for (int cam = 0; cam < cams; ++cam) {
            AttributeRecord r;
            r.identity_id = id;
            r.camera_id = cam;
            r.values = identity_vals;
            for (const auto& c : schema.categories) {
                if (c.level == AttributeLevel::scene) {
                    r.values[c.name] = c.values[rng.uniform_below(c.values.size())];
                }
            }
            records.push_back(r);
        }
    }

    const auto freq = attribute_frequencies(records, schema);

    // independent recount: distinct ids / distinct (id, cam) pairs
    std::set<std::int64_t> ids;
    std::set<std::pair<std::int64_t, std::int64_t>> obs;
    for (const auto& r : records) {
        ids.insert(r.identity_id);
        obs.insert({r.identity_id, r.camera_id});
    }
    for (const auto& c : schema.categories) {
        double total = 0.0;
        for (const auto& v : c.values) {
            std::set<std::int64_t> ids_with;
            std::set<std::pair<std::int64_t, std::int64_t>> obs_with;
            for (const auto& r : records) {
                if (r.values.at(c.name) != v) continue;
                ids_with.insert(r.identity_id);
                obs_with.insert({r.identity_id, r.camera_id});
            }
            const double expected =
                c.level == AttributeLevel::identity
                    ? static_cast<double>(ids_with.size()) / static_cast<double>(ids.size())
                    : static_cast<double>(obs_with.size()) / static_cast<double>(obs.size());
            CHECK(freq.probability(c.name, v) == doctest::Approx(expected).epsilon(1e-12));
            total += freq.probability(c.name, v);
        }
        // per-category probabilities sum to one
        CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("attribute_frequencies is invariant under record duplication") {
    const auto schema = weather_only_schema();
    std::vector<AttributeRecord> records{make_record(0, 0, {{"weather", "sunny"}}),
                                         make_record(1, 0, {{"weather", "rainy"}}),
                                         make_record(1, 1, {{"weather", "sunny"}})};
    const auto base = attribute_frequencies(records, schema);
    auto doubled = records;
    doubled.insert(doubled.end(), records.begin(), records.end());
    const auto dup = attribute_frequencies(doubled, schema);
    CHECK(base.probabilities == dup.probabilities);
}

TEST_CASE("schema file round-trip") {
    TempFile f("schema.json");
    save_schema(f.path, test_schema());
    const auto loaded = load_schema(f.path);
    REQUIRE(loaded.categories.size() == test_schema().categories.size());
    CHECK(loaded.categories[1].name == "hair");
    CHECK(loaded.categories[4].level == AttributeLevel::scene);
    CHECK(loaded.categories[2].values == test_schema().categories[2].values);
}
