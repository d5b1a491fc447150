#include "doctest.h"

#include <set>

#include "test_util.hpp"
#include "vtbr/captiongen.hpp"
#include "vtbr/error.hpp"

using namespace vtbr;
using vtbr_test::make_record;

namespace {

// Frequency table with hand-picked probabilities for a two-category schema.
FrequencyTable fixed_freq() {
    FrequencyTable f;
    f.id_count = 10;
    f.probabilities[{"hair", "long"}] = 0.5;
    f.probabilities[{"hair", "short"}] = 0.5;
    f.probabilities[{"weather", "sunny"}] = 0.9;
    f.probabilities[{"weather", "rainy"}] = 0.1;
    return f;
}

CaptionTemplate hair_weather_template() {
    CaptionTemplate t;
    t.slots = {
        {"", {"a", "person"}, {}},
        {"hair", {"with"}, {"hair"}},
        {"weather", {"in"}, {"day"}},
    };
    return t;
}

AttributeRecord hw_record(const char* hair, const char* weather) {
    return make_record(0, 0, {{"hair", hair}, {"weather", weather}});
}

}  // namespace

TEST_CASE("selection rule keeps rare attributes and drops common ones") {
    // hair P=0.5 kept, weather P=0.9 dropped at alpha 0.8
    const Caption cap = generate_caption(hw_record("long", "sunny"), hair_weather_template(),
                                         fixed_freq(), {0.8});
    CHECK(cap.text() == "a person with long hair");
    CHECK(cap.tokens.front() == kSosToken);
    CHECK(cap.tokens.back() == kEosToken);
}

TEST_CASE("boundary P == alpha is included") {
    FrequencyTable f = fixed_freq();
    f.probabilities[{"weather", "sunny"}] = 0.8;  // exactly at the threshold
    const Caption cap =
        generate_caption(hw_record("long", "sunny"), hair_weather_template(), f, {0.8});
    CHECK(cap.text() == "a person with long hair in sunny day");
}

TEST_CASE("threshold extremes") {
    const auto rec = hw_record("long", "sunny");
    const Caption all = generate_caption(rec, hair_weather_template(), fixed_freq(), {1.0});
    CHECK(all.text() == "a person with long hair in sunny day");
    const Caption none = generate_caption(rec, hair_weather_template(), fixed_freq(), {0.0});
    CHECK(none.text() == "a person");  // observed values all have P > 0
}

TEST_CASE("caption token set grows monotonically with alpha") {
    const auto rec = hw_record("long", "sunny");
    std::size_t prev = 0;
    for (double alpha : {0.0, 0.25, 0.5, 0.8, 1.0}) {
        const Caption cap = generate_caption(rec, hair_weather_template(), fixed_freq(), {alpha});
        CHECK(cap.tokens.size() >= prev);
        prev = cap.tokens.size();
    }
}

TEST_CASE("generation is deterministic") {
    const auto rec = hw_record("short", "rainy");
    const Caption a = generate_caption(rec, hair_weather_template(), fixed_freq(), {0.8});
    const Caption b = generate_caption(rec, hair_weather_template(), fixed_freq(), {0.8});
    CHECK(a.tokens == b.tokens);
}

TEST_CASE("template referencing a category absent from the record fails") {
    AttributeRecord rec = make_record(0, 0, {{"hair", "long"}});
    CHECK_THROWS_AS(
        generate_caption(rec, hair_weather_template(), fixed_freq(), {0.8}),
        SchemaViolation);
}

TEST_CASE("template validation") {
    const auto schema = vtbr_test::test_schema();
    CHECK_NOTHROW(validate_template(vtbr_test::test_template(), schema));

    CaptionTemplate no_attr;
    no_attr.slots = {{"", {"hello"}, {}}};
    CHECK_THROWS_AS(validate_template(no_attr, schema), SchemaViolation);

    CaptionTemplate twice = vtbr_test::test_template();
    twice.slots.push_back({"hair", {}, {}});
    CHECK_THROWS_AS(validate_template(twice, schema), SchemaViolation);

    CaptionTemplate unknown;
    unknown.slots = {{"nosuch", {}, {}}};
    CHECK_THROWS_AS(validate_template(unknown, schema), SchemaViolation);
}

TEST_CASE("rs_select keeps one record per distinct caption per identity") {
    std::vector<AttributeRecord> records;
    std::vector<Caption> captions;
    auto add = [&](std::int64_t id, std::int64_t cam, const std::string& text) {
        records.push_back(make_record(id, cam, {}));
        captions.push_back(caption_from_text(text, id));
    };
    add(0, 0, "a person");
    add(0, 1, "a person");        // duplicate of the first -> dropped
    add(0, 2, "a tall person");   // distinct -> kept
    add(0, 3, "a tall person");   // duplicate -> dropped
    add(1, 0, "a person");        // other identity -> kept

    const auto kept = rs_select(records, captions);
    CHECK(kept == std::vector<std::size_t>{0, 2, 4});
}

TEST_CASE("rs_select identity case and idempotence") {
    std::vector<AttributeRecord> records;
    std::vector<Caption> captions;
    for (int i = 0; i < 6; ++i) {
        records.push_back(make_record(i, 0, {}));
        captions.push_back(caption_from_text("caption number " + std::to_string(i), i));
    }
    const auto kept = rs_select(records, captions);
    REQUIRE(kept.size() == records.size());

    // idempotence: reapplying on the kept subset keeps everything
    std::vector<AttributeRecord> records2;
    std::vector<Caption> captions2;
    for (std::size_t idx : kept) {
        records2.push_back(records[idx]);
        captions2.push_back(captions[idx]);
    }
    const auto kept2 = rs_select(records2, captions2);
    CHECK(kept2.size() == kept.size());
}

TEST_CASE("rs_select halves a 2:1 duplicate fixture") {
    std::vector<AttributeRecord> records;
    std::vector<Caption> captions;
    for (int id = 0; id < 8; ++id) {
        for (int cam = 0; cam < 4; ++cam) {
            records.push_back(make_record(id, cam, {}));
            // two cameras share each caption -> exactly 2:1 collapse
            captions.push_back(caption_from_text(
                "identity " + std::to_string(id) + " look " + std::to_string(cam / 2), id));
        }
    }
    const auto kept = rs_select(records, captions);
    CHECK(kept.size() == records.size() / 2);
    // every identity retains at least one record
    std::set<std::int64_t> ids;
    for (std::size_t idx : kept) ids.insert(records[idx].identity_id);
    CHECK(ids.size() == 8);
}

TEST_CASE("rs_select rejects misaligned inputs") {
    std::vector<AttributeRecord> records{make_record(0, 0, {})};
    CHECK_THROWS_AS(rs_select(records, {}), Error);
}

TEST_CASE("vocabulary build: contents, min_freq, determinism") {
    std::vector<Caption> corpus{caption_from_text("a person walks", 0),
                                caption_from_text("a person stands", 1)};
    const Vocabulary v1 = build_vocabulary(corpus, 1);
    CHECK(v1.size() == 8);  // 4 reserved + a, person, stands, walks
    CHECK(v1.id_to_token[0] == kSosToken);
    CHECK(v1.id_to_token[3] == kUnkToken);
    CHECK(v1.id_of("a") == 4);
    CHECK(v1.id_of("person") == 5);

    const Vocabulary v2 = build_vocabulary(corpus, 2);
    CHECK(v2.size() == 6);
    CHECK(v2.id_of("walks") == kUnkId);

    const Vocabulary v3 = build_vocabulary(corpus, 1);
    CHECK(v1.id_to_token == v3.id_to_token);
}

TEST_CASE("encode: round trip and UNK") {
    std::vector<Caption> corpus{caption_from_text("a person walks", 0)};
    const Vocabulary vocab = build_vocabulary(corpus, 1);

    const Caption in_vocab = caption_from_text("a person walks", 0);
    const auto ids = encode_caption(in_vocab, vocab);
    REQUIRE(ids.size() == in_vocab.tokens.size());
    CHECK(ids.front() == kSosId);
    CHECK(ids.back() == kEosId);
    CHECK(decode_tokens(ids, vocab) == in_vocab.tokens);

    const Caption with_oov = caption_from_text("a person runs", 0);
    const auto ids2 = encode_caption(with_oov, vocab);
    CHECK(ids2[3] == kUnkId);
    CHECK(ids2.size() == with_oov.tokens.size());
}

TEST_CASE("corpus and vocabulary files round-trip") {
    std::vector<AttributeRecord> records{make_record(0, 0, {}), make_record(0, 1, {}),
                                         make_record(2, 0, {})};
    std::vector<Caption> captions{caption_from_text("one two", 0),
                                  caption_from_text("one two", 0),
                                  caption_from_text("three four five", 2)};
    const auto kept = rs_select(records, captions);
    const std::string corpus_path = "/tmp/vtbr_test_corpus.jsonl";
    save_corpus(corpus_path, records, captions, kept);
    const auto rows = load_corpus(corpus_path);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].identity_id == 0);
    CHECK(rows[0].caption == "one two");
    CHECK(rows[1].caption == "three four five");

    const Vocabulary vocab = build_vocabulary(captions, 1);
    const std::string vocab_path = "/tmp/vtbr_test_vocab.json";
    save_vocabulary(vocab_path, vocab);
    const Vocabulary loaded = load_vocabulary(vocab_path);
    CHECK(loaded.id_to_token == vocab.id_to_token);
    std::remove(corpus_path.c_str());
    std::remove(vocab_path.c_str());
}
