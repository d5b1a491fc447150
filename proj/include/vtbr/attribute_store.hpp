#pragma once

// Attribute annotations: schema, per-observation records, and the
// per-(category, value) appearance probabilities that drive caption
// selection.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace vtbr {

enum class AttributeLevel { identity, scene };

struct AttributeCategory {
    std::string name;
    AttributeLevel level = AttributeLevel::identity;
    std::vector<std::string> values;
};

struct AttributeSchema {
    std::vector<AttributeCategory> categories;

    const AttributeCategory* find(const std::string& name) const;
    bool has_value(const std::string& category, const std::string& value) const;
};

// One (identity, camera) observation.
struct AttributeRecord {
    std::int64_t identity_id = 0;
    std::int64_t camera_id = 0;
    std::map<std::string, std::string> values;  // category -> value
};

// How scene-level categories are counted. Identity-level categories are
// always counted over distinct identities (the distribution is per ID);
// scene-level ones default to distinct (identity, camera) observations
// since they vary per capture.
enum class SceneCountUnit { observation, identity };

struct FrequencyTable {
    // (category, value) -> appearance probability in [0, 1].
    std::map<std::pair<std::string, std::string>, double> probabilities;
    std::int64_t id_count = 0;

    double probability(const std::string& category, const std::string& value) const;
};

// Returns the list of schema violations; empty means valid.
std::vector<std::string> validate_schema(const AttributeSchema& schema);

// Throws SchemaViolation if the record does not match the schema.
void validate_record(const AttributeRecord& record, const AttributeSchema& schema);

// JSON Lines, one record per line:
//   {"id": int, "cam": int, "attrs": {"<category>": "<value>", ...}}
std::vector<AttributeRecord> load_annotations(const std::string& path,
                                              const AttributeSchema& schema);
void save_annotations(const std::string& path,
                      const std::vector<AttributeRecord>& records);

// Schema file: {"categories": [{"name", "level", "values"}, ...]}
AttributeSchema load_schema(const std::string& path);
void save_schema(const std::string& path, const AttributeSchema& schema);

// P(category=value). Identity-level values are counted over distinct
// identities (duplicate records of one identity do not change the result);
// scene-level values over the configured unit.
FrequencyTable attribute_frequencies(
    const std::vector<AttributeRecord>& records, const AttributeSchema& schema,
    SceneCountUnit scene_unit = SceneCountUnit::observation);

}  // namespace vtbr
