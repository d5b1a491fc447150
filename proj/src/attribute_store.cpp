#include "vtbr/attribute_store.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "vtbr/error.hpp"
#include "json.hpp"

namespace vtbr {

using nlohmann::json;

const AttributeCategory* AttributeSchema::find(const std::string& name) const {
    for (const auto& c : categories) {
        if (c.name == name) return &c;
    }
    return nullptr;
}

bool AttributeSchema::has_value(const std::string& category,
                                const std::string& value) const {
    const AttributeCategory* c = find(category);
    if (c == nullptr) return false;
    return std::find(c->values.begin(), c->values.end(), value) != c->values.end();
}

double FrequencyTable::probability(const std::string& category,
                                   const std::string& value) const {
    const auto it = probabilities.find({category, value});
    if (it == probabilities.end()) {
        throw Error("frequency table has no entry for (" + category + ", " + value + ")");
    }
    return it->second;
}

std::vector<std::string> validate_schema(const AttributeSchema& schema) {
    std::vector<std::string> violations;
    std::set<std::string> seen;
    for (const auto& c : schema.categories) {
        if (!seen.insert(c.name).second) {
            violations.push_back("duplicate category name: " + c.name);
        }
        if (c.values.size() < 2) {
            violations.push_back("category " + c.name + " has fewer than 2 values");
        }
        std::set<std::string> vals;
        for (const auto& v : c.values) {
            if (v.empty()) {
                violations.push_back("category " + c.name + " has an empty value");
            }
            if (!vals.insert(v).second) {
                violations.push_back("category " + c.name + " duplicates value " + v);
            }
        }
    }
    return violations;
}

void validate_record(const AttributeRecord& record, const AttributeSchema& schema) {
    if (record.identity_id < 0 || record.camera_id < 0) {
        throw SchemaViolation("identity/camera ids must be non-negative");
    }
    if (record.values.size() != schema.categories.size()) {
        throw SchemaViolation("record has " + std::to_string(record.values.size()) +
                              " categories, schema declares " +
                              std::to_string(schema.categories.size()));
    }
    for (const auto& c : schema.categories) {
        const auto it = record.values.find(c.name);
        if (it == record.values.end()) {
            throw SchemaViolation("record is missing category " + c.name);
        }
        if (std::find(c.values.begin(), c.values.end(), it->second) == c.values.end()) {
            throw SchemaViolation("value \"" + it->second +
                                  "\" is not in schema for category " + c.name);
        }
    }
}

namespace {

AttributeLevel level_from_string(const std::string& s) {
    if (s == "identity") return AttributeLevel::identity;
    if (s == "scene") return AttributeLevel::scene;
    throw ParseError("unknown attribute level: " + s);
}

const char* level_to_string(AttributeLevel l) {
    return l == AttributeLevel::identity ? "identity" : "scene";
}

}  // namespace

std::vector<AttributeRecord> load_annotations(const std::string& path,
                                              const AttributeSchema& schema) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open annotation file: " + path);
    std::vector<AttributeRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
        AttributeRecord rec;
        try {
            rec.identity_id = j.at("id").get<std::int64_t>();
            rec.camera_id = j.at("cam").get<std::int64_t>();
            for (const auto& [k, v] : j.at("attrs").items()) {
                rec.values[k] = v.get<std::string>();
            }
        } catch (const json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
        try {
            validate_record(rec, schema);
        } catch (const SchemaViolation& e) {
            throw SchemaViolation("line " + std::to_string(line_no) + ": " + e.what());
        }
        records.push_back(std::move(rec));
    }
    return records;
}

void save_annotations(const std::string& path,
                      const std::vector<AttributeRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write annotation file: " + path);
    for (const auto& rec : records) {
        json attrs = json::object();
        for (const auto& [k, v] : rec.values) attrs[k] = v;
        json j{{"id", rec.identity_id}, {"cam", rec.camera_id}, {"attrs", attrs}};
        out << j.dump() << "\n";
    }
}

AttributeSchema load_schema(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open schema file: " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(std::string("schema file: ") + e.what());
    }
    AttributeSchema schema;
    for (const auto& c : j.at("categories")) {
        AttributeCategory cat;
        cat.name = c.at("name").get<std::string>();
        cat.level = level_from_string(c.at("level").get<std::string>());
        for (const auto& v : c.at("values")) cat.values.push_back(v.get<std::string>());
        schema.categories.push_back(std::move(cat));
    }
    const auto violations = validate_schema(schema);
    if (!violations.empty()) {
        throw SchemaViolation("schema file " + path + ": " + violations.front());
    }
    return schema;
}

void save_schema(const std::string& path, const AttributeSchema& schema) {
    json cats = json::array();
    for (const auto& c : schema.categories) {
        cats.push_back({{"name", c.name},
                        {"level", level_to_string(c.level)},
                        {"values", c.values}});
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write schema file: " + path);
    out << json{{"categories", cats}}.dump(2) << "\n";
}

FrequencyTable attribute_frequencies(const std::vector<AttributeRecord>& records,
                                     const AttributeSchema& schema,
                                     SceneCountUnit scene_unit) {
    if (records.empty()) throw Error("attribute_frequencies: empty record set");

    // Identity-level: one vote per distinct identity; values must agree
    // across all of an identity's records.
    std::map<std::int64_t, const AttributeRecord*> first_by_id;
    for (const auto& rec : records) {
        const auto [it, inserted] = first_by_id.insert({rec.identity_id, &rec});
        if (inserted) continue;
        for (const auto& c : schema.categories) {
            if (c.level != AttributeLevel::identity) continue;
            if (it->second->values.at(c.name) != rec.values.at(c.name)) {
                throw Error("identity " + std::to_string(rec.identity_id) +
                            " has inconsistent values for identity-level category " +
                            c.name);
            }
        }
    }

    // Scene-level unit: distinct (identity, camera) pairs by default. When
    // the same pair occurs twice, its first record wins.
    std::map<std::pair<std::int64_t, std::int64_t>, const AttributeRecord*> first_by_obs;
    for (const auto& rec : records) {
        first_by_obs.insert({{rec.identity_id, rec.camera_id}, &rec});
    }

    FrequencyTable table;
    table.id_count = static_cast<std::int64_t>(first_by_id.size());
    for (const auto& c : schema.categories) {
        std::map<std::string, std::int64_t> counts;
        for (const auto& v : c.values) counts[v] = 0;
        double denom = 0.0;
        const bool per_identity =
            c.level == AttributeLevel::identity || scene_unit == SceneCountUnit::identity;
        if (per_identity) {
            denom = static_cast<double>(first_by_id.size());
            for (const auto& [id, rec] : first_by_id) {
                (void)id;
                ++counts[rec->values.at(c.name)];
            }
        } else {
            denom = static_cast<double>(first_by_obs.size());
            for (const auto& [key, rec] : first_by_obs) {
                (void)key;
                ++counts[rec->values.at(c.name)];
            }
        }
        for (const auto& [value, count] : counts) {
            table.probabilities[{c.name, value}] = static_cast<double>(count) / denom;
        }
    }
    return table;
}

}  // namespace vtbr
