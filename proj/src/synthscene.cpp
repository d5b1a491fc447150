#include "vtbr/synthscene.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "vtbr/error.hpp"
#include "vtbr/rng.hpp"
#include "json.hpp"

namespace vtbr {

using nlohmann::json;

bool RenderConfig::is_global(const std::string& category) const {
    return std::find(global_categories.begin(), global_categories.end(), category) !=
           global_categories.end();
}

namespace {

constexpr std::uint64_t kNoiseStream = 0x6e6f6973ULL;

void hsv_to_rgb(float h, float s, float v, float rgb[3]) {
    const float c = v * s;
    const float hp = h * 6.0f;
    const float x = c * (1.0f - std::fabs(std::fmod(hp, 2.0f) - 1.0f));
    float r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    const float m = v - c;
    rgb[0] = r + m;
    rgb[1] = g + m;
    rgb[2] = b + m;
}

int category_index(const AttributeSchema& schema, const std::string& category) {
    for (std::size_t i = 0; i < schema.categories.size(); ++i) {
        if (schema.categories[i].name == category) return static_cast<int>(i);
    }
    throw SchemaViolation("unknown category: " + category);
}

int value_index(const AttributeCategory& cat, const std::string& value) {
    for (std::size_t i = 0; i < cat.values.size(); ++i) {
        if (cat.values[i] == value) return static_cast<int>(i);
    }
    throw Error("render: unknown value \"" + value + "\" for category " + cat.name);
}

// Glyph categories in schema order; their grid slot is their index here.
std::vector<int> glyph_categories(const AttributeSchema& schema,
                                  const RenderConfig& config) {
    std::vector<int> out;
    for (std::size_t i = 0; i < schema.categories.size(); ++i) {
        if (!config.is_global(schema.categories[i].name)) out.push_back(static_cast<int>(i));
    }
    return out;
}

// Cell of glyph slot g in a 2-column grid, inset so that the jittered glyph
// never leaves its cell (regions of different categories stay disjoint).
Rect glyph_nominal_rect(const RenderConfig& config, int slot, int slots_total) {
    const int margin = 2;
    const int cols = 2;
    const int rows = (slots_total + cols - 1) / cols;
    const int cell_w = (config.width - 2 * margin) / cols;
    const int cell_h = (config.height - 2 * margin) / rows;
    const int row = slot / cols;
    const int col = slot % cols;
    const int inset = config.jitter + 1;
    Rect r;
    r.x0 = margin + col * cell_w + inset;
    r.y0 = margin + row * cell_h + inset;
    r.x1 = margin + (col + 1) * cell_w - inset;
    r.y1 = margin + (row + 1) * cell_h - inset;
    if (r.x1 <= r.x0 || r.y1 <= r.y0) {
        throw ConfigError("render canvas too small for glyph grid");
    }
    return r;
}

float illumination_factor(const AttributeCategory& cat, const std::string& value) {
    const int idx = value_index(cat, value);
    const int n = static_cast<int>(cat.values.size());
    // First value brightest, last darkest.
    return 1.0f - 0.5f * static_cast<float>(idx) / static_cast<float>(n - 1);
}

}  // namespace

void value_color(const AttributeSchema& schema, const std::string& category,
                 const std::string& value, float rgb[3]) {
    const int ci = category_index(schema, category);
    const auto& cat = schema.categories[static_cast<std::size_t>(ci)];
    const int vi = value_index(cat, value);
    // Golden-ratio hue spacing keeps values of one category well separated.
    const float hue = std::fmod(0.61803398875f * static_cast<float>(vi) +
                                    0.137f * static_cast<float>(ci),
                                1.0f);
    hsv_to_rgb(hue, 0.75f, 0.95f, rgb);
}

Rect category_region(const AttributeSchema& schema, const RenderConfig& config,
                     const std::string& category) {
    const int ci = category_index(schema, category);
    if (config.is_global(category)) {
        return Rect{0, 0, config.width, config.height};
    }
    const auto glyphs = glyph_categories(schema, config);
    const auto it = std::find(glyphs.begin(), glyphs.end(), ci);
    const int slot = static_cast<int>(it - glyphs.begin());
    Rect r = glyph_nominal_rect(config, slot, static_cast<int>(glyphs.size()));
    r.x0 -= config.jitter;
    r.y0 -= config.jitter;
    r.x1 += config.jitter;
    r.y1 += config.jitter;
    return r;
}

ImageTensor render_image(const AttributeRecord& record, const AttributeSchema& schema,
                         std::uint64_t seed, const RenderConfig& config) {
    ImageTensor img;
    img.height = config.height;
    img.width = config.width;
    img.channels = 3;
    img.values.assign(static_cast<std::size_t>(3 * config.height * config.width), 0.0f);

    // Base fill: the background category's color when present.
    float base[3] = {config.base_gray, config.base_gray, config.base_gray};
    const AttributeCategory* bg = schema.find("background");
    if (bg != nullptr && config.is_global("background")) {
        float rgb[3];
        value_color(schema, "background", record.values.at("background"), rgb);
        // Strong enough to dominate pooled color statistics, muted enough
        // that glyphs stay the brightest structures.
        base[0] = 0.08f + 0.40f * rgb[0];
        base[1] = 0.08f + 0.40f * rgb[1];
        base[2] = 0.08f + 0.40f * rgb[2];
    }
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x) img.at(c, y, x) = base[c];
        }
    }

    // Glyphs. Jitter is keyed by (seed, category slot) only, so two records
    // rendered with the same seed place every glyph identically.
    const auto glyphs = glyph_categories(schema, config);
    for (std::size_t slot = 0; slot < glyphs.size(); ++slot) {
        const auto& cat = schema.categories[static_cast<std::size_t>(glyphs[slot])];
        const auto vit = record.values.find(cat.name);
        if (vit == record.values.end()) {
            throw Error("render: record lacks category " + cat.name);
        }
        float rgb[3];
        value_color(schema, cat.name, vit->second, rgb);
        Rng jrng(mix64(seed, slot + 1));
        for (int c = 0; c < 3; ++c) {
            rgb[c] += config.color_jitter * (2.0f * static_cast<float>(jrng.uniform()) - 1.0f);
        }
        const int span = 2 * config.jitter + 1;
        const int dx = static_cast<int>(jrng.uniform_below(static_cast<std::uint64_t>(span))) -
                       config.jitter;
        const int dy = static_cast<int>(jrng.uniform_below(static_cast<std::uint64_t>(span))) -
                       config.jitter;
        Rect r = glyph_nominal_rect(config, static_cast<int>(slot),
                                    static_cast<int>(glyphs.size()));
        r.x0 += dx; r.x1 += dx; r.y0 += dy; r.y1 += dy;
        for (int c = 0; c < 3; ++c) {
            for (int y = r.y0; y < r.y1; ++y) {
                for (int x = r.x0; x < r.x1; ++x) img.at(c, y, x) = rgb[c];
            }
        }
    }

    // Camera color response: per-channel gains keyed by camera id, so
    // cross-camera matching cannot ride on raw color statistics.
    {
        Rng crng(mix64(0xca3e2aULL, static_cast<std::uint64_t>(record.camera_id)));
        for (int c = 0; c < 3; ++c) {
            const float gain = 0.75f + 0.5f * static_cast<float>(crng.uniform());
            float* plane = img.values.data() + static_cast<std::size_t>(c) * config.height * config.width;
            for (int i = 0; i < config.height * config.width; ++i) plane[i] *= gain;
        }
    }

    // Per-pixel noise, keyed by seed alone.
    if (config.noise > 0.0f) {
        Rng nrng(mix64(seed, kNoiseStream));
        for (float& v : img.values) {
            v += config.noise * (2.0f * static_cast<float>(nrng.uniform()) - 1.0f);
        }
    }

    // Global illumination scaling.
    const AttributeCategory* illum = schema.find("illumination");
    if (illum != nullptr && config.is_global("illumination")) {
        const float f = illumination_factor(*illum, record.values.at("illumination"));
        for (float& v : img.values) v *= f;
    }

    for (float& v : img.values) v = std::clamp(v, 0.0f, 1.0f);
    return img;
}

void save_image(const std::string& path, const ImageTensor& image,
                const std::map<std::string, std::string>& meta) {
    json header{{"shape", {image.channels, image.height, image.width}},
                {"dtype", "f32-le"}};
    for (const auto& [k, v] : meta) header[k] = v;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write image file: " + path);
    out << header.dump() << "\n";
    out.write(reinterpret_cast<const char*>(image.values.data()),
              static_cast<std::streamsize>(image.values.size() * sizeof(float)));
}

ImageTensor load_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image file: " + path);
    std::string header_line;
    if (!std::getline(in, header_line)) throw ParseError("image file has no header: " + path);
    json header;
    try {
        header = json::parse(header_line);
    } catch (const json::exception& e) {
        throw ParseError("image header: " + std::string(e.what()));
    }
    if (header.at("dtype").get<std::string>() != "f32-le") {
        throw ParseError("image file " + path + " has unsupported dtype");
    }
    const auto shape = header.at("shape").get<std::vector<int>>();
    if (shape.size() != 3) throw ParseError("image shape must have 3 dims");
    ImageTensor img;
    img.channels = shape[0];
    img.height = shape[1];
    img.width = shape[2];
    img.values.resize(static_cast<std::size_t>(shape[0]) * shape[1] * shape[2]);
    in.read(reinterpret_cast<char*>(img.values.data()),
            static_cast<std::streamsize>(img.values.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(img.values.size() * sizeof(float))) {
        throw ParseError("image file " + path + " is truncated");
    }
    return img;
}

SplitManifest make_split(const std::vector<AttributeRecord>& records,
                         const SplitConfig& config, std::uint64_t seed) {
    if (config.train_ratio < 0.0 || config.train_ratio > 1.0) {
        throw ConfigError("split.train_ratio must be in [0, 1]");
    }
    if (config.seeds_per_record < 1) throw ConfigError("split.seeds_per_record must be >= 1");

    std::map<std::int64_t, std::map<std::int64_t, std::vector<std::size_t>>> by_id_cam;
    for (std::size_t i = 0; i < records.size(); ++i) {
        by_id_cam[records[i].identity_id][records[i].camera_id].push_back(i);
    }
    std::vector<std::int64_t> ids;
    for (const auto& [id, cams] : by_id_cam) {
        (void)cams;
        ids.push_back(id);
    }
    Rng rng(seed);
    rng.shuffle(ids);
    const std::size_t n_train =
        static_cast<std::size_t>(config.train_ratio * static_cast<double>(ids.size()) + 0.5);
    if (n_train == ids.size()) throw Error("split: test side is empty (train_ratio too high)");
    if (n_train == 0) throw Error("split: train side is empty (train_ratio too low)");

    std::vector<std::int64_t> train_ids(ids.begin(), ids.begin() + static_cast<long>(n_train));
    std::vector<std::int64_t> test_ids(ids.begin() + static_cast<long>(n_train), ids.end());
    std::sort(train_ids.begin(), train_ids.end());
    std::sort(test_ids.begin(), test_ids.end());

    SplitManifest manifest;
    manifest.seed = seed;
    auto entries_of = [&](std::size_t record_index, std::vector<SplitEntry>& out) {
        for (int k = 0; k < config.seeds_per_record; ++k) {
            out.push_back({record_index, mix64(seed, record_index * 1024 + static_cast<std::uint64_t>(k))});
        }
    };

    for (std::int64_t id : train_ids) {
        for (const auto& [cam, recs] : by_id_cam[id]) {
            (void)cam;
            for (std::size_t r : recs) entries_of(r, manifest.train);
        }
    }

    for (std::int64_t id : test_ids) {
        const auto& cams = by_id_cam[id];
        if (cams.size() < 2) {
            throw Error("split: test identity " + std::to_string(id) +
                        " has a single camera and cannot be queried");
        }
        // Whole (identity, camera) groups go to one side: query cameras
        // first, the rest to the gallery.
        int q = 0;
        for (const auto& [cam, recs] : cams) {
            (void)cam;
            const bool to_query = q < config.query_cams_per_identity &&
                                  q + 1 < static_cast<int>(cams.size());
            for (std::size_t r : recs) {
                entries_of(r, to_query ? manifest.query : manifest.gallery);
            }
            ++q;
        }
    }
    return manifest;
}

namespace {

json entries_to_json(const std::vector<SplitEntry>& entries) {
    json arr = json::array();
    for (const auto& e : entries) {
        arr.push_back({{"record", e.record_index}, {"seed", e.seed}});
    }
    return arr;
}

std::vector<SplitEntry> entries_from_json(const json& arr) {
    std::vector<SplitEntry> out;
    for (const auto& e : arr) {
        out.push_back({e.at("record").get<std::size_t>(), e.at("seed").get<std::uint64_t>()});
    }
    return out;
}

}  // namespace

void save_split(const std::string& path, const SplitManifest& manifest) {
    json j{{"seed", manifest.seed},
           {"train", entries_to_json(manifest.train)},
           {"query", entries_to_json(manifest.query)},
           {"gallery", entries_to_json(manifest.gallery)}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write split manifest: " + path);
    out << j.dump(2) << "\n";
}

SplitManifest load_split(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open split manifest: " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError("split manifest: " + std::string(e.what()));
    }
    SplitManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.train = entries_from_json(j.at("train"));
    m.query = entries_from_json(j.at("query"));
    m.gallery = entries_from_json(j.at("gallery"));
    return m;
}

std::vector<AttributeRecord> sample_records(const AttributeSchema& schema,
                                            int identities, int cameras,
                                            const DomainSpec& domain,
                                            std::uint64_t seed,
                                            std::int64_t identity_base) {
    if (identities < 1 || cameras < 1) {
        throw ConfigError("sample_records: identities and cameras must be positive");
    }
    Rng rng(seed);

    auto sample_value = [&](const AttributeCategory& cat) -> const std::string& {
        const auto wit = domain.scene_weights.find(cat.name);
        if (wit == domain.scene_weights.end()) {
            return cat.values[rng.uniform_below(cat.values.size())];
        }
        const auto& w = wit->second;
        if (w.size() != cat.values.size()) {
            throw ConfigError("domain " + domain.name + ": weight vector for " + cat.name +
                              " does not match the schema value count");
        }
        double total = 0.0;
        for (double x : w) total += x;
        double u = rng.uniform() * total;
        for (std::size_t i = 0; i < w.size(); ++i) {
            u -= w[i];
            if (u < 0.0) return cat.values[i];
        }
        return cat.values.back();
    };

    // Distinct identity-level tuples so no two toy identities look alike.
    std::set<std::string> seen_tuples;
    std::vector<std::map<std::string, std::string>> id_tuples;
    for (int i = 0; i < identities; ++i) {
        for (int attempt = 0;; ++attempt) {
            if (attempt > 10000) {
                throw ConfigError("sample_records: cannot find enough distinct identity tuples");
            }
            std::map<std::string, std::string> tuple;
            std::string key;
            for (const auto& cat : schema.categories) {
                if (cat.level != AttributeLevel::identity) continue;
                const std::string& v = cat.values[rng.uniform_below(cat.values.size())];
                tuple[cat.name] = v;
                key += v;
                key += '\x1f';
            }
            if (seen_tuples.insert(key).second) {
                id_tuples.push_back(std::move(tuple));
                break;
            }
        }
    }

    std::vector<AttributeRecord> records;
    for (int i = 0; i < identities; ++i) {
        for (int cam = 0; cam < cameras; ++cam) {
            AttributeRecord rec;
            rec.identity_id = identity_base + i;
            rec.camera_id = cam;
            rec.values = id_tuples[static_cast<std::size_t>(i)];
            for (const auto& cat : schema.categories) {
                if (cat.level != AttributeLevel::scene) continue;
                rec.values[cat.name] = sample_value(cat);
            }
            records.push_back(std::move(rec));
        }
    }
    return records;
}

}  // namespace vtbr
