#pragma once

// Toy attribute-conditioned renders plus train/query/gallery splits. Every
// attribute value maps to a distinct visual code: glyph categories get a
// colored rectangle at a category-specific location (with seeded jitter);
// the configured global categories tint the whole canvas, which is what
// makes cross-camera matching non-trivial.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vtbr/attribute_store.hpp"

namespace vtbr {

struct ImageTensor {
    int height = 0;
    int width = 0;
    int channels = 3;
    std::vector<float> values;  // CHW, each in [0, 1]

    float& at(int c, int y, int x) {
        return values[static_cast<std::size_t>((c * height + y) * width + x)];
    }
    float at(int c, int y, int x) const {
        return values[static_cast<std::size_t>((c * height + y) * width + x)];
    }
    std::size_t size() const { return values.size(); }
};

struct Rect {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open

    bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
    int area() const { return (x1 - x0) * (y1 - y0); }
};

struct RenderConfig {
    int height = 64;
    int width = 32;
    int jitter = 2;             // max |glyph offset| in pixels
    float noise = 0.04f;        // uniform pixel noise amplitude
    float color_jitter = 0.04f; // per-render glyph color perturbation
    float base_gray = 0.12f;    // background fill when no global category drives it
    // Categories rendered as whole-canvas effects instead of glyphs.
    std::vector<std::string> global_categories = {"background", "illumination"};

    bool is_global(const std::string& category) const;
};

// Deterministic color code for a (category, value) pair; distinct values of
// one category get well-separated hues.
void value_color(const AttributeSchema& schema, const std::string& category,
                 const std::string& value, float rgb[3]);

// The jitter-inflated rect inside which this category's glyph always lands.
// Global categories cover the full canvas.
Rect category_region(const AttributeSchema& schema, const RenderConfig& config,
                     const std::string& category);

ImageTensor render_image(const AttributeRecord& record, const AttributeSchema& schema,
                         std::uint64_t seed, const RenderConfig& config);

// Flat binary image file: one-line JSON header {"shape":[c,h,w],
// "dtype":"f32-le", ...meta} + row-major little-endian payload.
void save_image(const std::string& path, const ImageTensor& image,
                const std::map<std::string, std::string>& meta = {});
ImageTensor load_image(const std::string& path);

struct SplitEntry {
    std::size_t record_index = 0;
    std::uint64_t seed = 0;
};

struct SplitManifest {
    std::vector<SplitEntry> train;
    std::vector<SplitEntry> query;
    std::vector<SplitEntry> gallery;
    std::uint64_t seed = 0;
};

struct SplitConfig {
    double train_ratio = 0.5;
    int seeds_per_record = 8;
    // Cameras per test identity whose records go to the query side; the
    // rest of that identity's cameras fill the gallery.
    int query_cams_per_identity = 1;
};

// Identity-disjoint train/test split. Each test identity contributes whole
// (identity, camera) groups to either query or gallery, never both, and
// keeps at least one gallery camera.
SplitManifest make_split(const std::vector<AttributeRecord>& records,
                         const SplitConfig& config, std::uint64_t seed);

void save_split(const std::string& path, const SplitManifest& manifest);
SplitManifest load_split(const std::string& path);

// Per-category value weights used when sampling toy scene attributes; keys
// are category names, vectors align with the schema's value lists.
struct DomainSpec {
    std::string name;
    std::map<std::string, std::vector<double>> scene_weights;
};

// Samples a toy record set: distinct identity-level tuples per identity,
// scene values drawn per (identity, camera) from the domain weights.
// Output is sorted by (identity, camera).
std::vector<AttributeRecord> sample_records(const AttributeSchema& schema,
                                            int identities, int cameras,
                                            const DomainSpec& domain,
                                            std::uint64_t seed,
                                            std::int64_t identity_base = 0);

}  // namespace vtbr
