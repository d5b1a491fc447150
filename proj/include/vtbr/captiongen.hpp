#pragma once

// Attribute records -> captions. Templates interleave fixed phrases with
// attribute slots; a slot survives only when its value's appearance
// probability is at or below the selection threshold alpha. Also owns the
// duplicate-caption reduction and the token vocabulary.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vtbr/attribute_store.hpp"

namespace vtbr {

inline constexpr int kSosId = 0;
inline constexpr int kEosId = 1;
inline constexpr int kPadId = 2;
inline constexpr int kUnkId = 3;
inline constexpr const char* kSosToken = "<sos>";
inline constexpr const char* kEosToken = "<eos>";
inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kUnkToken = "<unk>";

struct TemplateSlot {
    // Fixed phrase when category is empty; attribute slot otherwise. For an
    // attribute slot, lead_words come before the value tokens and
    // trail_words after; all three drop together when the value is too
    // common.
    std::string category;
    std::vector<std::string> lead_words;
    std::vector<std::string> trail_words;

    bool is_attribute() const { return !category.empty(); }
};

struct CaptionTemplate {
    std::vector<TemplateSlot> slots;
};

// Throws SchemaViolation when the template references unknown categories,
// references one twice, or has no attribute slot.
void validate_template(const CaptionTemplate& tmpl, const AttributeSchema& schema);

struct RSConfig {
    double alpha = 0.8;
};

struct Caption {
    // tokens[0] == <sos>, tokens.back() == <eos>; interior tokens lowercase
    // and whitespace-free.
    std::vector<std::string> tokens;
    std::int64_t source_identity = 0;

    std::size_t interior_length() const { return tokens.size() - 2; }
    // Space-joined interior tokens (the corpus file form).
    std::string text() const;
};

struct Vocabulary {
    std::map<std::string, int> token_to_id;
    std::vector<std::string> id_to_token;

    int id_of(const std::string& token) const;  // kUnkId when absent
    std::size_t size() const { return id_to_token.size(); }
};

Caption generate_caption(const AttributeRecord& record, const CaptionTemplate& tmpl,
                         const FrequencyTable& freq, const RSConfig& rs);

// Keeps, per identity, the first record of each distinct caption string.
// Returns indices into the input, in input order.
std::vector<std::size_t> rs_select(const std::vector<AttributeRecord>& records,
                                   const std::vector<Caption>& captions);

// Tokens with corpus frequency >= min_freq, ordered by frequency desc then
// lexicographic, after the four reserved ids.
Vocabulary build_vocabulary(const std::vector<Caption>& captions, int min_freq);

std::vector<int> encode_caption(const Caption& caption, const Vocabulary& vocab);
std::vector<std::string> decode_tokens(const std::vector<int>& ids,
                                       const Vocabulary& vocab);

// Corpus file: JSON Lines {"id", "cam", "caption"}; vocabulary file: JSON
// array ordered by id.
void save_corpus(const std::string& path,
                 const std::vector<AttributeRecord>& records,
                 const std::vector<Caption>& captions,
                 const std::vector<std::size_t>& kept);
void save_vocabulary(const std::string& path, const Vocabulary& vocab);
Vocabulary load_vocabulary(const std::string& path);

struct CorpusEntry {
    std::int64_t identity_id = 0;
    std::int64_t camera_id = 0;
    std::string caption;  // interior tokens, space-joined
};
std::vector<CorpusEntry> load_corpus(const std::string& path);

// Rebuilds a Caption (with boundary markers) from a corpus entry line.
Caption caption_from_text(const std::string& text, std::int64_t identity);

}  // namespace vtbr
