#include "vtbr/captiongen.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "vtbr/error.hpp"
#include "json.hpp"

namespace vtbr {

using nlohmann::json;

namespace {

std::string lowercase(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

void append_words(std::vector<std::string>& out, const std::string& phrase) {
    std::istringstream ss(phrase);
    std::string w;
    while (ss >> w) out.push_back(lowercase(w));
}

void append_words(std::vector<std::string>& out, const std::vector<std::string>& words) {
    for (const auto& w : words) append_words(out, w);
}

}  // namespace

std::string Caption::text() const {
    std::string out;
    for (std::size_t i = 1; i + 1 < tokens.size(); ++i) {
        if (i > 1) out += ' ';
        out += tokens[i];
    }
    return out;
}

void validate_template(const CaptionTemplate& tmpl, const AttributeSchema& schema) {
    std::set<std::string> used;
    bool any_attr = false;
    for (const auto& slot : tmpl.slots) {
        if (!slot.is_attribute()) continue;
        any_attr = true;
        if (schema.find(slot.category) == nullptr) {
            throw SchemaViolation("template references unknown category " + slot.category);
        }
        if (!used.insert(slot.category).second) {
            throw SchemaViolation("template references category " + slot.category + " twice");
        }
    }
    if (!any_attr) throw SchemaViolation("template has no attribute slot");
}

Caption generate_caption(const AttributeRecord& record, const CaptionTemplate& tmpl,
                         const FrequencyTable& freq, const RSConfig& rs) {
    if (rs.alpha < 0.0 || rs.alpha > 1.0) {
        throw ConfigError("rs.alpha must be in [0, 1]");
    }
    Caption caption;
    caption.source_identity = record.identity_id;
    caption.tokens.push_back(kSosToken);
    for (const auto& slot : tmpl.slots) {
        if (!slot.is_attribute()) {
            append_words(caption.tokens, slot.lead_words);
            continue;
        }
        const auto it = record.values.find(slot.category);
        if (it == record.values.end()) {
            throw SchemaViolation("template references category " + slot.category +
                                  " absent from record");
        }
        // The selection rule: keep the attribute iff P(value) <= alpha.
        if (freq.probability(slot.category, it->second) <= rs.alpha) {
            append_words(caption.tokens, slot.lead_words);
            append_words(caption.tokens, it->second);
            append_words(caption.tokens, slot.trail_words);
        }
    }
    caption.tokens.push_back(kEosToken);
    if (caption.tokens.size() < 3) {
        throw Error("caption has no interior tokens (all slots dropped and no fixed words)");
    }
    return caption;
}

std::vector<std::size_t> rs_select(const std::vector<AttributeRecord>& records,
                                   const std::vector<Caption>& captions) {
    if (records.size() != captions.size()) {
        throw Error("rs_select: records and captions have different lengths");
    }
    std::map<std::int64_t, std::set<std::string>> seen;
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (seen[records[i].identity_id].insert(captions[i].text()).second) {
            kept.push_back(i);
        }
    }
    return kept;
}

Vocabulary build_vocabulary(const std::vector<Caption>& captions, int min_freq) {
    if (captions.empty()) throw Error("build_vocabulary: empty caption set");
    std::map<std::string, std::int64_t> counts;
    for (const auto& cap : captions) {
        for (std::size_t i = 1; i + 1 < cap.tokens.size(); ++i) ++counts[cap.tokens[i]];
    }
    std::vector<std::pair<std::string, std::int64_t>> entries(counts.begin(), counts.end());
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocabulary vocab;
    vocab.id_to_token = {kSosToken, kEosToken, kPadToken, kUnkToken};
    for (const auto& [token, count] : entries) {
        if (count < min_freq) continue;
        vocab.id_to_token.push_back(token);
    }
    for (std::size_t i = 0; i < vocab.id_to_token.size(); ++i) {
        vocab.token_to_id[vocab.id_to_token[i]] = static_cast<int>(i);
    }
    return vocab;
}

int Vocabulary::id_of(const std::string& token) const {
    const auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnkId : it->second;
}

std::vector<int> encode_caption(const Caption& caption, const Vocabulary& vocab) {
    std::vector<int> ids;
    ids.reserve(caption.tokens.size());
    for (const auto& t : caption.tokens) ids.push_back(vocab.id_of(t));
    return ids;
}

std::vector<std::string> decode_tokens(const std::vector<int>& ids,
                                       const Vocabulary& vocab) {
    std::vector<std::string> tokens;
    tokens.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab.id_to_token.size()) {
            throw Error("token id " + std::to_string(id) + " outside vocabulary");
        }
        tokens.push_back(vocab.id_to_token[static_cast<std::size_t>(id)]);
    }
    return tokens;
}

void save_corpus(const std::string& path,
                 const std::vector<AttributeRecord>& records,
                 const std::vector<Caption>& captions,
                 const std::vector<std::size_t>& kept) {
    if (records.size() != captions.size()) {
        throw Error("save_corpus: records and captions have different lengths");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write corpus file: " + path);
    for (std::size_t idx : kept) {
        json j{{"id", records[idx].identity_id},
               {"cam", records[idx].camera_id},
               {"caption", captions[idx].text()}};
        out << j.dump() << "\n";
    }
}

std::vector<CorpusEntry> load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open corpus file: " + path);
    std::vector<CorpusEntry> entries;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            CorpusEntry e;
            e.identity_id = j.at("id").get<std::int64_t>();
            e.camera_id = j.at("cam").get<std::int64_t>();
            e.caption = j.at("caption").get<std::string>();
            entries.push_back(std::move(e));
        } catch (const json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return entries;
}

Caption caption_from_text(const std::string& text, std::int64_t identity) {
    Caption cap;
    cap.source_identity = identity;
    cap.tokens.push_back(kSosToken);
    append_words(cap.tokens, text);
    cap.tokens.push_back(kEosToken);
    if (cap.tokens.size() < 3) throw Error("caption text has no tokens");
    return cap;
}

void save_vocabulary(const std::string& path, const Vocabulary& vocab) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write vocabulary file: " + path);
    out << json(vocab.id_to_token).dump(2) << "\n";
}

Vocabulary load_vocabulary(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocabulary file: " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(std::string("vocabulary file: ") + e.what());
    }
    Vocabulary vocab;
    for (const auto& t : j) vocab.id_to_token.push_back(t.get<std::string>());
    if (vocab.id_to_token.size() < 4 || vocab.id_to_token[0] != kSosToken ||
        vocab.id_to_token[1] != kEosToken || vocab.id_to_token[2] != kPadToken ||
        vocab.id_to_token[3] != kUnkToken) {
        throw ParseError("vocabulary file lacks the reserved token block");
    }
    for (std::size_t i = 0; i < vocab.id_to_token.size(); ++i) {
        vocab.token_to_id[vocab.id_to_token[i]] = static_cast<int>(i);
    }
    return vocab;
}

}  // namespace vtbr
