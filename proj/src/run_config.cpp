#include "vtbr/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "vtbr/checkpoint.hpp"
#include "vtbr/error.hpp"
#include "json.hpp"

namespace vtbr {

using nlohmann::json;

namespace {

std::vector<std::string> split_words(const std::string& phrase) {
    std::istringstream ss(phrase);
    std::vector<std::string> words;
    std::string w;
    while (ss >> w) words.push_back(w);
    return words;
}

AttributeSchema parse_schema(const json& j) {
    AttributeSchema schema;
    for (const auto& c : j.at("categories")) {
        AttributeCategory cat;
        cat.name = c.at("name").get<std::string>();
        const auto level = c.at("level").get<std::string>();
        if (level == "identity") {
            cat.level = AttributeLevel::identity;
        } else if (level == "scene") {
            cat.level = AttributeLevel::scene;
        } else {
            throw ConfigError("schema.categories." + cat.name + ".level: unknown level \"" +
                              level + "\"");
        }
        for (const auto& v : c.at("values")) cat.values.push_back(v.get<std::string>());
        schema.categories.push_back(std::move(cat));
    }
    return schema;
}

CaptionTemplate parse_template(const json& j) {
    CaptionTemplate tmpl;
    for (const auto& s : j) {
        TemplateSlot slot;
        if (s.contains("fixed")) {
            slot.lead_words = split_words(s.at("fixed").get<std::string>());
        } else if (s.contains("attr")) {
            slot.category = s.at("attr").get<std::string>();
            if (s.contains("lead")) slot.lead_words = split_words(s.at("lead").get<std::string>());
            if (s.contains("trail")) slot.trail_words = split_words(s.at("trail").get<std::string>());
        } else {
            throw ConfigError("templates: each slot needs \"fixed\" or \"attr\"");
        }
        tmpl.slots.push_back(std::move(slot));
    }
    return tmpl;
}

DomainSpec parse_domain(const json& j) {
    DomainSpec d;
    d.name = j.at("name").get<std::string>();
    if (j.contains("scene_weights")) {
        for (const auto& [cat, weights] : j.at("scene_weights").items()) {
            d.scene_weights[cat] = weights.get<std::vector<double>>();
        }
    }
    return d;
}

template <typename T>
T field(const json& j, const std::string& section, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(section + "." + key + ": wrong type");
    }
}

}  // namespace

void RunConfig::validate() const {
    if (rs.alpha < 0.0 || rs.alpha > 1.0) {
        throw ConfigError("rs.alpha: must be in [0, 1], got " + std::to_string(rs.alpha));
    }
    const auto violations = validate_schema(schema);
    if (!violations.empty()) throw ConfigError("schema: " + violations.front());
    if (templates.empty()) throw ConfigError("templates: need at least one template");
    for (const auto& t : templates) validate_template(t, schema);
    if (vocab_min_freq < 1) throw ConfigError("vocab.min_freq: must be >= 1");
    if (dataset.identities < 2) throw ConfigError("dataset.identities: must be >= 2");
    if (dataset.cameras < 2) throw ConfigError("dataset.cameras: must be >= 2");
    if (dataset.domains.empty()) throw ConfigError("dataset.domains: need at least one domain");
    if (dataset.split.train_ratio <= 0.0 || dataset.split.train_ratio >= 1.0) {
        throw ConfigError("dataset.train_ratio: must be in (0, 1)");
    }
    if (dataset.split.seeds_per_record < 1) {
        throw ConfigError("dataset.seeds_per_record: must be >= 1");
    }
    if (dataset.split.query_cams_per_identity < 1) {
        throw ConfigError("dataset.query_cams_per_identity: must be >= 1");
    }
    if (render.height < 8 || render.width < 8) {
        throw ConfigError("render.height/width: canvas too small");
    }
    pretrain.validate();
    finetune.validate();
    if (eval.cmc_ranks.empty()) throw ConfigError("eval.cmc_ranks: must be non-empty");
    for (int r : eval.cmc_ranks) {
        if (r < 1) throw ConfigError("eval.cmc_ranks: ranks must be >= 1");
    }
    // model dims are validated when the model is built (vocab comes later)
    if (model.image_height != render.height || model.image_width != render.width) {
        throw ConfigError("model: image dims must mirror render.height/width");
    }
}

RunConfig run_config_from_json_string(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("config: ") + e.what());
    }

    RunConfig cfg;
    cfg.config_hash = fnv1a64_hex(j.dump());
    cfg.seed = field<std::uint64_t>(j, "", "seed", 7);
    cfg.out_dir = field<std::string>(j, "", "out", "");

    if (!j.contains("schema")) throw ConfigError("schema: missing section");
    cfg.schema = parse_schema(j.at("schema"));

    if (!j.contains("templates")) throw ConfigError("templates: missing section");
    for (const auto& t : j.at("templates")) cfg.templates.push_back(parse_template(t));

    if (j.contains("rs")) cfg.rs.alpha = field<double>(j.at("rs"), "rs", "alpha", 0.8);
    if (j.contains("vocab")) {
        cfg.vocab_min_freq = field<int>(j.at("vocab"), "vocab", "min_freq", 1);
    }

    if (j.contains("render")) {
        const auto& r = j.at("render");
        cfg.render.height = field<int>(r, "render", "height", 64);
        cfg.render.width = field<int>(r, "render", "width", 32);
        cfg.render.jitter = field<int>(r, "render", "jitter", 2);
        cfg.render.noise = field<float>(r, "render", "noise", 0.04f);
        cfg.render.color_jitter = field<float>(r, "render", "color_jitter", 0.04f);
        cfg.render.base_gray = field<float>(r, "render", "base_gray", 0.12f);
        if (r.contains("global_categories")) {
            cfg.render.global_categories =
                r.at("global_categories").get<std::vector<std::string>>();
        }
    }

    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        cfg.dataset.identities = field<int>(d, "dataset", "identities", 64);
        cfg.dataset.cameras = field<int>(d, "dataset", "cameras", 4);
        cfg.dataset.split.train_ratio = field<double>(d, "dataset", "train_ratio", 0.5);
        cfg.dataset.split.seeds_per_record = field<int>(d, "dataset", "seeds_per_record", 8);
        cfg.dataset.split.query_cams_per_identity =
            field<int>(d, "dataset", "query_cams_per_identity", 1);
        if (d.contains("domains")) {
            for (const auto& dom : d.at("domains")) {
                cfg.dataset.domains.push_back(parse_domain(dom));
            }
        }
    }
    if (cfg.dataset.domains.empty()) cfg.dataset.domains.push_back({"default", {}});

    if (j.contains("model")) {
        const auto& m = j.at("model");
        if (m.contains("stage_channels")) {
            cfg.model.stage_channels = m.at("stage_channels").get<std::vector<int>>();
        }
        cfg.model.blocks_per_stage = field<int>(m, "model", "blocks_per_stage", 1);
        cfg.model.hidden = field<int>(m, "model", "hidden", 32);
        cfg.model.layers = field<int>(m, "model", "layers", 2);
        cfg.model.heads = field<int>(m, "model", "heads", 4);
        cfg.model.max_caption_len = field<int>(m, "model", "max_caption_len", 32);
    }
    cfg.model.image_height = cfg.render.height;
    cfg.model.image_width = cfg.render.width;

    if (j.contains("pretrain")) {
        const auto& p = j.at("pretrain");
        cfg.pretrain.max_lr_visual = field<double>(p, "pretrain", "max_lr_visual", 0.025);
        cfg.pretrain.max_lr_textual = field<double>(p, "pretrain", "max_lr_textual", 1.25e-4);
        cfg.pretrain.momentum = field<double>(p, "pretrain", "momentum", 0.9);
        cfg.pretrain.weight_decay = field<double>(p, "pretrain", "weight_decay", 1e-4);
        cfg.pretrain.lookahead_alpha = field<double>(p, "pretrain", "lookahead_alpha", 0.5);
        cfg.pretrain.lookahead_k = field<int>(p, "pretrain", "lookahead_k", 5);
        cfg.pretrain.warmup_steps = field<int>(p, "pretrain", "warmup_steps", 0);
        cfg.pretrain.total_steps = field<int>(p, "pretrain", "total_steps", 0);
        cfg.pretrain.batch_size = field<int>(p, "pretrain", "batch_size", 32);
        cfg.pretrain.holdout = field<int>(p, "pretrain", "holdout", 0);
        cfg.pretrain.clip_norm = field<double>(p, "pretrain", "clip_norm", 10.0);
        cfg.pretrain.clip_enabled = field<bool>(p, "pretrain", "clip_enabled", false);
        cfg.pretrain.seed = field<std::uint64_t>(p, "pretrain", "seed", cfg.seed);
    } else {
        cfg.pretrain.seed = cfg.seed;
    }

    if (j.contains("finetune")) {
        const auto& f = j.at("finetune");
        cfg.finetune.p = field<int>(f, "finetune", "p", 16);
        cfg.finetune.k = field<int>(f, "finetune", "k", 4);
        cfg.finetune.margin = field<double>(f, "finetune", "margin", 0.5);
        cfg.finetune.steps = field<int>(f, "finetune", "steps", 0);
        cfg.finetune.lr = field<double>(f, "finetune", "lr", 3.5e-4);
        cfg.finetune.beta1 = field<double>(f, "finetune", "beta1", 0.9);
        cfg.finetune.beta2 = field<double>(f, "finetune", "beta2", 0.999);
        cfg.finetune.eps = field<double>(f, "finetune", "eps", 1e-8);
        cfg.finetune.weight_decay = field<double>(f, "finetune", "weight_decay", 0.0);
        cfg.finetune.warmup_frac = field<double>(f, "finetune", "warmup_frac", 0.1);
        cfg.finetune.batch_hard = field<bool>(f, "finetune", "batch_hard", true);
        cfg.finetune.seed = field<std::uint64_t>(f, "finetune", "seed", cfg.seed);
    } else {
        cfg.finetune.seed = cfg.seed;
    }

    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        if (e.contains("cmc_ranks")) cfg.eval.cmc_ranks = e.at("cmc_ranks").get<std::vector<int>>();
        cfg.eval.saliency_images = field<int>(e, "eval", "saliency_images", 10);
    }

    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    RunConfig cfg = run_config_from_json_string(buf.str());

    if (const char* env_seed = std::getenv("VTBR_SEED")) {
        cfg.seed = std::strtoull(env_seed, nullptr, 10);
        cfg.pretrain.seed = cfg.seed;
        cfg.finetune.seed = cfg.seed;
    }
    if (const char* env_out = std::getenv("VTBR_OUT")) cfg.out_dir = env_out;
    return cfg;
}

}  // namespace vtbr
