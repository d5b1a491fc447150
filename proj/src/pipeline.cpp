#include "vtbr/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "vtbr/checkpoint.hpp"
#include "vtbr/error.hpp"
#include "json.hpp"

namespace vtbr {

namespace fs = std::filesystem;
using nlohmann::json;

RunPaths RunPaths::create(const std::string& out_dir) {
    if (out_dir.empty()) throw ConfigError("output directory is not set (--out or VTBR_OUT)");
    RunPaths p;
    p.root = out_dir;
    p.captions = out_dir + "/captions";
    p.images = out_dir + "/images";
    p.ckpt = out_dir + "/ckpt";
    p.reports = out_dir + "/reports";
    p.logs = out_dir + "/logs";
    for (const auto& dir : {p.root, p.captions, p.images, p.ckpt, p.reports, p.logs}) {
        fs::create_directories(dir);
    }
    return p;
}

std::string domain_dir(const RunPaths& paths, const std::string& domain) {
    return paths.images + "/" + domain;
}

namespace {

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

const DomainSpec& training_domain(const RunConfig& cfg) { return cfg.dataset.domains.front(); }

json render_to_json(const RenderConfig& r) {
    return json{{"height", r.height},
                {"width", r.width},
                {"jitter", r.jitter},
                {"noise", r.noise},
                {"color_jitter", r.color_jitter},
                {"base_gray", r.base_gray},
                {"global_categories", r.global_categories}};
}

RenderConfig render_from_json(const json& j) {
    RenderConfig r;
    r.height = j.at("height").get<int>();
    r.width = j.at("width").get<int>();
    r.jitter = j.at("jitter").get<int>();
    r.noise = j.at("noise").get<float>();
    r.color_jitter = j.at("color_jitter").get<float>();
    r.base_gray = j.at("base_gray").get<float>();
    r.global_categories = j.at("global_categories").get<std::vector<std::string>>();
    return r;
}

std::uint64_t domain_records_seed(const RunConfig& cfg, std::size_t domain_idx) {
    return mix64(cfg.seed, 0xd000 + domain_idx);
}

std::uint64_t domain_split_seed(const RunConfig& cfg, std::size_t domain_idx) {
    return mix64(cfg.seed, 0x5000 + domain_idx);
}

}  // namespace

std::string image_file_path(const std::string& domain_dir, std::size_t record_index,
                            std::uint64_t seed) {
    return domain_dir + "/img_r" + std::to_string(record_index) + "_s" + hex64(seed) + ".bin";
}

DomainData load_domain(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open dataset manifest: " + manifest_path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError("dataset manifest: " + std::string(e.what()));
    }
    const fs::path base = fs::path(manifest_path).parent_path();
    auto resolve = [&](const std::string& p) { return (base / p).string(); };

    DomainData d;
    d.name = j.at("domain").get<std::string>();
    d.schema = load_schema(resolve(j.at("schema").get<std::string>()));
    d.records = load_annotations(resolve(j.at("annotations").get<std::string>()), d.schema);
    d.split = load_split(resolve(j.at("split").get<std::string>()));
    d.render = render_from_json(j.at("render"));
    d.images_dir = base.string();
    return d;
}

void stage_synth_data(const RunConfig& cfg, const RunPaths& paths) {
    for (std::size_t di = 0; di < cfg.dataset.domains.size(); ++di) {
        const auto& domain = cfg.dataset.domains[di];
        const std::string dir = domain_dir(paths, domain.name);
        fs::create_directories(dir);

        const auto records = sample_records(cfg.schema, cfg.dataset.identities,
                                            cfg.dataset.cameras, domain,
                                            domain_records_seed(cfg, di));
        save_schema(dir + "/schema.json", cfg.schema);
        save_annotations(dir + "/annotations.jsonl", records);

        const SplitManifest split =
            make_split(records, cfg.dataset.split, domain_split_seed(cfg, di));
        save_split(dir + "/split.json", split);

        auto render_entries = [&](const std::vector<SplitEntry>& entries) {
            for (const auto& e : entries) {
                const ImageTensor img =
                    render_image(records[e.record_index], cfg.schema, e.seed, cfg.render);
                save_image(image_file_path(dir, e.record_index, e.seed), img,
                           {{"config_hash", cfg.config_hash},
                            {"seed", std::to_string(e.seed)},
                            {"stage", "synth-data"}});
            }
        };
        render_entries(split.train);
        render_entries(split.query);
        render_entries(split.gallery);

        json manifest{{"domain", domain.name},
                      {"schema", "schema.json"},
                      {"annotations", "annotations.jsonl"},
                      {"split", "split.json"},
                      {"render", render_to_json(cfg.render)},
                      {"config_hash", cfg.config_hash},
                      {"seed", cfg.seed},
                      {"stage", "synth-data"}};
        std::ofstream out(dir + "/dataset.json", std::ios::binary);
        if (!out) throw IoError("cannot write dataset manifest in " + dir);
        out << manifest.dump(2) << "\n";
    }
}

namespace {

// Caption generation for a full record set: template rotates by identity.
std::vector<Caption> captions_for_records(const RunConfig& cfg,
                                          const std::vector<AttributeRecord>& records,
                                          const FrequencyTable& freq) {
    std::vector<Caption> captions;
    captions.reserve(records.size());
    for (const auto& rec : records) {
        const auto& tmpl = cfg.templates[static_cast<std::size_t>(rec.identity_id) %
                                         cfg.templates.size()];
        captions.push_back(generate_caption(rec, tmpl, freq, cfg.rs));
    }
    return captions;
}

}  // namespace

std::vector<int> caption_ids_for_record(const RunConfig& cfg, const DomainData& domain,
                                        const FrequencyTable& freq, const Vocabulary& vocab,
                                        std::size_t record_index) {
    const auto& rec = domain.records.at(record_index);
    const auto& tmpl =
        cfg.templates[static_cast<std::size_t>(rec.identity_id) % cfg.templates.size()];
    const Caption cap = generate_caption(rec, tmpl, freq, cfg.rs);
    return encode_caption(cap, vocab);
}

void stage_gen_captions(const RunConfig& cfg, const RunPaths& paths) {
    const DomainData domain =
        load_domain(domain_dir(paths, training_domain(cfg).name) + "/dataset.json");
    const FrequencyTable freq = attribute_frequencies(domain.records, cfg.schema);
    const auto captions = captions_for_records(cfg, domain.records, freq);
    const auto kept = rs_select(domain.records, captions);

    std::vector<Caption> kept_captions;
    kept_captions.reserve(kept.size());
    for (std::size_t idx : kept) kept_captions.push_back(captions[idx]);
    const Vocabulary vocab = build_vocabulary(kept_captions, cfg.vocab_min_freq);

    save_corpus(paths.captions + "/corpus.jsonl", domain.records, captions, kept);
    save_vocabulary(paths.captions + "/vocab.json", vocab);

    json meta{{"config_hash", cfg.config_hash},
              {"seed", cfg.seed},
              {"stage", "gen-captions"},
              {"records", domain.records.size()},
              {"kept", kept.size()},
              {"vocab_size", vocab.size()},
              {"alpha", cfg.rs.alpha}};
    std::ofstream out(paths.captions + "/meta.json", std::ios::binary);
    out << meta.dump(2) << "\n";
}

namespace {

ImageTensor image_for_entry(const DomainData& domain, const SplitEntry& e,
                            bool load_from_disk) {
    if (load_from_disk) {
        return load_image(image_file_path(domain.images_dir, e.record_index, e.seed));
    }
    return render_image(domain.records[e.record_index], domain.schema, e.seed, domain.render);
}

}  // namespace

std::pair<std::vector<CaptionSample>, std::vector<CaptionSample>> build_caption_samples(
    const RunConfig& cfg, const DomainData& domain, const Vocabulary& vocab,
    const std::vector<CorpusEntry>& corpus, bool load_from_disk) {
    // Corpus rows mark the RS-kept (identity, camera) observations.
    std::map<std::pair<std::int64_t, std::int64_t>, std::vector<int>> kept_ids;
    for (const auto& row : corpus) {
        kept_ids[{row.identity_id, row.camera_id}] =
            encode_caption(caption_from_text(row.caption, row.identity_id), vocab);
    }

    std::vector<CaptionSample> samples;
    for (const auto& e : domain.split.train) {
        const auto& rec = domain.records[e.record_index];
        const auto it = kept_ids.find({rec.identity_id, rec.camera_id});
        if (it == kept_ids.end()) continue;  // dropped by the selection pass
        CaptionSample s;
        s.image = image_for_entry(domain, e, load_from_disk);
        s.token_ids = it->second;
        samples.push_back(std::move(s));
    }
    if (samples.empty()) throw Error("pretrain: no training samples (check the corpus)");

    const int holdout = std::min<int>(cfg.pretrain.holdout, static_cast<int>(samples.size()) / 4);
    std::vector<CaptionSample> held;
    if (holdout > 0) {
        held.assign(samples.end() - holdout, samples.end());
        samples.resize(samples.size() - static_cast<std::size_t>(holdout));
    }
    return {std::move(samples), std::move(held)};
}

PretrainArtifacts stage_pretrain(const RunConfig& cfg, const RunPaths& paths) {
    const DomainData domain =
        load_domain(domain_dir(paths, training_domain(cfg).name) + "/dataset.json");
    const Vocabulary vocab = load_vocabulary(paths.captions + "/vocab.json");
    const auto corpus = load_corpus(paths.captions + "/corpus.jsonl");

    auto [train, holdout] = build_caption_samples(cfg, domain, vocab, corpus, true);
    for (const auto& s : train) {
        if (static_cast<int>(s.token_ids.size()) > cfg.model.max_caption_len) {
            throw ConfigError("model.max_caption_len: a training caption has " +
                              std::to_string(s.token_ids.size()) + " tokens");
        }
    }

    ModelConfig mc = cfg.model;
    mc.vocab_size = static_cast<int>(vocab.size());
    Model<float> model(mc);
    Rng init_rng(mix64(cfg.seed, 0x1417ULL));
    model.init_weights(init_rng);

    std::ofstream log(paths.logs + "/pretrain.jsonl", std::ios::binary);
    PretrainMetricsSink sink = [&log](const PretrainStepMetrics& m) {
        json j{{"step", m.step},
               {"loss_fwd", m.loss_fwd},
               {"loss_bwd", m.loss_bwd},
               {"lr_visual", m.lr_visual},
               {"lr_textual", m.lr_textual}};
        if (m.ppl_holdout) j["ppl_holdout"] = *m.ppl_holdout;
        log << j.dump() << "\n";
    };

    PretrainArtifacts art;
    try {
        const PretrainResult res = run_pretraining(model, train, holdout, cfg.pretrain, sink);
        art.holdout_ppl = res.holdout_ppl;
    } catch (const DivergenceError&) {
        // keep the rolled-back weights on disk for inspection, then rethrow
        CheckpointMeta meta{"pretrain-aborted", 0, cfg.seed, cfg.config_hash, mc, 0};
        save_checkpoint(paths.ckpt + "/pretrain_last_good.ckpt", model.params(), meta);
        throw;
    }

    CheckpointMeta meta{"pretrain", cfg.pretrain.total_steps, cfg.seed, cfg.config_hash, mc, 0};
    art.checkpoint_path = paths.ckpt + "/pretrain.ckpt";
    art.vocab_size = static_cast<int>(vocab.size());
    save_checkpoint(art.checkpoint_path, model.params(), meta);
    return art;
}

std::pair<std::vector<ReidSample>, int> build_reid_samples(const DomainData& domain,
                                                           bool load_from_disk) {
    std::set<std::int64_t> ids;
    for (const auto& e : domain.split.train) {
        ids.insert(domain.records[e.record_index].identity_id);
    }
    std::map<std::int64_t, int> label_of;
    int next = 0;
    for (std::int64_t id : ids) label_of[id] = next++;

    std::vector<ReidSample> samples;
    samples.reserve(domain.split.train.size());
    for (const auto& e : domain.split.train) {
        ReidSample s;
        s.image = image_for_entry(domain, e, load_from_disk);
        s.label = label_of.at(domain.records[e.record_index].identity_id);
        samples.push_back(std::move(s));
    }
    return {std::move(samples), next};
}

std::string stage_finetune(const RunConfig& cfg, const RunPaths& paths,
                           const std::string& init, std::uint64_t seed,
                           const std::string& tag) {
    const DomainData domain =
        load_domain(domain_dir(paths, training_domain(cfg).name) + "/dataset.json");
    auto [samples, classes] = build_reid_samples(domain, true);

    ModelConfig mc = cfg.model;
    std::string init_path;
    if (init == "vtbr" || init == "vtbr-checkpoint") {
        init_path = paths.ckpt + "/pretrain.ckpt";
    } else if (init != "random") {
        init_path = init;  // external checkpoint
    }

    if (!init_path.empty()) {
        const LoadedCheckpoint loaded = load_checkpoint(init_path);
        mc = loaded.meta.model_config;
    } else if (mc.vocab_size == 0) {
        mc.vocab_size = 8;  // decoders unused when training from random init
    }

    Rng rng(mix64(seed, 0xf1feULL));
    ReIDModel reid = make_reid_model(mc, classes, rng);
    if (!init_path.empty()) {
        const LoadedCheckpoint loaded = load_checkpoint(init_path);
        copy_arrays(loaded.params, reid.model.params(), "visual.");
    }

    FinetuneConfig fc = cfg.finetune;
    fc.seed = seed;
    std::ofstream log(paths.logs + "/finetune_" + tag + ".jsonl", std::ios::binary);
    FinetuneMetricsSink sink = [&log](const FinetuneStepMetrics& m) {
        log << json{{"step", m.step},
                    {"loss_ce", m.loss_ce},
                    {"loss_triplet", m.loss_triplet},
                    {"lr", m.lr}}
                   .dump()
            << "\n";
    };
    run_finetune(reid, samples, fc, sink);

    CheckpointMeta meta{"finetune", fc.steps, seed, cfg.config_hash, mc, classes};
    const std::string out_path = paths.ckpt + "/finetune_" + tag + ".ckpt";
    save_checkpoint(out_path, reid.model.params(), meta);
    return out_path;
}

EvalReport evaluate_model(const Model<float>& model, const DomainData& domain,
                          const std::vector<int>& cmc_ranks, bool load_from_disk) {
    auto embed_entries = [&](const std::vector<SplitEntry>& entries,
                             std::vector<std::vector<float>>& embs,
                             std::vector<RetrievalMeta>& meta) {
        embs.reserve(entries.size());
        meta.reserve(entries.size());
        for (const auto& e : entries) {
            const ImageTensor img = image_for_entry(domain, e, load_from_disk);
            embs.push_back(model.embed_image(img));
            const auto& rec = domain.records[e.record_index];
            meta.push_back({rec.identity_id, rec.camera_id});
        }
    };
    std::vector<std::vector<float>> q_embs, g_embs;
    std::vector<RetrievalMeta> q_meta, g_meta;
    embed_entries(domain.split.query, q_embs, q_meta);
    embed_entries(domain.split.gallery, g_embs, g_meta);
    EvalReport report = evaluate_embeddings(q_embs, g_embs, q_meta, g_meta, cmc_ranks);
    report.test_domain = domain.name;
    return report;
}

EvalReport stage_eval(const RunConfig& cfg, const RunPaths& paths,
                      const std::string& model_path, const std::string& data_manifest,
                      const std::optional<std::string>& cross_domain_manifest,
                      const std::string& tag) {
    const LoadedCheckpoint loaded = load_checkpoint(model_path);
    Model<float> model(loaded.meta.model_config);
    copy_arrays(loaded.params, model.params(), "visual.");

    const DomainData domain = load_domain(data_manifest);
    EvalReport report = evaluate_model(model, domain, cfg.eval.cmc_ranks, true);
    report.train_domain = training_domain(cfg).name;
    report.init = tag;
    {
        std::ofstream out(paths.reports + "/eval_" + tag + ".json", std::ios::binary);
        if (!out) throw IoError("cannot write eval report");
        out << eval_report_to_json(report, cfg.seed, cfg.config_hash) << "\n";
    }

    if (cross_domain_manifest) {
        const DomainData other = load_domain(*cross_domain_manifest);
        EvalReport xreport = evaluate_model(model, other, cfg.eval.cmc_ranks, true);
        xreport.train_domain = training_domain(cfg).name;
        xreport.init = tag;
        std::ofstream out(paths.reports + "/eval_" + tag + "_xdomain.json", std::ios::binary);
        if (!out) throw IoError("cannot write cross-domain eval report");
        out << eval_report_to_json(xreport, cfg.seed, cfg.config_hash) << "\n";
    }
    return report;
}

void stage_saliency(const RunConfig& cfg, const RunPaths& paths,
                    const std::string& model_path, int count) {
    const LoadedCheckpoint loaded = load_checkpoint(model_path);
    Model<float> model(loaded.meta.model_config);
    copy_arrays(loaded.params, model.params(), "visual.");
    // saliency needs the caption head too
    for (const char* prefix : {"proj.", "embed.", "fwd.", "bwd."}) {
        copy_arrays(loaded.params, model.params(), prefix);
    }

    const DomainData domain =
        load_domain(domain_dir(paths, training_domain(cfg).name) + "/dataset.json");
    const Vocabulary vocab = load_vocabulary(paths.captions + "/vocab.json");
    const FrequencyTable freq = attribute_frequencies(domain.records, cfg.schema);

    fs::create_directories(paths.reports + "/saliency");
    json index = json::array();
    int made = 0;
    for (const auto& e : domain.split.train) {
        if (made >= count) break;
        const auto ids = caption_ids_for_record(cfg, domain, freq, vocab, e.record_index);
        const ImageTensor img = image_for_entry(domain, e, true);
        const SaliencyMap map = saliency_map(model, img, ids);
        const std::string base =
            paths.reports + "/saliency/train_" + std::to_string(made) + ".pgm";
        save_saliency(base, map);
        index.push_back({{"file", "train_" + std::to_string(made) + ".pgm"},
                         {"record", e.record_index},
                         {"seed", e.seed},
                         {"flat", map.flat}});
        ++made;
    }
    json meta{{"config_hash", cfg.config_hash},
              {"seed", cfg.seed},
              {"stage", "saliency"},
              {"maps", index}};
    std::ofstream out(paths.reports + "/saliency/manifest.json", std::ios::binary);
    out << meta.dump(2) << "\n";
}

int run_pipeline(const RunConfig& cfg, const RunPaths& paths) {
    stage_synth_data(cfg, paths);
    stage_gen_captions(cfg, paths);
    const PretrainArtifacts pre = stage_pretrain(cfg, paths);
    const std::string ft = stage_finetune(cfg, paths, "vtbr", cfg.finetune.seed, "vtbr");

    const std::string domain_a = domain_dir(paths, training_domain(cfg).name) + "/dataset.json";
    std::optional<std::string> domain_b;
    if (cfg.dataset.domains.size() > 1) {
        domain_b = domain_dir(paths, cfg.dataset.domains[1].name) + "/dataset.json";
    }
    stage_eval(cfg, paths, ft, domain_a, domain_b, "vtbr");
    stage_saliency(cfg, paths, pre.checkpoint_path, cfg.eval.saliency_images);
    return 0;
}

}  // namespace vtbr
