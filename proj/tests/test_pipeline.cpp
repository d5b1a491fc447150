#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "metric_oracle.hpp"
#include "vtbr/checkpoint.hpp"
#include "vtbr/error.hpp"
#include "vtbr/pipeline.hpp"

using namespace vtbr;
namespace fs = std::filesystem;

namespace {

std::string source_dir() {
    const char* root = std::getenv("VTBR_SOURCE_DIR");
    REQUIRE(root != nullptr);
    return root;
}

// The bundled toy config scaled down until a full pipeline takes seconds.
RunConfig mini_config() {
    std::ifstream in(source_dir() + "/configs/toy.json");
    REQUIRE(in.good());
    nlohmann::json j = nlohmann::json::parse(in);
    j["dataset"]["identities"] = 12;
    j["dataset"]["cameras"] = 3;
    j["dataset"]["seeds_per_record"] = 2;
    j["model"]["stage_channels"] = {8, 12};
    j["model"]["hidden"] = 16;
    j["model"]["layers"] = 1;
    j["model"]["heads"] = 2;
    j["pretrain"]["total_steps"] = 30;
    j["pretrain"]["warmup_steps"] = 5;
    j["pretrain"]["batch_size"] = 8;
    j["pretrain"]["holdout"] = 6;
    j["finetune"]["steps"] = 12;
    j["finetune"]["p"] = 4;
    j["finetune"]["k"] = 2;
    return run_config_from_json_string(j.dump());
}

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

struct TempDir {
    std::string path;
    explicit TempDir(const std::string& name) : path("/tmp/vtbr_run_" + name) {
        fs::remove_all(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("full pipeline produces a self-contained run directory") {
    TempDir dir("pipeline_smoke");
    RunConfig cfg = mini_config();
    cfg.out_dir = dir.path;
    const RunPaths paths = RunPaths::create(cfg.out_dir);
    CHECK(run_pipeline(cfg, paths) == 0);

    for (const char* rel :
         {"captions/corpus.jsonl", "captions/vocab.json", "images/a/dataset.json",
          "images/b/dataset.json", "ckpt/pretrain.ckpt", "ckpt/finetune_vtbr.ckpt",
          "reports/eval_vtbr.json", "reports/eval_vtbr_xdomain.json",
          "reports/saliency/manifest.json", "logs/pretrain.jsonl",
          "logs/finetune_vtbr.jsonl"}) {
        CAPTURE(rel);
        CHECK(fs::exists(dir.path + "/" + rel));
    }

    // eval report carries lineage and sane metrics
    const auto report = nlohmann::json::parse(file_bytes(dir.path + "/reports/eval_vtbr.json"));
    CHECK(report.at("map").get<double>() >= 0.0);
    CHECK(report.at("map").get<double>() <= 1.0);
    CHECK(report.at("config_hash").get<std::string>() == cfg.config_hash);
    CHECK(report.at("counts").at("queries").get<int>() > 0);

    // pretrain metrics log: one line per step with finite losses
    std::ifstream log(dir.path + "/logs/pretrain.jsonl");
    int lines = 0;
    std::string line;
    while (std::getline(log, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(std::isfinite(j.at("loss_fwd").get<double>()));
        ++lines;
    }
    CHECK(lines == cfg.pretrain.total_steps);
}

TEST_CASE("two pipeline runs with one seed are byte-identical") {
    TempDir d1("repro_1"), d2("repro_2");
    RunConfig cfg = mini_config();

    cfg.out_dir = d1.path;
    run_pipeline(cfg, RunPaths::create(cfg.out_dir));
    cfg.out_dir = d2.path;
    run_pipeline(cfg, RunPaths::create(cfg.out_dir));

    for (const char* rel :
         {"captions/corpus.jsonl", "captions/vocab.json", "ckpt/pretrain.ckpt",
          "ckpt/finetune_vtbr.ckpt", "reports/eval_vtbr.json",
          "reports/eval_vtbr_xdomain.json"}) {
        CAPTURE(rel);
        CHECK(file_bytes(d1.path + "/" + rel) == file_bytes(d2.path + "/" + rel));
    }
}

TEST_CASE("checkpoint transfer: finetune backbone starts at the pretrained weights") {
    TempDir dir("transfer");
    RunConfig cfg = mini_config();
    cfg.finetune.steps = 0;  // keep the loaded weights
    cfg.out_dir = dir.path;
    const RunPaths paths = RunPaths::create(cfg.out_dir);
    stage_synth_data(cfg, paths);
    stage_gen_captions(cfg, paths);
    stage_pretrain(cfg, paths);
    const auto ft_path = stage_finetune(cfg, paths, "vtbr", cfg.seed, "vtbr");

    const auto pre = load_checkpoint(dir.path + "/ckpt/pretrain.ckpt");
    const auto fin = load_checkpoint(ft_path);
    for (const auto& a : pre.params.arrays) {
        if (a.name.rfind("visual.", 0) != 0) continue;
        CHECK(fin.params.find(a.name)->w == a.w);
    }
    CHECK(fin.params.find("head.w") != nullptr);
    CHECK(fin.meta.num_classes == 6);  // half of 12 identities train
}

TEST_CASE("cross-domain eval on the same domain equals in-domain eval") {
    TempDir dir("xdomain_same");
    RunConfig cfg = mini_config();
    cfg.out_dir = dir.path;
    const RunPaths paths = RunPaths::create(cfg.out_dir);
    stage_synth_data(cfg, paths);
    stage_gen_captions(cfg, paths);
    stage_pretrain(cfg, paths);
    const auto ft = stage_finetune(cfg, paths, "vtbr", cfg.seed, "vtbr");

    const std::string manifest = domain_dir(paths, "a") + "/dataset.json";
    stage_eval(cfg, paths, ft, manifest, manifest, "same");
    CHECK(file_bytes(dir.path + "/reports/eval_same.json") ==
          file_bytes(dir.path + "/reports/eval_same_xdomain.json"));
}

TEST_CASE("random backbone scores near the analytic permutation baseline") {
    TempDir dir("randbase");
    RunConfig cfg = mini_config();
    cfg.out_dir = dir.path;
    const RunPaths paths = RunPaths::create(cfg.out_dir);
    stage_synth_data(cfg, paths);
    const DomainData domain = load_domain(domain_dir(paths, "a") + "/dataset.json");

    ModelConfig mc = cfg.model;
    mc.vocab_size = 8;
    Model<float> model(mc);
    Rng rng(20240);
    model.init_weights(rng);
    const EvalReport report = evaluate_model(model, domain, {1}, true);

    // analytic expectation of mAP under a uniformly random ranking
    std::map<std::int64_t, int> gallery_per_id;
    for (const auto& e : domain.split.gallery) {
        ++gallery_per_id[domain.records[e.record_index].identity_id];
    }
    const int gallery_total = static_cast<int>(domain.split.gallery.size());
    double baseline = 0.0;
    for (const auto& e : domain.split.query) {
        const auto id = domain.records[e.record_index].identity_id;
        baseline += vtbr_test::expected_ap_random(gallery_per_id.at(id), gallery_total);
    }
    baseline /= static_cast<double>(domain.split.query.size());

    CAPTURE(report.mAP);
    CAPTURE(baseline);
    CHECK(report.mAP >= baseline - 0.03);
    CHECK(report.mAP <= baseline + 0.03);
}
