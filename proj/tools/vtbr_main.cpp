// vtbr command-line entry point. Subcommands map one-to-one onto the
// pipeline stages; `pipeline` chains them into a self-contained run
// directory.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "vtbr/error.hpp"
#include "vtbr/kernels.hpp"
#include "vtbr/pipeline.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
};

vtbr::RunConfig resolve_config(const CommonArgs& args) {
    vtbr::RunConfig cfg = vtbr::load_run_config(args.config_path);
    if (args.seed) {
        cfg.seed = *args.seed;
        cfg.pretrain.seed = *args.seed;
        cfg.finetune.seed = *args.seed;
    }
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
    auto* opt = cmd->add_option("--config", args.config_path, "run configuration (JSON)");
    if (config_required) opt->required();
    cmd->add_option("--out", args.out_dir, "run directory (overrides config/VTBR_OUT)");
    cmd->add_option("--seed", args.seed, "global seed (overrides config/VTBR_SEED)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vtbr: caption-pretrained person retrieval, desk scale"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string init = "vtbr";
    std::string model_path;
    std::string data_manifest;
    std::string cross_manifest;
    std::string saliency_ids;
    int saliency_count = -1;

    auto* cmd_synth = app.add_subcommand("synth-data", "sample records, render images, build splits");
    add_common(cmd_synth, args);

    auto* cmd_captions = app.add_subcommand("gen-captions", "generate the caption corpus and vocabulary");
    add_common(cmd_captions, args);

    auto* cmd_pretrain = app.add_subcommand("pretrain", "train the captioning model from scratch");
    add_common(cmd_pretrain, args);

    auto* cmd_finetune = app.add_subcommand("finetune", "train the retrieval model");
    add_common(cmd_finetune, args);
    cmd_finetune->add_option("--init", init, "vtbr | random | <checkpoint path>");

    auto* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    add_common(cmd_eval, args);
    cmd_eval->add_option("--model", model_path, "checkpoint to evaluate")->required();
    cmd_eval->add_option("--data", data_manifest, "dataset manifest (defaults to the training domain)");
    cmd_eval->add_option("--cross-domain", cross_manifest, "second dataset manifest for direct transfer");
    cmd_eval->add_option("--saliency", saliency_ids, "comma-separated train-entry count prefix to export maps for");

    auto* cmd_saliency = app.add_subcommand("saliency", "export attention heat maps");
    add_common(cmd_saliency, args);
    cmd_saliency->add_option("--model", model_path, "captioning checkpoint")->required();
    cmd_saliency->add_option("--count", saliency_count, "number of maps (default eval.saliency_images)");

    auto* cmd_pipeline = app.add_subcommand("pipeline", "run every stage in order");
    add_common(cmd_pipeline, args);
    cmd_pipeline->add_option("--init", init, "fine-tune initialization: vtbr | random | <path>");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    std::string stage = "setup";
    try {
        const vtbr::RunConfig cfg = resolve_config(args);
        const vtbr::RunPaths paths = vtbr::RunPaths::create(cfg.out_dir);

        if (cmd_synth->parsed()) {
            stage = "synth-data";
            vtbr::stage_synth_data(cfg, paths);
        } else if (cmd_captions->parsed()) {
            stage = "gen-captions";
            vtbr::stage_gen_captions(cfg, paths);
        } else if (cmd_pretrain->parsed()) {
            stage = "pretrain";
            const auto art = vtbr::stage_pretrain(cfg, paths);
            std::cout << "pretrain: checkpoint " << art.checkpoint_path
                      << " holdout_ppl " << art.holdout_ppl << "\n";
        } else if (cmd_finetune->parsed()) {
            stage = "finetune";
            const std::string tag = init == "vtbr" ? "vtbr" : (init == "random" ? "random" : "ext");
            const auto path = vtbr::stage_finetune(cfg, paths, init, cfg.finetune.seed, tag);
            std::cout << "finetune: checkpoint " << path << "\n";
        } else if (cmd_eval->parsed()) {
            stage = "eval";
            const std::string data =
                data_manifest.empty()
                    ? vtbr::domain_dir(paths, cfg.dataset.domains.front().name) + "/dataset.json"
                    : data_manifest;
            std::optional<std::string> cross;
            if (!cross_manifest.empty()) cross = cross_manifest;
            const auto report = vtbr::stage_eval(cfg, paths, model_path, data, cross, "cli");
            std::cout << "eval: mAP " << report.mAP;
            for (std::size_t i = 0; i < report.cmc_ranks.size(); ++i) {
                std::cout << " rank" << report.cmc_ranks[i] << " " << report.cmc[i];
            }
            std::cout << "\n";
            if (!saliency_ids.empty()) {
                vtbr::stage_saliency(cfg, paths, model_path, std::atoi(saliency_ids.c_str()));
            }
        } else if (cmd_saliency->parsed()) {
            stage = "saliency";
            const int n = saliency_count > 0 ? saliency_count : cfg.eval.saliency_images;
            vtbr::stage_saliency(cfg, paths, model_path, n);
        } else if (cmd_pipeline->parsed()) {
            stage = "pipeline";
            vtbr::run_pipeline(cfg, paths);
            std::cout << "pipeline: complete in " << paths.root
                      << " (kernels: " << vtbr::kernels::backend_name() << ")\n";
        }
    } catch (const vtbr::Error& e) {
        std::cerr << "error in stage " << stage << ": " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "unexpected failure in stage " << stage << ": " << e.what() << "\n";
        return 1;
    }
    return 0;
}
