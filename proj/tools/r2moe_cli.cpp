// Command-line front end over the pipeline commands.
#include "r2moe/checkpoint.hpp"
#include "r2moe/config.hpp"
#include "r2moe/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kMissing = 3, kNumeric = 4 };

void print_sweep(const std::vector<r2moe::SweepRow>& rows)
{
    std::printf("%-9s %8s %8s %8s %10s %8s %8s\n", "variant", "IA", "F", "TA", "drift", "added", "region");
    for (const auto& r : rows)
        std::printf("%-9s %8.4f %8.4f %8.4f %10.3e %8ld %8.4f\n", r.variant.c_str(), r.mean_image_alignment,
                    r.forgetting, r.mean_text_alignment, r.routing_drift, r.added_params, r.region_alignment);
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Lifelong concept learning with mixture-of-experts cross-attention on a miniature diffusion model"};
    std::string config_path;
    std::optional<std::uint64_t> seed;
    bool fast = false;
    std::string out = "run";
    app.add_option("--config", config_path, "JSON run configuration (defaults are used when omitted)");
    app.add_option("--seed", seed, "override the configuration seed");
    app.add_flag("--fast", fast, "CI iteration budget per task");
    app.add_option("--out", out, "output directory")->capture_default_str();
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "render the synthetic concept datasets");
    auto* pre = app.add_subcommand("pretrain", "train the backbone on generic captions");
    auto* train = app.add_subcommand("train", "learn the concept sequence");
    auto* sample = app.add_subcommand("sample", "layout-guided multi-concept sampling");
    auto* eval = app.add_subcommand("eval", "alignment, forgetting, parameters and routing heatmap");
    auto* sweep = app.add_subcommand("sweep", "full method against the ablations");
    auto* all = app.add_subcommand("all", "pretrain, train, eval and sample in one go");
    auto* show = app.add_subcommand("show-config", "print the effective configuration");
    for (auto* sub : {gen, pre, train, sample, eval, sweep, all, show})
        sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        r2moe::RunConfig config = config_path.empty() ? r2moe::RunConfig{} : r2moe::load_config(config_path);
        if (seed)
            config.seed = *seed;
        if (fast)
            config.fast = true;
        config.validate();
        const r2moe::fs::path dir = out;
        const r2moe::RunPaths paths{dir};

        if (*show) {
            std::cout << r2moe::dump_config(config);
        } else if (*gen) {
            r2moe::cmd_gen_data(config, dir);
            std::cout << "wrote " << paths.data().string() << '\n';
        } else if (*pre || *all) {
            const auto r = r2moe::cmd_pretrain(config, dir);
            std::printf("pretrain: held-out loss %.5f -> %.5f\n", r.heldout_loss_before, r.heldout_loss_after);
        }
        if (*train || *all) {
            const auto r = r2moe::cmd_train(config, dir, paths.pretrain_checkpoint());
            std::printf("train: %zu tasks, F %.4f, mean IA %.4f, drift %.3e, added params %ld\n", r.reports.size(),
                        r.forgetting, r.mean_image_alignment, r.routing_drift, r.params.added());
        }
        if (*eval || *all) {
            const auto r = r2moe::cmd_eval(config, dir);
            std::printf("eval: F %.4f, mean IA %.4f, mean TA %.4f, added params %ld\n", r.forgetting,
                        r.mean_image_alignment, r.mean_text_alignment, r.params.added());
        }
        if (*sample || *all) {
            const auto r = r2moe::cmd_sample(config, dir);
            std::printf("sample: %zu prompts (%s), mean region alignment %.4f\n", r.prompts.size(),
                        r.guided ? "guided" : "plain", r.mean_region_alignment);
        }
        if (*sweep)
            print_sweep(r2moe::cmd_sweep(config, dir));
        return kOk;
    } catch (const r2moe::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const r2moe::MissingArtifact& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kMissing;
    } catch (const r2moe::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
}
