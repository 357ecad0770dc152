#pragma once

#include "r2moe/analysis.hpp"
#include "r2moe/config.hpp"
#include "r2moe/lifelong_trainer.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace r2moe {

namespace fs = std::filesystem;

/// A prerequisite file of a command is absent.
struct MissingArtifact : std::runtime_error {
    explicit MissingArtifact(const fs::path& p, const std::string& hint)
        : std::runtime_error("missing artifact " + p.string() + " (" + hint + ")"), path(p)
    {
    }
    fs::path path;
};

/// Where each command reads and writes inside an output directory.
struct RunPaths {
    fs::path root;

    fs::path data() const { return root / "data"; }
    fs::path pretrain_checkpoint() const { return root / "pretrain.ckpt.json"; }
    fs::path pretrain_report() const { return root / "pretrain.json"; }
    fs::path task_checkpoint(int task) const;
    fs::path final_checkpoint() const { return root / "final.ckpt.json"; }
    fs::path train_report() const { return root / "train_report.csv"; }
    fs::path records() const { return root / "records.jsonl"; }
    fs::path prune_ledger() const { return root / "prune_ledger.csv"; }
    fs::path train_summary() const { return root / "train_summary.json"; }
    fs::path eval_table() const { return root / "eval.csv"; }
    fs::path heatmap() const { return root / "heatmap.csv"; }
    fs::path params() const { return root / "params.csv"; }
    fs::path eval_summary() const { return root / "eval_summary.json"; }
    fs::path samples() const { return root / "samples"; }
    fs::path sweep() const { return root / "sweep"; }
};

struct TrainOutcome {
    std::vector<TaskReport> reports;
    std::vector<MetricRecord> records;  // each concept after its own task, then every concept after the last
    double forgetting = 0.0;
    double mean_image_alignment = 0.0;  // after the last task
    double mean_text_alignment = 0.0;
    double routing_drift = 0.0;         // max |g_N(C_tau) - g_tau(C_tau)|
    ParamBreakdown params;
};

struct EvalOutcome {
    std::vector<MetricRecord> final_records;
    double forgetting = 0.0;
    double mean_image_alignment = 0.0;
    double mean_text_alignment = 0.0;
    double routing_drift = 0.0;
    ParamBreakdown params;
    Mat heatmap;
};

struct SampleOutcome {
    std::vector<std::string> prompts;
    std::vector<double> region_alignment;  // per region, palette alignment of its box crop
    double mean_region_alignment = 0.0;
    bool guided = true;
};

struct SweepRow {
    std::string variant;
    double mean_image_alignment = 0.0;
    double forgetting = 0.0;
    double mean_text_alignment = 0.0;
    double routing_drift = 0.0;
    long added_params = 0;
    double region_alignment = 0.0;
};

/// Renders the concept datasets as PPM files plus concepts.csv.
void cmd_gen_data(const RunConfig& config, const fs::path& out);
/// Fresh backbone trained on generic captions; writes pretrain.ckpt.json.
PretrainReport cmd_pretrain(const RunConfig& config, const fs::path& out);
/// Runs the task sequence from a pretrained checkpoint; checkpoints after every task and writes the reports.
TrainOutcome cmd_train(const RunConfig& config, const fs::path& out, const fs::path& pretrain_checkpoint);
/// Re-evaluates the final checkpoint against the per-task records written by cmd_train.
EvalOutcome cmd_eval(const RunConfig& config, const fs::path& out);
/// Layout-guided (or, with disable_hlag, plain) sampling of multi-concept prompts from the final checkpoint.
SampleOutcome cmd_sample(const RunConfig& config, const fs::path& out);
/// Full method plus the four single-flag ablations, trained from out/pretrain.ckpt.json; writes sweep.csv.
std::vector<SweepRow> cmd_sweep(const RunConfig& config, const fs::path& out);

/// Default layout prompts: learned concepts two by two, side by side on a plain background.
std::vector<std::string> default_layout_prompts(const std::vector<ConceptDataset>& concepts, int learned);

std::vector<ConceptDataset> config_concepts(const RunConfig& config);

}  // namespace r2moe
