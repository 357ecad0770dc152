#pragma once

#include "r2moe/denoiser.hpp"
#include "r2moe/eval_harness.hpp"
#include "r2moe/moe_attention.hpp"
#include "r2moe/text_encoder.hpp"

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace r2moe {

struct ScheduleParams {
    int steps = 200;
    double beta_start = 5e-4;
    double beta_end = 0.1;
    bool operator==(const ScheduleParams&) const = default;
};

struct PretrainConfig {
    int iterations = 6000;
    int batch_size = 8;
    double lr = 2e-3;
    double null_prompt_prob = 0.1;
};

enum class Optimizer { kSgdMomentum, kAdam };

struct TrainConfig {
    double beta = 10.0;            // routing-distillation weight
    int k = 2;                     // selection size
    double prune_threshold = 0.15; // p
    int iterations = 800;
    double lr_experts = 0.003;
    double lr_gating = 0.03;
    double lr_token = 0.003;
    Optimizer optimizer = Optimizer::kAdam;
    double momentum = 0.9;         // SGD momentum, Adam first-moment decay
    double adam_beta2 = 0.999;
    double max_grad_norm = 1.0;    // global-norm clipping of each step's gradient; 0 disables
    int batch_size = 2;
    bool dense_routing = false;    // selective activation disabled
    double expert_init_scale = 0.01;
    double concept_init_noise = 0.01;

    void validate() const;
};

struct TaskSpec {
    int index = 0;  // 1-based
    std::string class_word;
    std::vector<Image> images;
    std::string prompt_template = "photo of a {token} {class}";

    std::string prompt() const;
    static TaskSpec from_concept(const ConceptDataset& c);
};

struct PruneRow {
    int task = 0;
    int layer = 0;
    double alpha = 0.0;  // training-mode coefficient of the task's own expert
    bool retained = true;
    long param_delta = 0;  // parameters added by this (task, layer) after the decision
};

/// What the lifelong state remembers about a finished task.
struct TaskRecord {
    int index = 0;
    std::string class_word;
    std::vector<int> prompt_ids;
    std::array<SelectionResult, kMoELayers> routing;  // inference routing right after completion
    std::array<RowVec, kMoELayers> scores;            // gating output on the concept right after completion
};

struct RoutingConfig {
    int k = 2;
    bool dense = false;
    bool operator==(const RoutingConfig&) const = default;
};

/// Everything a checkpoint holds.
struct LifelongState {
    ModelDims dims;
    ScheduleParams schedule_params;
    NoiseSchedule schedule;
    Vocabulary vocab{Vocabulary::default_base_words(), 16};
    TokenEmbeddingTable table;
    ConceptEmbeddingBank bank;
    Denoiser model;
    RoutingConfig routing;
    std::optional<std::array<GatingNetwork, kMoELayers>> previous_gates;
    std::vector<TaskRecord> tasks;
    std::vector<PruneRow> ledger;
    std::uint64_t backbone_hash = 0;

    int completed_tasks() const { return static_cast<int>(tasks.size()); }
    const TaskRecord& task(int index) const;

    Conditioning null_conditioning() const;
    /// Inference routing for a prompt embedding (base weights only when the prompt names no concept).
    std::optional<std::array<SelectionResult, kMoELayers>> infer_routing(const Mat& context,
                                                                          const std::vector<int>& ids) const;
    Conditioning conditioning(const std::vector<int>& ids) const;
    Conditioning conditioning(const std::vector<int>& ids, const std::array<SelectionResult, kMoELayers>& routing) const;
};

/// Fresh state: random backbone and token table (before pretraining).
LifelongState initial_state(const ModelDims& dims, const ScheduleParams& schedule, int concept_capacity,
                            std::uint64_t seed);

struct PretrainReport {
    double heldout_loss_before = 0.0;
    double heldout_loss_after = 0.0;
};

/// Trains theta on generic captioned shapes, then freezes it and attaches the auxiliary experts.
PretrainReport pretrain_backbone(LifelongState& state, const PretrainConfig& config, std::uint64_t seed);

/// Held-out denoising loss on generic captions (fixed examples drawn from seed).
double heldout_base_loss(const LifelongState& state, std::uint64_t seed, int examples = 32);

/// Sum over stored concepts and layers of |g_current(C) - g_previous(C)|^2 on the previous gate's columns.
double routing_distillation_loss(const std::array<GatingNetwork, kMoELayers>& current,
                                 const std::array<GatingNetwork, kMoELayers>& previous,
                                 const ConceptEmbeddingBank& bank, int before_task);

struct TaskReport {
    int task = 0;
    double gen_loss_first = 0.0;
    double gen_loss_last = 0.0;  // mean over the final 10% of steps
    double distill_first = 0.0;
    double distill_last = 0.0;
    double gating_drift = 0.0;   // max over old concepts/layers/columns of |g_n - g_{n-1}| after training
    std::array<double, kMoELayers> alpha{};
    std::array<bool, kMoELayers> retained{};
};

/// One fixed denoising example for deterministic loss evaluation.
struct TaskBatch {
    std::vector<DenoiseExample> examples;
};

/// Optimizes one task: experts of the task, the gating networks, and the concept token.
class TaskTrainer {
public:
    TaskTrainer(LifelongState& state, const TaskSpec& task, const TrainConfig& config, std::uint64_t seed);

    /// Draws a batch and applies one optimizer update. Returns (generation loss, distillation loss).
    std::pair<double, double> step();
    /// Freezes, snapshots, prunes. The trainer cannot step afterwards.
    TaskReport finish();

    TaskBatch draw_batch();
    /// Total objective at the current parameters; writes the packed gradient when grad != nullptr.
    double objective(const TaskBatch& batch, Vec* grad, double* gen_loss = nullptr,
                     double* distill_loss = nullptr) const;
    Vec pack() const;
    void unpack(const Vec& params);
    int slot(int layer) const { return slots_[static_cast<std::size_t>(layer)]; }
    const std::vector<int>& prompt_ids() const { return ids_; }

private:
    LifelongState& state_;
    TaskSpec task_;
    TrainConfig config_;
    Rng rng_;
    std::vector<Mat> latents_;
    std::vector<int> ids_;
    int token_id_ = 0;
    std::array<int, kMoELayers> slots_{};
    Vec velocity_;
    Vec second_moment_;
    Vec lr_;
    bool finished_ = false;
    int steps_ = 0;
    std::vector<double> gen_history_;
    std::vector<double> distill_history_;
};

TaskReport train_task(LifelongState& state, const TaskSpec& task, const TrainConfig& config, std::uint64_t seed);

/// Removes the task's expert in every layer where its training-mode coefficient on the concept falls below p.
std::vector<PruneRow> prune_task(LifelongState& state, int task, const TrainConfig& config);

using TaskCallback = std::function<void(const LifelongState&, const TaskReport&)>;

std::vector<TaskReport> run_sequence(LifelongState& state, const std::vector<TaskSpec>& tasks,
                                     const TrainConfig& config, std::uint64_t seed,
                                     const TaskCallback& after_task = {});

/// Samples a single-concept prompt with the state's current routing (or a replayed routing).
Image sample_prompt(const LifelongState& state, const std::vector<int>& ids, const SamplerOptions& options,
                    std::uint64_t seed, const std::array<SelectionResult, kMoELayers>* replay = nullptr);

/// max over tau < current, layers, columns of |g_now(C_tau) - g_tau(C_tau)|.
double routing_drift_since_learned(const LifelongState& state);

}  // namespace r2moe
