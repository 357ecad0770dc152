#pragma once

#include "r2moe/eval_harness.hpp"
#include "r2moe/lifelong_trainer.hpp"

#include <string>
#include <vector>

namespace r2moe {

/// Itemized parameter counts of a state; parts sum to every stored parameter number.
ParamBreakdown param_breakdown(const LifelongState& state);

/// Slot of the expert owned by `task` in a layer, or -1 when it was pruned.
int expert_slot(const MoELayer& layer, int task);

/// layers x tasks: inference-mode alpha of each concept's own expert on its stored embedding (0 where pruned).
Mat coefficient_heatmap(const LifelongState& state);
std::string heatmap_csv(const Mat& heatmap);

struct EvalConfig {
    int samples = 4;
    SamplerOptions sampler{50, 3.0, 0.0, true};
    std::uint64_t seed = 17;
};

/// Samples a learned concept with seeds fixed per concept and scores it against its references.
MetricRecord evaluate_concept(const LifelongState& state, const ConceptDataset& dataset, const FeatureExtractor& fx,
                              const EvalConfig& config, int after_task, long logical_time,
                              const std::array<SelectionResult, kMoELayers>* replay = nullptr);

/// Concept images sampled by evaluate_concept (same seeds).
std::vector<Image> concept_samples(const LifelongState& state, int concept_index, const EvalConfig& config,
                                   const std::array<SelectionResult, kMoELayers>* replay = nullptr);

}  // namespace r2moe
