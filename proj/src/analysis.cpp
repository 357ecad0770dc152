#include "r2moe/analysis.hpp"

#include <iomanip>
#include <sstream>

namespace r2moe {

ParamBreakdown param_breakdown(const LifelongState& state)
{
    ParamBreakdown b;
    b.base = state.model.theta_parameter_count() + static_cast<long>(state.table.base_rows().size());
    for (const auto& layer : state.model.layers()) {
        for (const auto* proj : {&layer.key, &layer.value})
            for (const auto& e : proj->experts) {
                if (e.owner_task == 0)
                    b.auxiliary += e.parameter_count();
                else if (e.retained)
                    b.experts += e.parameter_count();
            }
        b.gating += layer.gate.parameter_count();
    }
    for (const auto& row : state.table.concept_rows())
        b.tokens += static_cast<long>(row.size());
    for (const auto& rec : state.tasks) {
        std::array<int, 3> kept{};
        for (int l = 0; l < kMoELayers; ++l)
            kept[static_cast<std::size_t>(l)] = expert_slot(state.model.layer(l), rec.index) >= 0 ? 1 : 0;
        b.retained_per_task.push_back(kept);
    }
    return b;
}

int expert_slot(const MoELayer& layer, int task)
{
    for (std::size_t s = 0; s < layer.key.experts.size(); ++s)
        if (layer.key.experts[s].owner_task == task && layer.key.experts[s].retained)
            return static_cast<int>(s);
    return -1;
}

Mat coefficient_heatmap(const LifelongState& state)
{
    Mat h = Mat::Zero(kMoELayers, state.completed_tasks());
    for (const auto& rec : state.tasks) {
        const Mat& c = state.bank.at(rec.index);
        for (int l = 0; l < kMoELayers; ++l) {
            const auto& layer = state.model.layer(l);
            const int slot = expert_slot(layer, rec.index);
            if (slot < 0)
                continue;
            const auto sel = route(layer, c, std::nullopt, state.routing.k, SelectMode::kInfer, state.routing.dense);
            h(l, rec.index - 1) = sel.alpha_of(slot);
        }
    }
    return h;
}

std::string heatmap_csv(const Mat& heatmap)
{
    std::ostringstream out;
    out << "layer";
    for (Eigen::Index t = 0; t < heatmap.cols(); ++t)
        out << ",task_" << (t + 1);
    out << '\n';
    out << std::setprecision(6) << std::fixed;
    for (Eigen::Index l = 0; l < heatmap.rows(); ++l) {
        out << kLayerNames[static_cast<std::size_t>(l)];
        for (Eigen::Index t = 0; t < heatmap.cols(); ++t)
            out << ',' << heatmap(l, t);
        out << '\n';
    }
    return out.str();
}

std::vector<Image> concept_samples(const LifelongState& state, int concept_index, const EvalConfig& config,
                                   const std::array<SelectionResult, kMoELayers>* replay)
{
    const auto& ids = state.task(concept_index).prompt_ids;
    std::vector<Image> out;
    for (int i = 0; i < config.samples; ++i)
        out.push_back(sample_prompt(state, ids, config.sampler,
                                    derive_seed(config.seed, static_cast<std::uint64_t>(concept_index * 1000 + i)),
                                    replay));
    return out;
}

MetricRecord evaluate_concept(const LifelongState& state, const ConceptDataset& dataset, const FeatureExtractor& fx,
                              const EvalConfig& config, int after_task, long logical_time,
                              const std::array<SelectionResult, kMoELayers>* replay)
{
    const auto images = concept_samples(state, dataset.index, config, replay);
    MetricRecord r;
    r.concept_index = dataset.index;
    r.after_task = after_task;
    r.image_alignment = image_alignment(fx, images, dataset.images);
    double ta = 0.0;
    for (const auto& img : images)
        ta += palette_alignment(img, dataset.palette);
    r.text_alignment = ta / static_cast<double>(images.size());
    r.logical_time = logical_time;
    return r;
}

}  // namespace r2moe
