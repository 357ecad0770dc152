#include "r2moe/pipeline.hpp"

#include "r2moe/checkpoint.hpp"
#include "r2moe/guided_inference.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace r2moe {

namespace {

using nlohmann::json;

void write_text(const fs::path& path, const std::string& text)
{
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot write " + path.string());
    out << text;
}

std::string read_text(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void require_file(const fs::path& path, const std::string& hint)
{
    if (!fs::exists(path))
        throw MissingArtifact(path, hint);
}

std::string fmt(double v)
{
    std::ostringstream s;
    s << std::setprecision(6) << std::fixed << v;
    return s.str();
}

std::string padded(int v)
{
    char buf[16];
    std::snprintf(buf, sizeof buf, "%02d", v);
    return buf;
}

json record_json(const MetricRecord& r)
{
    return {{"concept", r.concept_index},
            {"after_task", r.after_task},
            {"image_alignment", r.image_alignment},
            {"text_alignment", r.text_alignment},
            {"logical_time", r.logical_time}};
}

MetricRecord json_record(const json& j)
{
    MetricRecord r;
    r.concept_index = j.at("concept").get<int>();
    r.after_task = j.at("after_task").get<int>();
    r.image_alignment = j.at("image_alignment").get<double>();
    r.text_alignment = j.at("text_alignment").get<double>();
    r.logical_time = j.at("logical_time").get<long>();
    return r;
}

json params_json(const ParamBreakdown& p)
{
    return {{"base", p.base},       {"auxiliary", p.auxiliary}, {"experts", p.experts}, {"gating", p.gating},
            {"tokens", p.tokens},   {"added", p.added()},       {"total", p.total()}};
}

std::string params_csv(const ParamBreakdown& p)
{
    std::ostringstream out;
    out << "part,count\n"
        << "base," << p.base << "\nauxiliary," << p.auxiliary << "\nexperts," << p.experts << "\ngating," << p.gating
        << "\ntokens," << p.tokens << "\nadded," << p.added() << "\ntotal," << p.total() << '\n';
    out << "task,early,middle,late\n";
    for (std::size_t t = 0; t < p.retained_per_task.size(); ++t) {
        const auto& k = p.retained_per_task[t];
        out << (t + 1) << ',' << k[0] << ',' << k[1] << ',' << k[2] << '\n';
    }
    return out.str();
}

/// Loads a checkpoint produced under a compatible configuration.
LifelongState load_compatible(const RunConfig& config, const fs::path& path)
{
    LifelongState s = load_checkpoint(path);
    if (!(s.dims == config.dims))
        throw ConfigError("model", "does not match the dimensions stored in " + path.string());
    if (!(s.schedule_params == config.schedule))
        throw ConfigError("schedule", "does not match the schedule stored in " + path.string());
    return s;
}

struct FinalMetrics {
    std::vector<MetricRecord> records;
    double mean_ia = 0.0;
    double mean_ta = 0.0;
};

FinalMetrics evaluate_all(const LifelongState& state, const std::vector<ConceptDataset>& concepts,
                          const FeatureExtractor& fx, const EvalConfig& eval, long& clock)
{
    FinalMetrics m;
    const int n = state.completed_tasks();
    for (int c = 1; c <= n; ++c) {
        m.records.push_back(evaluate_concept(state, concepts[static_cast<std::size_t>(c - 1)], fx, eval, n, clock++));
        m.mean_ia += m.records.back().image_alignment;
        m.mean_ta += m.records.back().text_alignment;
    }
    if (n > 0) {
        m.mean_ia /= n;
        m.mean_ta /= n;
    }
    return m;
}

std::vector<MetricRecord> read_records(const fs::path& path)
{
    std::vector<MetricRecord> out;
    std::istringstream in(read_text(path));
    std::string line;
    while (std::getline(in, line))
        if (!line.empty())
            out.push_back(json_record(json::parse(line)));
    return out;
}

Image crop(const Image& img, const BBox& box)
{
    const int x0 = static_cast<int>(std::floor(box.x0 * img.width));
    const int y0 = static_cast<int>(std::floor(box.y0 * img.height));
    const int x1 = std::max(x0 + 1, static_cast<int>(std::ceil(box.x1 * img.width)));
    const int y1 = std::max(y0 + 1, static_cast<int>(std::ceil(box.y1 * img.height)));
    Image c(y1 - y0, x1 - x0, img.channels);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
            for (int ch = 0; ch < img.channels; ++ch)
                c.at(y - y0, x - x0, ch) = img.at(y, x, ch);
    return c;
}

}  // namespace

fs::path RunPaths::task_checkpoint(int task) const
{
    return root / "checkpoints" / ("task_" + padded(task) + ".ckpt.json");
}

std::vector<ConceptDataset> config_concepts(const RunConfig& config)
{
    return gen_concepts(config.concepts.count, config.concepts.seed, config.dims.image_size);
}

std::vector<std::string> default_layout_prompts(const std::vector<ConceptDataset>& concepts, int learned)
{
    std::vector<std::string> prompts;
    for (int a = 1; a + 1 <= learned; a += 2) {
        const auto& ca = concepts[static_cast<std::size_t>(a - 1)];
        const auto& cb = concepts[static_cast<std::size_t>(a)];
        prompts.push_back("bg: photo of a gray room ; region: photo of a " + Vocabulary::concept_token(a) + " " +
                          ca.shape + " @ 0,0.2,0.5,0.8 ; region: photo of a " + Vocabulary::concept_token(a + 1) +
                          " " + cb.shape + " @ 0.5,0.2,1,0.8");
    }
    return prompts;
}

void cmd_gen_data(const RunConfig& config, const fs::path& out)
{
    const RunPaths paths{out};
    const auto concepts = config_concepts(config);
    std::ostringstream csv;
    csv << "concept,token,shape,texture,palette,images\n";
    for (const auto& c : concepts) {
        csv << c.index << ',' << Vocabulary::concept_token(c.index) << ',' << c.shape << ',' << c.texture << ','
            << c.palette.name << ',' << c.images.size() << '\n';
        const fs::path dir = paths.data() / ("concept_" + padded(c.index));
        fs::create_directories(dir);
        for (std::size_t i = 0; i < c.images.size(); ++i)
            write_ppm(dir / ("image_" + padded(static_cast<int>(i)) + ".ppm"), c.images[i]);
    }
    write_text(paths.data() / "concepts.csv", csv.str());
}

PretrainReport cmd_pretrain(const RunConfig& config, const fs::path& out)
{
    const RunPaths paths{out};
    LifelongState state = initial_state(config.dims, config.schedule, config.concepts.count, derive_seed(config.seed, 11));
    const PretrainReport report = pretrain_backbone(state, config.pretrain, derive_seed(config.seed, 12));
    save_checkpoint(paths.pretrain_checkpoint(), state, dump_config(config));
    const json j = {{"heldout_loss_before", report.heldout_loss_before},
                    {"heldout_loss_after", report.heldout_loss_after},
                    {"iterations", config.pretrain.iterations},
                    {"backbone_hash", hex64(state.backbone_hash)}};
    write_text(paths.pretrain_report(), j.dump(2) + "\n");
    return report;
}

TrainOutcome cmd_train(const RunConfig& config, const fs::path& out, const fs::path& pretrain_checkpoint)
{
    require_file(pretrain_checkpoint, "run the pretrain command first");
    const RunPaths paths{out};
    const TrainConfig train = config.effective_train();
    const std::string echo = dump_config(config);
    LifelongState state = load_compatible(config, pretrain_checkpoint);

    const auto concepts = config_concepts(config);
    std::vector<TaskSpec> tasks;
    for (const auto& c : concepts)
        tasks.push_back(TaskSpec::from_concept(c));

    const FeatureExtractor fx(derive_seed(config.seed, 13));
    TrainOutcome outcome;
    long clock = 0;
    outcome.reports = run_sequence(state, tasks, train, derive_seed(config.seed, 14),
                                   [&](const LifelongState& s, const TaskReport& report) {
                                       const auto& dataset = concepts[static_cast<std::size_t>(report.task - 1)];
                                       outcome.records.push_back(
                                           evaluate_concept(s, dataset, fx, config.eval, report.task, clock++));
                                       save_checkpoint(paths.task_checkpoint(report.task), s, echo);
                                   });
    const FinalMetrics final_metrics = evaluate_all(state, concepts, fx, config.eval, clock);
    outcome.records.insert(outcome.records.end(), final_metrics.records.begin(), final_metrics.records.end());
    outcome.forgetting = forgetting(outcome.records, state.completed_tasks());
    outcome.mean_image_alignment = final_metrics.mean_ia;
    outcome.mean_text_alignment = final_metrics.mean_ta;
    outcome.routing_drift = routing_drift_since_learned(state);
    outcome.params = param_breakdown(state);
    save_checkpoint(paths.final_checkpoint(), state, echo);

    std::ostringstream report_csv;
    report_csv << "task,gen_loss_first,gen_loss_last,distill_first,distill_last,gating_drift,"
                  "alpha_early,alpha_middle,alpha_late,retained_early,retained_middle,retained_late\n";
    for (const auto& r : outcome.reports) {
        report_csv << r.task << ',' << fmt(r.gen_loss_first) << ',' << fmt(r.gen_loss_last) << ','
                   << fmt(r.distill_first) << ',' << fmt(r.distill_last) << ',' << fmt(r.gating_drift);
        for (double a : r.alpha)
            report_csv << ',' << fmt(a);
        for (bool k : r.retained)
            report_csv << ',' << (k ? 1 : 0);
        report_csv << '\n';
    }
    write_text(paths.train_report(), report_csv.str());

    std::string lines;
    for (const auto& r : outcome.records)
        lines += record_json(r).dump() + "\n";
    write_text(paths.records(), lines);

    std::ostringstream ledger;
    ledger << "task,layer,alpha,retained,param_delta\n";
    for (const auto& r : state.ledger)
        ledger << r.task << ',' << kLayerNames[static_cast<std::size_t>(r.layer)] << ',' << fmt(r.alpha) << ','
               << (r.retained ? 1 : 0) << ',' << r.param_delta << '\n';
    write_text(paths.prune_ledger(), ledger.str());

    const json summary = {{"tasks", state.completed_tasks()},
                          {"forgetting", outcome.forgetting},
                          {"mean_image_alignment", outcome.mean_image_alignment},
                          {"mean_text_alignment", outcome.mean_text_alignment},
                          {"routing_drift", outcome.routing_drift},
                          {"params", params_json(outcome.params)},
                          {"metric_note", "alignment values are fixed-feature proxies, not CLIP/DINO scores"}};
    write_text(paths.train_summary(), summary.dump(2) + "\n");
    return outcome;
}

EvalOutcome cmd_eval(const RunConfig& config, const fs::path& out)
{
    const RunPaths paths{out};
    require_file(paths.final_checkpoint(), "run the train command first");
    require_file(paths.records(), "run the train command first");
    const LifelongState state = load_compatible(config, paths.final_checkpoint());
    const auto concepts = config_concepts(config);
    const FeatureExtractor fx(derive_seed(config.seed, 13));
    const std::vector<MetricRecord> learned = read_records(paths.records());

    EvalOutcome outcome;
    long clock = 0;
    for (const auto& r : learned)
        clock = std::max(clock, r.logical_time + 1);
    const FinalMetrics final_metrics = evaluate_all(state, concepts, fx, config.eval, clock);
    outcome.final_records = final_metrics.records;
    outcome.mean_image_alignment = final_metrics.mean_ia;
    outcome.mean_text_alignment = final_metrics.mean_ta;

    std::vector<MetricRecord> all;
    for (const auto& r : learned)
        if (r.after_task == r.concept_index)
            all.push_back(r);
    all.insert(all.end(), outcome.final_records.begin(), outcome.final_records.end());
    outcome.forgetting = forgetting(all, state.completed_tasks());
    outcome.routing_drift = routing_drift_since_learned(state);
    outcome.params = param_breakdown(state);
    outcome.heatmap = coefficient_heatmap(state);

    std::ostringstream table;
    table << "concept,image_alignment_learned,image_alignment_final,text_alignment_final\n";
    for (const auto& f : outcome.final_records) {
        double at_learn = f.image_alignment;
        for (const auto& r : learned)
            if (r.concept_index == f.concept_index && r.after_task == f.concept_index)
                at_learn = r.image_alignment;
        table << f.concept_index << ',' << fmt(at_learn) << ',' << fmt(f.image_alignment) << ','
              << fmt(f.text_alignment) << '\n';
    }
    write_text(paths.eval_table(), table.str());
    write_text(paths.heatmap(), heatmap_csv(outcome.heatmap));
    write_text(paths.params(), params_csv(outcome.params));
    const json summary = {{"forgetting", outcome.forgetting},
                          {"mean_image_alignment", outcome.mean_image_alignment},
                          {"mean_text_alignment", outcome.mean_text_alignment},
                          {"routing_drift", outcome.routing_drift},
                          {"params", params_json(outcome.params)},
                          {"metric_note", "alignment values are fixed-feature proxies, not CLIP/DINO scores"}};
    write_text(paths.eval_summary(), summary.dump(2) + "\n");
    return outcome;
}

SampleOutcome cmd_sample(const RunConfig& config, const fs::path& out)
{
    const RunPaths paths{out};
    require_file(paths.final_checkpoint(), "run the train command first");
    const LifelongState state = load_compatible(config, paths.final_checkpoint());
    const auto concepts = config_concepts(config);
    std::map<int, Palette> palettes;
    for (const auto& c : concepts)
        palettes[c.index] = c.palette;

    SampleOutcome outcome;
    outcome.guided = !config.ablations.disable_hlag;
    outcome.prompts =
        config.sample_prompts.empty() ? default_layout_prompts(concepts, state.completed_tasks()) : config.sample_prompts;
    const DslLayoutProvider layout;
    const PaletteMaskRefiner refiner(palettes);
    std::ostringstream csv;
    csv << "prompt,region,concept,palette_alignment\n";
    fs::create_directories(paths.samples());
    for (std::size_t p = 0; p < outcome.prompts.size(); ++p) {
        RegionPlan plan;
        try {
            plan = layout.plan(outcome.prompts[p]);
        } catch (const ParseError& e) {
            throw ConfigError("sample_prompts[" + std::to_string(p) + "]", e.what());
        } catch (const LayoutError& e) {
            throw ConfigError("sample_prompts[" + std::to_string(p) + "]", e.what());
        }
        plan.gamma_coarse = config.guided.gamma_coarse;
        plan.gamma_fine = config.guided.gamma_fine;
        plan.stage_ratio = config.guided.stage_ratio;
        const std::uint64_t seed = derive_seed(config.eval.seed, 5000 + p);
        Image img;
        if (outcome.guided) {
            GuidedTrace trace;
            img = guided_sample(state, plan, config.eval.sampler, refiner, seed, &trace);
            for (std::size_t m = 0; m < trace.refined_masks.size(); ++m)
                write_pgm(paths.samples() / ("sample_" + padded(static_cast<int>(p)) + "_mask_" +
                                             padded(static_cast<int>(m)) + ".pgm"),
                          trace.refined_masks[m]);
        } else {
            const auto ids = state.vocab.tokenize(flatten_plan(plan));
            img = sample_prompt(state, ids, config.eval.sampler, seed);
        }
        write_ppm(paths.samples() / ("sample_" + padded(static_cast<int>(p)) + ".ppm"), img);
        for (std::size_t r = 0; r < plan.regions.size(); ++r) {
            const Region& region = plan.regions[r];
            double score = 0.0;
            if (auto it = palettes.find(region.concept_index); it != palettes.end())
                score = palette_alignment(crop(img, region.box), it->second);
            outcome.region_alignment.push_back(score);
            csv << p << ',' << r << ',' << region.concept_index << ',' << fmt(score) << '\n';
        }
    }
    for (double a : outcome.region_alignment)
        outcome.mean_region_alignment += a;
    if (!outcome.region_alignment.empty())
        outcome.mean_region_alignment /= static_cast<double>(outcome.region_alignment.size());
    write_text(paths.samples() / "samples.csv", csv.str());
    return outcome;
}

std::vector<SweepRow> cmd_sweep(const RunConfig& config, const fs::path& out)
{
    const RunPaths paths{out};
    require_file(paths.pretrain_checkpoint(), "run the pretrain command first");
    struct Variant {
        std::string name;
        AblationFlags flags;
    };
    const std::vector<Variant> variants = {
        {"full", {}},
        {"no_rdm", {true, false, false, false}},
        {"no_sae", {false, true, false, false}},
        {"no_lrer", {false, false, true, false}},
        {"no_hlag", {false, false, false, true}},
    };
    std::vector<SweepRow> rows;
    for (const auto& v : variants) {
        RunConfig c = config;
        c.ablations = v.flags;
        const fs::path dir = paths.sweep() / v.name;
        const RunPaths vp{dir};
        if (v.flags.disable_hlag) {
            // training ignores this flag; reuse the full method's training artifacts
            const RunPaths full{paths.sweep() / "full"};
            fs::create_directories(dir);
            for (const fs::path& f : {full.final_checkpoint(), full.records()})
                fs::copy_file(f, dir / f.filename(), fs::copy_options::overwrite_existing);
        } else {
            cmd_train(c, dir, paths.pretrain_checkpoint());
        }
        const EvalOutcome e = cmd_eval(c, dir);
        const SampleOutcome s = cmd_sample(c, dir);
        rows.push_back({v.name, e.mean_image_alignment, e.forgetting, e.mean_text_alignment, e.routing_drift,
                        e.params.added(), s.mean_region_alignment});
    }
    std::ostringstream csv;
    csv << "variant,mean_image_alignment,forgetting,mean_text_alignment,routing_drift,added_params,region_alignment\n";
    for (const auto& r : rows)
        csv << r.variant << ',' << fmt(r.mean_image_alignment) << ',' << fmt(r.forgetting) << ','
            << fmt(r.mean_text_alignment) << ',' << fmt(r.routing_drift) << ',' << r.added_params << ','
            << fmt(r.region_alignment) << '\n';
    write_text(paths.root / "sweep.csv", csv.str());
    return rows;
}

}  // namespace r2moe
