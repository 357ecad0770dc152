#include "r2moe/lifelong_trainer.hpp"

#include <algorithm>
#include <cmath>

namespace r2moe {

void TrainConfig::validate() const
{
    if (!(prune_threshold >= 0.0 && prune_threshold <= 1.0))
        throw DomainError("prune_threshold must lie in [0, 1]");
    if (!(beta >= 0.0))
        throw DomainError("beta must be >= 0");
    if (iterations < 1)
        throw DomainError("iterations must be >= 1");
    if (k < 1)
        throw DomainError("k must be >= 1");
    if (batch_size < 1)
        throw DomainError("batch_size must be >= 1");
    if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0) || !(momentum >= 0.0 && momentum < 1.0))
        throw DomainError("momentum and adam_beta2 must lie in [0, 1)");
    if (!(max_grad_norm >= 0.0))
        throw DomainError("max_grad_norm must be >= 0");
}

std::string TaskSpec::prompt() const
{
    std::string out = prompt_template;
    auto replace = [&](const std::string& key, const std::string& value) {
        for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + value.size()))
            out.replace(pos, key.size(), value);
    };
    replace("{token}", Vocabulary::concept_token(index));
    replace("{class}", class_word);
    return out;
}

TaskSpec TaskSpec::from_concept(const ConceptDataset& c)
{
    TaskSpec t;
    t.index = c.index;
    t.class_word = c.shape;
    t.images = c.images;
    return t;
}

const TaskRecord& LifelongState::task(int index) const
{
    if (index < 1 || index > completed_tasks())
        throw LookupError("no completed task " + std::to_string(index));
    return tasks[static_cast<std::size_t>(index - 1)];
}

Conditioning LifelongState::null_conditioning() const
{
    return {table.encode({vocab.id("<null>")}), model.base_kv()};
}

std::optional<std::array<SelectionResult, kMoELayers>> LifelongState::infer_routing(const Mat& context,
                                                                                     const std::vector<int>& ids) const
{
    const bool names_concept = std::any_of(ids.begin(), ids.end(), [&](int id) { return vocab.is_concept(id); });
    if (!names_concept || !model.has_experts())
        return std::nullopt;
    std::array<SelectionResult, kMoELayers> r;
    for (int l = 0; l < kMoELayers; ++l)
        r[static_cast<std::size_t>(l)] =
            route(model.layer(l), context, std::nullopt, routing.k, SelectMode::kInfer, routing.dense);
    return r;
}

Conditioning LifelongState::conditioning(const std::vector<int>& ids) const
{
    Mat context = table.encode(ids);
    const auto r = infer_routing(context, ids);
    return {std::move(context), r ? model.composed_kv(*r) : model.base_kv()};
}

Conditioning LifelongState::conditioning(const std::vector<int>& ids,
                                         const std::array<SelectionResult, kMoELayers>& r) const
{
    return {table.encode(ids), model.composed_kv(r)};
}

LifelongState initial_state(const ModelDims& dims, const ScheduleParams& schedule, int concept_capacity,
                            std::uint64_t seed)
{
    LifelongState s;
    s.dims = dims;
    s.schedule_params = schedule;
    s.schedule = NoiseSchedule::linear(schedule.steps, schedule.beta_start, schedule.beta_end);
    s.vocab = Vocabulary(Vocabulary::default_base_words(), concept_capacity);
    s.table = TokenEmbeddingTable(s.vocab, dims.d_in, derive_seed(seed, 1));
    s.model = Denoiser(dims, s.schedule, derive_seed(seed, 2));
    return s;
}

// ---------------------------------------------------------------------------------------------
// Pretraining

namespace {

Vec pack_theta(const Denoiser& model)
{
    std::vector<double> buf;
    auto put = [&](const Mat& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i)
            buf.push_back(m.data()[i]);
    };
    model.theta().for_each([&](const std::string&, const Mat& m) { put(m); });
    for (const auto& layer : model.layers()) {
        put(layer.key.base);
        put(layer.value.base);
    }
    return Eigen::Map<Vec>(buf.data(), static_cast<Eigen::Index>(buf.size()));
}

void unpack_theta(Denoiser& model, const Vec& v)
{
    Eigen::Index off = 0;
    auto get = [&](Mat& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i)
            m.data()[i] = v[off++];
    };
    model.theta().for_each([&](const std::string&, Mat& m) { get(m); });
    for (auto& layer : model.layers()) {
        get(layer.key.base);
        get(layer.value.base);
    }
}

Vec pack_theta_grad(const BackwardResult& r)
{
    std::vector<double> buf;
    auto put = [&](const Mat& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i)
            buf.push_back(m.data()[i]);
    };
    r.d_theta->for_each([&](const std::string&, const Mat& m) { put(m); });
    for (int l = 0; l < kMoELayers; ++l) {
        put(r.d_wk[static_cast<std::size_t>(l)]);
        put(r.d_wv[static_cast<std::size_t>(l)]);
    }
    return Eigen::Map<Vec>(buf.data(), static_cast<Eigen::Index>(buf.size()));
}

struct BaseExample {
    Mat z0;
    std::vector<int> ids;
    int t = 0;
    Mat noise;
};

BaseExample draw_base_example(const LifelongState& s, Rng& rng, double null_prob)
{
    const auto ex = gen_base_example(rng, s.dims.image_size);
    BaseExample b;
    b.z0 = patchify(ex.image, s.dims.patch);
    b.ids = rng.uniform() < null_prob ? std::vector<int>{s.vocab.id("<null>")} : s.vocab.tokenize(ex.caption);
    b.t = rng.integer(0, s.schedule.steps() - 1);
    b.noise = rng.gaussian(b.z0.rows(), b.z0.cols(), 1.0);
    return b;
}

}  // namespace

double heldout_base_loss(const LifelongState& state, std::uint64_t seed, int examples)
{
    Rng rng(seed);
    const auto kv = state.model.base_kv();
    double total = 0.0;
    for (int i = 0; i < examples; ++i) {
        const auto b = draw_base_example(state, rng, 0.0);
        const Mat zt = add_noise(state.schedule, b.z0, b.t, b.noise);
        total += mse(state.model.predict(zt, b.t, state.table.encode(b.ids), kv), b.noise);
    }
    return total / examples;
}

PretrainReport pretrain_backbone(LifelongState& state, const PretrainConfig& config, std::uint64_t seed)
{
    if (state.model.has_experts())
        throw StateError("pretrain: backbone already frozen");
    if (config.iterations < 1 || config.batch_size < 1)
        throw DomainError("pretrain: iterations and batch size must be positive");
    const std::uint64_t heldout_seed = derive_seed(seed, 99);
    PretrainReport report;
    report.heldout_loss_before = heldout_base_loss(state, heldout_seed);

    Rng rng(derive_seed(seed, 3));
    Vec params = pack_theta(state.model);
    Vec m = Vec::Zero(params.size());
    Vec v = Vec::Zero(params.size());
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (int it = 1; it <= config.iterations; ++it) {
        Vec grad = Vec::Zero(params.size());
        for (int b = 0; b < config.batch_size; ++b) {
            const auto ex = draw_base_example(state, rng, config.null_prompt_prob);
            const Mat zt = add_noise(state.schedule, ex.z0, ex.t, ex.noise);
            ForwardCache cache;
            const Mat pred = state.model.predict(zt, ex.t, state.table.encode(ex.ids), state.model.base_kv(), &cache);
            // v-prediction weighting: eps error / abar equals eps MSE plus x0 MSE
            const double w = 1.0 / state.schedule.alpha_bar[ex.t];
            const Mat d_out = 2.0 * w * (pred - ex.noise) / static_cast<double>(pred.size() * config.batch_size);
            grad += pack_theta_grad(state.model.backward(cache, d_out, true));
        }
        // cosine decay keeps the final iterations gentle
        const double lr = config.lr * 0.5 * (1.0 + std::cos(M_PI * (it - 1) / config.iterations));
        m = b1 * m + (1 - b1) * grad;
        v = b2 * v + (1 - b2) * grad.cwiseProduct(grad);
        const double c1 = 1.0 - std::pow(b1, it);
        const double c2 = 1.0 - std::pow(b2, it);
        params.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
        if (!all_finite(params))
            throw NumericError("pretrain: non-finite parameters at iteration " + std::to_string(it));
        unpack_theta(state.model, params);
    }
    report.heldout_loss_after = heldout_base_loss(state, heldout_seed);
    state.backbone_hash = state.model.theta_hash();
    state.model.attach_experts(derive_seed(seed, 4));
    return report;
}

// ---------------------------------------------------------------------------------------------
// Routing distillation

double routing_distillation_loss(const std::array<GatingNetwork, kMoELayers>& current,
                                 const std::array<GatingNetwork, kMoELayers>& previous,
                                 const ConceptEmbeddingBank& bank, int before_task)
{
    double total = 0.0;
    for (int tau = 1; tau < before_task; ++tau) {
        const Mat& c = bank.at(tau);
        for (std::size_t l = 0; l < kMoELayers; ++l) {
            const RowVec target = previous[l].forward(c);
            const RowVec now = current[l].forward(c);
            if (now.size() < target.size())
                throw ShapeError("distillation: current gate narrower than its target");
            total += (now.head(target.size()) - target).squaredNorm();
        }
    }
    return total;
}

namespace {

std::array<GatingNetwork, kMoELayers> gates_of(const LifelongState& s)
{
    std::array<GatingNetwork, kMoELayers> g;
    for (int l = 0; l < kMoELayers; ++l)
        g[static_cast<std::size_t>(l)] = s.model.layer(l).gate;
    return g;
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Task training

TaskTrainer::TaskTrainer(LifelongState& state, const TaskSpec& task, const TrainConfig& config, std::uint64_t seed)
    : state_(state), task_(task), config_(config), rng_(seed)
{
    config_.validate();
    if (!state_.model.has_experts())
        throw StateError("train_task: backbone has not been pretrained");
    if (task_.index != state_.completed_tasks() + 1)
        throw StateError("train_task: expected task " + std::to_string(state_.completed_tasks() + 1) + ", got " +
                         std::to_string(task_.index));
    for (const auto& layer : state_.model.layers())
        if (!layer.all_frozen())
            throw StateError("train_task: a predecessor task is not frozen");
    if (task_.images.size() < 3 || task_.images.size() > 8)
        throw DomainError("train_task: a task needs between 3 and 8 images");
    if (task_.index > 1 && !state_.previous_gates)
        throw StateError("train_task: missing gating snapshot of the previous task");

    token_id_ = state_.table.register_concept(state_.vocab, task_.class_word, derive_seed(seed, 11),
                                              config_.concept_init_noise);
    ids_ = state_.vocab.tokenize(task_.prompt());
    Rng grow_rng(derive_seed(seed, 12));
    for (int l = 0; l < kMoELayers; ++l)
        slots_[static_cast<std::size_t>(l)] =
            state_.model.layer(l).grow(task_.index, state_.dims.rank, config_.expert_init_scale, grow_rng);
    for (const auto& img : task_.images)
        latents_.push_back(patchify(img, state_.dims.patch));
    state_.routing = {config_.k, config_.dense_routing};

    // Per-coordinate learning rates in pack() order.
    std::vector<double> lr;
    for (int l = 0; l < kMoELayers; ++l) {
        const auto& layer = state_.model.layer(l);
        const auto& ek = layer.key.experts.back();
        const auto& ev = layer.value.experts.back();
        lr.insert(lr.end(), static_cast<std::size_t>(ek.parameter_count() + ev.parameter_count()), config_.lr_experts);
        lr.insert(lr.end(), static_cast<std::size_t>(layer.gate.parameter_count()), config_.lr_gating);
    }
    lr.insert(lr.end(), static_cast<std::size_t>(state_.dims.d_in), config_.lr_token);
    lr_ = Eigen::Map<Vec>(lr.data(), static_cast<Eigen::Index>(lr.size()));
    velocity_ = Vec::Zero(lr_.size());
    second_moment_ = Vec::Zero(lr_.size());
}

Vec TaskTrainer::pack() const
{
    std::vector<double> buf;
    auto put = [&](const auto& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i)
            buf.push_back(m.data()[i]);
    };
    for (int l = 0; l < kMoELayers; ++l) {
        const auto& layer = state_.model.layer(l);
        const auto s = static_cast<std::size_t>(slot(l));
        put(layer.key.experts[s].down);
        put(layer.key.experts[s].up);
        put(layer.value.experts[s].down);
        put(layer.value.experts[s].up);
        put(layer.gate.hidden_w);
        put(layer.gate.hidden_b);
        put(layer.gate.out_w);
        put(layer.gate.out_b);
    }
    put(state_.table.concept_rows()[static_cast<std::size_t>(task_.index - 1)]);
    return Eigen::Map<Vec>(buf.data(), static_cast<Eigen::Index>(buf.size()));
}

void TaskTrainer::unpack(const Vec& params)
{
    if (finished_)
        throw StateError("task trainer: parameters are frozen");
    Eigen::Index off = 0;
    auto get = [&](auto& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i)
            m.data()[i] = params[off++];
    };
    for (int l = 0; l < kMoELayers; ++l) {
        auto& layer = state_.model.layer(l);
        const auto s = static_cast<std::size_t>(slot(l));
        get(layer.key.experts[s].down);
        get(layer.key.experts[s].up);
        get(layer.value.experts[s].down);
        get(layer.value.experts[s].up);
        get(layer.gate.hidden_w);
        get(layer.gate.hidden_b);
        get(layer.gate.out_w);
        get(layer.gate.out_b);
    }
    RowVec token(state_.dims.d_in);
    get(token);
    state_.table.set_concept(task_.index, token);
}

TaskBatch TaskTrainer::draw_batch()
{
    TaskBatch batch;
    for (int b = 0; b < config_.batch_size; ++b) {
        DenoiseExample ex;
        ex.z0 = latents_[static_cast<std::size_t>(rng_.integer(0, static_cast<int>(latents_.size()) - 1))];
        ex.t = rng_.integer(0, state_.schedule.steps() - 1);
        ex.noise = rng_.gaussian(ex.z0.rows(), ex.z0.cols(), 1.0);
        batch.examples.push_back(std::move(ex));
    }
    return batch;
}

double TaskTrainer::objective(const TaskBatch& batch, Vec* grad, double* gen_loss, double* distill_loss) const
{
    const auto& model = state_.model;
    const Mat context = state_.table.encode(ids_);

    std::array<GatingCache, kMoELayers> gate_cache;
    std::array<SelectionResult, kMoELayers> sel;
    for (int l = 0; l < kMoELayers; ++l) {
        const auto li = static_cast<std::size_t>(l);
        const auto& layer = model.layer(l);
        const RowVec scores = layer.gate.forward(context, &gate_cache[li]);
        const auto flags = layer.retained_flags();
        sel[li] = select_and_normalize(scores, slot(l), config_.k, SelectMode::kTrain, config_.dense_routing, &flags);
    }
    const LayerKVs kv = model.composed_kv(sel);

    const auto n_batch = static_cast<double>(batch.examples.size());
    double gen = 0.0;
    std::array<Mat, kMoELayers> d_wk;
    std::array<Mat, kMoELayers> d_wv;
    Mat d_context = Mat::Zero(context.rows(), context.cols());
    for (std::size_t l = 0; l < kMoELayers; ++l) {
        d_wk[l] = Mat::Zero(kv[l].wk.rows(), kv[l].wk.cols());
        d_wv[l] = Mat::Zero(kv[l].wv.rows(), kv[l].wv.cols());
    }
    for (const auto& ex : batch.examples) {
        const Mat zt = add_noise(state_.schedule, ex.z0, ex.t, ex.noise);
        ForwardCache cache;
        const Mat pred = model.predict(zt, ex.t, context, kv, grad ? &cache : nullptr);
        gen += mse(pred, ex.noise) / n_batch;
        if (grad) {
            const Mat d_out = 2.0 * (pred - ex.noise) / (static_cast<double>(pred.size()) * n_batch);
            const auto back = model.backward(cache, d_out, false);
            for (std::size_t l = 0; l < kMoELayers; ++l) {
                d_wk[l] += back.d_wk[l];
                d_wv[l] += back.d_wv[l];
            }
            d_context += back.d_context;
        }
    }

    double distill = 0.0;
    std::vector<GatingNetwork::Grad> gate_grads;
    if (grad)
        for (int l = 0; l < kMoELayers; ++l)
            gate_grads.emplace_back(model.layer(l).gate);
    if (state_.previous_gates && config_.beta != 0.0) {
        for (int tau = 1; tau < task_.index; ++tau) {
            const Mat& c = state_.bank.at(tau);
            for (int l = 0; l < kMoELayers; ++l) {
                const auto li = static_cast<std::size_t>(l);
                const auto& gate = model.layer(l).gate;
                GatingCache gc;
                const RowVec now = gate.forward(c, &gc);
                const RowVec target = (*state_.previous_gates)[li].forward(c);
                const RowVec diff = now.head(target.size()) - target;
                distill += diff.squaredNorm();
                if (grad) {
                    RowVec d_scores = RowVec::Zero(now.size());
                    d_scores.head(target.size()) = 2.0 * config_.beta * diff;
                    gate.backward(gc, d_scores, &gate_grads[li]);
                }
            }
        }
    }

    if (grad) {
        std::vector<double> buf;
        auto put = [&](const auto& m) {
            for (Eigen::Index i = 0; i < m.size(); ++i)
                buf.push_back(m.data()[i]);
        };
        for (int l = 0; l < kMoELayers; ++l) {
            const auto li = static_cast<std::size_t>(l);
            const auto& layer = model.layer(l);
            const auto s = static_cast<std::size_t>(slot(l));
            ExpertGrad gk{Mat::Zero(layer.key.experts[s].down.rows(), layer.key.experts[s].down.cols()),
                          Mat::Zero(layer.key.experts[s].up.rows(), layer.key.experts[s].up.cols())};
            ExpertGrad gv{Mat::Zero(layer.value.experts[s].down.rows(), layer.value.experts[s].down.cols()),
                          Mat::Zero(layer.value.experts[s].up.rows(), layer.value.experts[s].up.cols())};
            const Vec d_alpha = compose_weight_backward(layer.key, sel[li], d_wk[li], slot(l), &gk) +
                                compose_weight_backward(layer.value, sel[li], d_wv[li], slot(l), &gv);
            const RowVec d_scores = selection_score_grad(sel[li], d_alpha, layer.width());
            d_context += layer.gate.backward(gate_cache[li], d_scores, &gate_grads[li]);
            put(gk.down);
            put(gk.up);
            put(gv.down);
            put(gv.up);
            put(gate_grads[li].hidden_w);
            put(gate_grads[li].hidden_b);
            put(gate_grads[li].out_w);
            put(gate_grads[li].out_b);
        }
        put(TokenEmbeddingTable::concept_gradient(ids_, d_context, token_id_));
        *grad = Eigen::Map<Vec>(buf.data(), static_cast<Eigen::Index>(buf.size()));
    }
    if (gen_loss)
        *gen_loss = gen;
    if (distill_loss)
        *distill_loss = distill;
    return gen + config_.beta * distill;
}

std::pair<double, double> TaskTrainer::step()
{
    if (finished_)
        throw StateError("task trainer: task already finished and frozen");
    const TaskBatch batch = draw_batch();
    Vec grad;
    double gen = 0.0;
    double distill = 0.0;
    objective(batch, &grad, &gen, &distill);
    if (!all_finite(grad))
        throw NumericError("train_task: non-finite gradient at step " + std::to_string(steps_));
    const double norm = grad.norm();
    if (config_.max_grad_norm > 0.0 && norm > config_.max_grad_norm)
        grad *= config_.max_grad_norm / norm;
    if (config_.optimizer == Optimizer::kSgdMomentum) {
        velocity_ = config_.momentum * velocity_ + grad;
        unpack(pack() - lr_.cwiseProduct(velocity_));
    } else {
        // Adam: per-coordinate steps are bounded by lr, which keeps the stiff distillation term stable
        const double b1 = config_.momentum;
        const double b2 = config_.adam_beta2;
        velocity_ = b1 * velocity_ + (1.0 - b1) * grad;
        second_moment_ = b2 * second_moment_ + (1.0 - b2) * grad.cwiseAbs2();
        const double c1 = 1.0 - std::pow(b1, steps_ + 1);
        const double c2 = 1.0 - std::pow(b2, steps_ + 1);
        const Vec update = (velocity_ / c1).array() / ((second_moment_ / c2).array().sqrt() + 1e-8);
        unpack(pack() - lr_.cwiseProduct(update));
    }
    ++steps_;
    gen_history_.push_back(gen);
    distill_history_.push_back(distill);
    return {gen, distill};
}

TaskReport TaskTrainer::finish()
{
    if (finished_)
        throw StateError("task trainer: finish called twice");
    TaskReport report;
    report.task = task_.index;
    if (!gen_history_.empty()) {
        const std::size_t tail = std::max<std::size_t>(1, gen_history_.size() / 10);
        report.gen_loss_first = gen_history_.front();
        report.distill_first = distill_history_.front();
        double g = 0.0;
        double d = 0.0;
        for (std::size_t i = gen_history_.size() - tail; i < gen_history_.size(); ++i) {
            g += gen_history_[i];
            d += distill_history_[i];
        }
        report.gen_loss_last = g / static_cast<double>(tail);
        report.distill_last = d / static_cast<double>(tail);
    }

    for (auto& layer : state_.model.layers())
        layer.freeze_all();
    state_.table.freeze_concept(task_.index);
    const Mat context = state_.table.encode(ids_);
    state_.bank.snapshot(task_.index, context);
    finished_ = true;

    if (state_.previous_gates) {
        for (int tau = 1; tau < task_.index; ++tau)
            for (int l = 0; l < kMoELayers; ++l) {
                const Mat& c = state_.bank.at(tau);
                const RowVec target = (*state_.previous_gates)[static_cast<std::size_t>(l)].forward(c);
                const RowVec now = state_.model.layer(l).gate.forward(c);
                report.gating_drift =
                    std::max(report.gating_drift, (now.head(target.size()) - target).cwiseAbs().maxCoeff());
            }
    }

    TaskRecord record;
    record.index = task_.index;
    record.class_word = task_.class_word;
    record.prompt_ids = ids_;
    state_.tasks.push_back(record);

    const auto rows = prune_task(state_, task_.index, config_);
    for (const auto& row : rows) {
        report.alpha[static_cast<std::size_t>(row.layer)] = row.alpha;
        report.retained[static_cast<std::size_t>(row.layer)] = row.retained;
    }
    state_.ledger.insert(state_.ledger.end(), rows.begin(), rows.end());
    state_.previous_gates = gates_of(state_);

    auto& stored = state_.tasks.back();
    for (int l = 0; l < kMoELayers; ++l) {
        const auto li = static_cast<std::size_t>(l);
        stored.scores[li] = state_.model.layer(l).gate.forward(context);
    }
    stored.routing = *state_.infer_routing(context, ids_);
    return report;
}

TaskReport train_task(LifelongState& state, const TaskSpec& task, const TrainConfig& config, std::uint64_t seed)
{
    TaskTrainer trainer(state, task, config, seed);
    for (int i = 0; i < config.iterations; ++i)
        trainer.step();
    return trainer.finish();
}

std::vector<PruneRow> prune_task(LifelongState& state, int task, const TrainConfig& config)
{
    const Mat& context = state.bank.at(task);
    std::vector<PruneRow> rows;
    for (int l = 0; l < kMoELayers; ++l) {
        auto& layer = state.model.layer(l);
        if (!layer.all_frozen())
            throw StateError("prune: task experts must be frozen first");
        const int s = layer.width() - 1;
        if (layer.key.experts.back().owner_task != task)
            throw StateError("prune: newest expert does not belong to task " + std::to_string(task));
        const auto sel = route(layer, context, s, config.k, SelectMode::kTrain, config.dense_routing);
        PruneRow row;
        row.task = task;
        row.layer = l;
        row.alpha = sel.alpha_of(s);
        row.retained = row.alpha >= config.prune_threshold;
        if (row.retained) {
            row.param_delta = layer.key.experts.back().parameter_count() +
                              layer.value.experts.back().parameter_count() + layer.gate.out_w.rows() + 1;
        } else {
            layer.prune_last();
        }
        rows.push_back(row);
    }
    return rows;
}

std::vector<TaskReport> run_sequence(LifelongState& state, const std::vector<TaskSpec>& tasks,
                                     const TrainConfig& config, std::uint64_t seed, const TaskCallback& after_task)
{
    std::vector<TaskReport> reports;
    for (const auto& task : tasks) {
        reports.push_back(train_task(state, task, config, derive_seed(seed, static_cast<std::uint64_t>(task.index))));
        if (after_task)
            after_task(state, reports.back());
    }
    return reports;
}

Image sample_prompt(const LifelongState& state, const std::vector<int>& ids, const SamplerOptions& options,
                    std::uint64_t seed, const std::array<SelectionResult, kMoELayers>* replay)
{
    const Conditioning cond = replay ? state.conditioning(ids, *replay) : state.conditioning(ids);
    return ddim_sample(state.model, state.schedule, cond, state.null_conditioning(), options, seed);
}

double routing_drift_since_learned(const LifelongState& state)
{
    double drift = 0.0;
    for (const auto& rec : state.tasks) {
        const Mat& c = state.bank.at(rec.index);
        for (int l = 0; l < kMoELayers; ++l) {
            const RowVec& then = rec.scores[static_cast<std::size_t>(l)];
            const RowVec now = state.model.layer(l).gate.forward(c);
            drift = std::max(drift, (now.head(then.size()) - then).cwiseAbs().maxCoeff());
        }
    }
    return drift;
}

}  // namespace r2moe
