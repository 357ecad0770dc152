#include "support.hpp"

#include "r2moe/analysis.hpp"
#include "r2moe/checkpoint.hpp"
#include "r2moe/lifelong_trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace r2moe;
using namespace r2moe::testing;

namespace {

std::array<GatingNetwork, kMoELayers> constant_gates(double value)
{
    std::array<GatingNetwork, kMoELayers> g;
    Rng rng(1);
    for (auto& n : g) {
        n = GatingNetwork(4, 3, 1, rng);
        n.hidden_w.setZero();
    }
    g[1].out_b[0] = value;
    return g;
}

}  // namespace

TEST(RoutingDistillation, EmptyBankIsZero)
{
    const auto g = constant_gates(0.2);
    EXPECT_EQ(routing_distillation_loss(g, constant_gates(0.9), ConceptEmbeddingBank{}, 1), 0.0);
}

TEST(RoutingDistillation, HandFrobeniusExample)
{
    ConceptEmbeddingBank bank;
    bank.snapshot(1, Mat::Ones(2, 4));
    EXPECT_NEAR(routing_distillation_loss(constant_gates(0.2), constant_gates(0.5), bank, 2), 0.09, 1e-15);
}

TEST(RoutingDistillation, CopyWithZeroColumnIsZero)
{
    ConceptEmbeddingBank bank;
    Rng rng(2);
    bank.snapshot(1, rng.gaussian(3, 4, 1.0));
    bank.snapshot(2, rng.gaussian(3, 4, 1.0));
    auto prev = constant_gates(0.4);
    for (auto& n : prev) {
        n.hidden_w = rng.gaussian(4, 3, 1.0);
        n.out_w = rng.gaussian(3, 1, 1.0);
    }
    auto cur = prev;
    for (auto& n : cur)
        n.add_zero_column();
    EXPECT_EQ(routing_distillation_loss(cur, prev, bank, 3), 0.0);
}

TEST(RoutingDistillation, MissingBankEntryThrows)
{
    ConceptEmbeddingBank bank;
    bank.snapshot(1, Mat::Ones(2, 4));
    EXPECT_THROW(routing_distillation_loss(constant_gates(0.2), constant_gates(0.5), bank, 3), StateError);
}

TEST(TrainConfig, ValidateRejectsOutOfRange)
{
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.prune_threshold = 1.5;
    EXPECT_THROW(c.validate(), DomainError);
    c = TrainConfig{};
    c.beta = -1.0;
    EXPECT_THROW(c.validate(), DomainError);
    c = TrainConfig{};
    c.iterations = 0;
    EXPECT_THROW(c.validate(), DomainError);
}

TEST(TrainTask, RequiresPretrainingAndOrder)
{
    LifelongState raw = initial_state(tiny_dims(), tiny_schedule(), 4, 1);
    const auto tasks = tiny_tasks(2);
    EXPECT_THROW(train_task(raw, tasks[0], tiny_train(), 1), StateError);
    LifelongState state = tiny_state();
    EXPECT_THROW(train_task(state, tasks[1], tiny_train(), 1), StateError);
}

TEST(TrainTask, ReducesOwnLoss)
{
    LifelongState state = tiny_state(3, 12, 40);
    const auto task = tiny_tasks(1)[0];
    TrainConfig config = tiny_train();
    TaskTrainer trainer(state, task, config, 5);
    const TaskBatch batch = trainer.draw_batch();
    double before = 0.0, after = 0.0;
    trainer.objective(batch, nullptr, &before);
    for (int i = 0; i < 60; ++i)
        trainer.step();
    trainer.objective(batch, nullptr, &after);
    EXPECT_LT(after, before);
}

TEST(TrainTask, DistillationZeroAtFirstStep)
{
    LifelongState state = tiny_state();
    const auto reports = run_sequence(state, tiny_tasks(4), tiny_train(5), 9);
    for (const auto& r : reports)
        EXPECT_EQ(r.distill_first, 0.0) << "task " << r.task;
    EXPECT_GT(reports.back().distill_last, 0.0);
}

TEST(TrainTask, FinishedTrainerRefusesSteps)
{
    LifelongState state = tiny_state();
    TaskTrainer trainer(state, tiny_tasks(1)[0], tiny_train(), 4);
    trainer.step();
    trainer.finish();
    EXPECT_THROW(trainer.step(), StateError);
    EXPECT_THROW(trainer.finish(), StateError);
    for (const auto& layer : state.model.layers())
        EXPECT_TRUE(layer.all_frozen());
}

TEST(TrainTask, OnlyCurrentParametersMove)
{
    LifelongState state = tiny_state();
    const auto tasks = tiny_tasks(2);
    TrainConfig config = tiny_train(6);
    config.prune_threshold = 0.0;
    train_task(state, tasks[0], config, 1);
    const LifelongState before = state;
    train_task(state, tasks[1], config, 2);

    EXPECT_EQ(state.model.theta_hash(), before.model.theta_hash());
    EXPECT_EQ(state.table.base_rows(), before.table.base_rows());
    EXPECT_EQ(state.table.row(state.vocab.concept_id(1)), before.table.row(before.vocab.concept_id(1)));
    EXPECT_EQ(state.bank.at(1), before.bank.at(1));
    for (int l = 0; l < kMoELayers; ++l) {
        const auto& now = state.model.layer(l);
        const auto& then = before.model.layer(l);
        EXPECT_EQ(now.key.base, then.key.base);
        EXPECT_EQ(now.value.base, then.value.base);
        for (std::size_t i = 0; i < then.key.experts.size(); ++i) {
            EXPECT_EQ(now.key.experts[i].down, then.key.experts[i].down);
            EXPECT_EQ(now.key.experts[i].up, then.key.experts[i].up);
            EXPECT_EQ(now.value.experts[i].up, then.value.experts[i].up);
        }
        // the new task's expert and the gate did move
        EXPECT_NE(now.key.experts.back().up, Mat::Zero(now.key.experts.back().up.rows(), now.key.experts.back().up.cols()));
        EXPECT_NE(now.gate.out_w.leftCols(then.gate.width()), then.gate.out_w);
    }
    EXPECT_NE(state.table.row(state.vocab.concept_id(2)),
              state.table.base_rows().row(state.vocab.id(tasks[1].class_word)));
}

TEST(TrainTask, LargeBetaHoldsGatingBelowZeroBeta)
{
    const auto tasks = tiny_tasks(3);
    auto drift = [&](double beta) {
        LifelongState state = tiny_state();
        TrainConfig config = tiny_train(20);
        config.beta = beta;
        const auto reports = run_sequence(state, tasks, config, 12);
        return std::max(reports[1].gating_drift, reports[2].gating_drift);
    };
    const double stiff = drift(1e6);
    const double free = drift(0.0);
    EXPECT_LT(stiff, free);
}

TEST(PruneTask, ThresholdFloorAndCeiling)
{
    const auto tasks = tiny_tasks(2);
    {
        LifelongState state = tiny_state();
        TrainConfig config = tiny_train(4);
        config.prune_threshold = 0.0;
        for (const auto& r : run_sequence(state, tasks, config, 2))
            for (const bool kept : r.retained)
                EXPECT_TRUE(kept);
        EXPECT_EQ(state.model.layer(0).width(), 3);
    }
    {
        LifelongState state = tiny_state();
        TrainConfig config = tiny_train(4);
        config.prune_threshold = 1.0;
        for (const auto& r : run_sequence(state, tasks, config, 2))
            for (int l = 0; l < kMoELayers; ++l) {
                EXPECT_FALSE(r.retained[static_cast<std::size_t>(l)]);
                EXPECT_LT(r.alpha[static_cast<std::size_t>(l)], 1.0);
            }
        for (const auto& layer : state.model.layers()) {
            EXPECT_EQ(layer.width(), 1);
            EXPECT_EQ(layer.key.experts.size(), 1u);
        }
    }
}

TEST(PruneTask, BoundaryKeepsAtEquality)
{
    LifelongState state = tiny_state();
    TrainConfig config = tiny_train(6);
    config.prune_threshold = 0.0;
    const auto report = train_task(state, tiny_tasks(1)[0], config, 7);
    const double alpha = *std::min_element(report.alpha.begin(), report.alpha.end());
    ASSERT_GT(alpha, 0.0);

    LifelongState at = state;
    config.prune_threshold = alpha;
    const auto rows_at = prune_task(at, 1, config);
    for (const auto& row : rows_at) {
        EXPECT_TRUE(row.retained);
        EXPECT_EQ(row.retained, row.alpha >= alpha);
    }

    LifelongState above = state;
    config.prune_threshold = std::nextafter(alpha, 1.0);
    const auto rows_above = prune_task(above, 1, config);
    int pruned = 0;
    for (const auto& row : rows_above) {
        EXPECT_EQ(row.retained, row.alpha >= config.prune_threshold);
        pruned += row.retained ? 0 : 1;
    }
    EXPECT_GE(pruned, 1);
}

TEST(PruneTask, RemovalChangesTrainingWeightByAlphaTimesExpert)
{
    LifelongState state = tiny_state();
    TrainConfig config = tiny_train(6);
    config.prune_threshold = 0.0;
    train_task(state, tiny_tasks(1)[0], config, 7);
    const Mat& c = state.bank.at(1);
    for (int l = 0; l < kMoELayers; ++l) {
        const auto& layer = state.model.layer(l);
        const auto sel = route(layer, c, 1, config.k, SelectMode::kTrain);
        const Mat full = compose_weight(layer.key, sel);
        MoELayer pruned = layer;
        pruned.prune_last();
        SelectionResult kept = sel;
        kept.indices.pop_back();
        kept.alphas.conservativeResize(kept.alphas.size() - 1);
        const Mat without = compose_weight(pruned.key, kept);
        const double expected = sel.alpha_of(1) * layer.key.experts[1].dense().norm();
        EXPECT_NEAR((full - without).norm(), expected, 1e-12);
    }
}

TEST(RunSequence, SingleTaskMatchesTrainTask)
{
    const auto task = tiny_tasks(1)[0];
    LifelongState a = tiny_state();
    LifelongState b = tiny_state();
    run_sequence(a, {task}, tiny_train(5), 40);
    train_task(b, task, tiny_train(5), derive_seed(40, 1));
    EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
}

TEST(RunSequence, DeterministicCheckpoints)
{
    const auto tasks = tiny_tasks(3);
    LifelongState a = tiny_state();
    LifelongState b = tiny_state();
    run_sequence(a, tasks, tiny_train(5), 41);
    run_sequence(b, tasks, tiny_train(5), 41);
    EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
}

TEST(RunSequence, PruningNeverAddsParameters)
{
    const auto tasks = tiny_tasks(4);
    auto added = [&](double p) {
        LifelongState s = tiny_state();
        TrainConfig config = tiny_train(8);
        config.prune_threshold = p;
        long last = -1;
        bool monotone = true;
        run_sequence(s, tasks, config, 42, [&](const LifelongState& st, const TaskReport&) {
            long experts = 0;
            for (const auto& layer : st.model.layers())
                experts += layer.expert_parameter_count();
            monotone = monotone && experts >= last;
            last = experts;
        });
        EXPECT_TRUE(monotone);
        return param_breakdown(s);
    };
    const auto with = added(0.15);
    const auto without = added(0.0);
    EXPECT_LE(with.added(), without.added());
    EXPECT_LE(with.total(), without.total());
}

TEST(Replay, OldConceptSamplesBitStable)
{
    LifelongState state = tiny_state();
    const auto tasks = tiny_tasks(3);
    SamplerOptions o{6, 3.0, 0.0, true};
    Image first;
    std::array<SelectionResult, kMoELayers> routing;
    run_sequence(state, tasks, tiny_train(5), 43, [&](const LifelongState& s, const TaskReport& r) {
        if (r.task == 1) {
            routing = s.task(1).routing;
            first = sample_prompt(s, s.task(1).prompt_ids, o, 1001, &routing);
        }
    });
    EXPECT_EQ(sample_prompt(state, state.task(1).prompt_ids, o, 1001, &state.task(1).routing), first);
    EXPECT_EQ(sample_prompt(state, state.task(1).prompt_ids, o, 1001, &routing), first);
}
