#pragma once

// Small fixtures shared by the unit tests and the acceptance binary.
#include "r2moe/eval_harness.hpp"
#include "r2moe/lifelong_trainer.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace r2moe::testing {

inline ModelDims tiny_dims()
{
    ModelDims d;
    d.image_size = 16;
    d.patch = 4;
    d.width = 16;
    d.time_dim = 8;
    d.d_in = 8;
    d.rank = 2;
    d.gate_hidden = 8;
    return d;
}

inline ScheduleParams tiny_schedule()
{
    ScheduleParams s;
    s.steps = 20;
    return s;
}

/// Briefly pretrained tiny state with auxiliary experts attached.
inline LifelongState tiny_state(std::uint64_t seed = 3, int capacity = 12, int pretrain_iterations = 5)
{
    LifelongState s = initial_state(tiny_dims(), tiny_schedule(), capacity, seed);
    PretrainConfig pc;
    pc.iterations = pretrain_iterations;
    pc.batch_size = 2;
    pretrain_backbone(s, pc, derive_seed(seed, 99));
    return s;
}

inline std::vector<TaskSpec> tiny_tasks(int count, std::uint64_t seed = 5)
{
    std::vector<TaskSpec> tasks;
    for (const auto& c : gen_concepts(count, seed, tiny_dims().image_size))
        tasks.push_back(TaskSpec::from_concept(c));
    return tasks;
}

inline TrainConfig tiny_train(int iterations = 6)
{
    TrainConfig t;
    t.iterations = iterations;
    return t;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name)
{
    const auto p = std::filesystem::temp_directory_path() / ("r2moe_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace r2moe::testing
