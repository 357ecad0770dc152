#include "r2moe/config.hpp"

#include <json.hpp>

#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace r2moe {

namespace {

using nlohmann::json;

/// Reads the keys of one JSON object and rejects whatever it did not consume.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object())
            throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }

    std::string key(const std::string& name) const { return path_.empty() ? name : path_ + "." + name; }

    const json* find(const std::string& name)
    {
        seen_.insert(name);
        auto it = j_.find(name);
        return it == j_.end() ? nullptr : &*it;
    }

    void read(const std::string& name, double& out)
    {
        if (const json* v = find(name)) {
            if (!v->is_number())
                throw ConfigError(key(name), "expected a number");
            out = v->get<double>();
        }
    }
    void read(const std::string& name, int& out)
    {
        if (const json* v = find(name)) {
            if (!v->is_number_integer())
                throw ConfigError(key(name), "expected an integer");
            const auto x = v->get<std::int64_t>();
            if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
                throw ConfigError(key(name), "integer out of range");
            out = static_cast<int>(x);
        }
    }
    void read(const std::string& name, std::uint64_t& out)
    {
        if (const json* v = find(name)) {
            if (!v->is_number_unsigned())
                throw ConfigError(key(name), "expected a non-negative integer");
            out = v->get<std::uint64_t>();
        }
    }
    void read(const std::string& name, bool& out)
    {
        if (const json* v = find(name)) {
            if (!v->is_boolean())
                throw ConfigError(key(name), "expected true or false");
            out = v->get<bool>();
        }
    }
    void read(const std::string& name, std::vector<std::string>& out)
    {
        if (const json* v = find(name)) {
            if (!v->is_array())
                throw ConfigError(key(name), "expected an array of strings");
            out.clear();
            for (const auto& item : *v) {
                if (!item.is_string())
                    throw ConfigError(key(name), "expected an array of strings");
                out.push_back(item.get<std::string>());
            }
        }
    }

    template <typename F>
    void child(const std::string& name, F&& f)
    {
        if (const json* v = find(name)) {
            Section s(*v, key(name));
            f(s);
            s.finish();
        }
    }

    void finish() const
    {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw ConfigError(key(it.key()), "unknown key");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void require(bool ok, const std::string& key, const std::string& what)
{
    if (!ok)
        throw ConfigError(key, what);
}

}  // namespace

void RunConfig::validate() const
{
    require(dims.image_size > 0 && dims.patch > 0 && dims.image_size % dims.patch == 0, "model.patch",
            "must be positive and divide model.image_size");
    require(dims.grid() % 2 == 0, "model.patch", "the token grid side must be even");
    require(dims.channels > 0, "model.channels", "must be positive");
    require(dims.width > 0, "model.width", "must be positive");
    require(dims.time_dim > 0 && dims.time_dim % 2 == 0, "model.time_dim", "must be positive and even");
    require(dims.d_in > 0, "model.d_in", "must be positive");
    require(dims.rank > 0, "model.rank", "must be positive");
    require(dims.gate_hidden > 0, "model.gate_hidden", "must be positive");
    require(schedule.steps >= 1, "schedule.steps", "must be >= 1");
    require(schedule.beta_start > 0.0 && schedule.beta_start < 1.0, "schedule.beta_start", "must lie in (0, 1)");
    require(schedule.beta_end >= schedule.beta_start && schedule.beta_end < 1.0, "schedule.beta_end",
            "must lie in [beta_start, 1)");
    require(pretrain.iterations >= 0, "pretrain.iterations", "must be >= 0");
    require(pretrain.batch_size >= 1, "pretrain.batch_size", "must be >= 1");
    require(pretrain.lr > 0.0, "pretrain.lr", "must be positive");
    require(pretrain.null_prompt_prob >= 0.0 && pretrain.null_prompt_prob <= 1.0, "pretrain.null_prompt_prob",
            "must lie in [0, 1]");
    try {
        train.validate();
    } catch (const std::exception& e) {
        throw ConfigError("train", e.what());
    }
    require(concepts.count >= 1 && concepts.count <= 64, "concepts.count", "must lie in [1, 64]");
    require(eval.samples >= 1, "eval.samples", "must be >= 1");
    require(eval.sampler.steps >= 1 && eval.sampler.steps <= schedule.steps, "eval.steps",
            "must lie in [1, schedule.steps]");
    require(eval.sampler.guidance >= 0.0, "eval.guidance", "must be >= 0");
    require(eval.sampler.eta >= 0.0 && eval.sampler.eta <= 1.0, "eval.eta", "must lie in [0, 1]");
    require(guided.gamma_coarse >= 0.0 && guided.gamma_coarse <= 1.0, "guided.gamma_coarse", "must lie in [0, 1]");
    require(guided.gamma_fine >= 0.0 && guided.gamma_fine <= 1.0, "guided.gamma_fine", "must lie in [0, 1]");
    require(guided.stage_ratio >= 0.0 && guided.stage_ratio <= 1.0, "guided.stage_ratio", "must lie in [0, 1]");
    require(fast_iterations >= 1, "fast_iterations", "must be >= 1");
}

TrainConfig RunConfig::effective_train() const
{
    TrainConfig t = train;
    if (fast)
        t.iterations = fast_iterations;
    if (ablations.disable_rdm)
        t.beta = 0.0;
    if (ablations.disable_sae)
        t.dense_routing = true;
    if (ablations.disable_lrer)
        t.prune_threshold = 0.0;
    return t;
}

RunConfig parse_config(const std::string& json_text)
{
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError("<root>", std::string("malformed JSON: ") + e.what());
    }
    RunConfig c;
    Section root(j, "");
    int version = 0;
    if (!j.is_object() || !j.contains("schema_version"))
        throw ConfigError("schema_version", "missing");
    root.read("schema_version", version);
    if (version != kConfigSchemaVersion)
        throw ConfigError("schema_version", "unsupported version " + std::to_string(version) + " (expected " +
                                                std::to_string(kConfigSchemaVersion) + ")");
    root.read("seed", c.seed);
    root.child("model", [&](Section& s) {
        s.read("image_size", c.dims.image_size);
        s.read("channels", c.dims.channels);
        s.read("patch", c.dims.patch);
        s.read("width", c.dims.width);
        s.read("time_dim", c.dims.time_dim);
        s.read("d_in", c.dims.d_in);
        s.read("rank", c.dims.rank);
        s.read("gate_hidden", c.dims.gate_hidden);
    });
    root.child("schedule", [&](Section& s) {
        s.read("steps", c.schedule.steps);
        s.read("beta_start", c.schedule.beta_start);
        s.read("beta_end", c.schedule.beta_end);
    });
    root.child("pretrain", [&](Section& s) {
        s.read("iterations", c.pretrain.iterations);
        s.read("batch_size", c.pretrain.batch_size);
        s.read("lr", c.pretrain.lr);
        s.read("null_prompt_prob", c.pretrain.null_prompt_prob);
    });
    root.child("train", [&](Section& s) {
        s.read("beta", c.train.beta);
        s.read("k", c.train.k);
        s.read("prune_threshold", c.train.prune_threshold);
        s.read("iterations", c.train.iterations);
        s.read("lr_experts", c.train.lr_experts);
        s.read("lr_gating", c.train.lr_gating);
        s.read("lr_token", c.train.lr_token);
        if (const json* v = s.find("optimizer")) {
            if (*v == "adam")
                c.train.optimizer = Optimizer::kAdam;
            else if (*v == "sgd")
                c.train.optimizer = Optimizer::kSgdMomentum;
            else
                throw ConfigError(s.key("optimizer"), "expected \"adam\" or \"sgd\"");
        }
        s.read("momentum", c.train.momentum);
        s.read("adam_beta2", c.train.adam_beta2);
        s.read("max_grad_norm", c.train.max_grad_norm);
        s.read("batch_size", c.train.batch_size);
        s.read("expert_init_scale", c.train.expert_init_scale);
        s.read("concept_init_noise", c.train.concept_init_noise);
    });
    root.child("concepts", [&](Section& s) {
        s.read("count", c.concepts.count);
        s.read("seed", c.concepts.seed);
    });
    root.child("eval", [&](Section& s) {
        s.read("samples", c.eval.samples);
        s.read("seed", c.eval.seed);
        s.read("steps", c.eval.sampler.steps);
        s.read("guidance", c.eval.sampler.guidance);
        s.read("eta", c.eval.sampler.eta);
        s.read("clip_x0", c.eval.sampler.clip_x0);
    });
    root.child("guided", [&](Section& s) {
        s.read("gamma_coarse", c.guided.gamma_coarse);
        s.read("gamma_fine", c.guided.gamma_fine);
        s.read("stage_ratio", c.guided.stage_ratio);
    });
    root.read("sample_prompts", c.sample_prompts);
    root.child("ablations", [&](Section& s) {
        s.read("disable_rdm", c.ablations.disable_rdm);
        s.read("disable_sae", c.ablations.disable_sae);
        s.read("disable_lrer", c.ablations.disable_lrer);
        s.read("disable_hlag", c.ablations.disable_hlag);
    });
    root.read("fast", c.fast);
    root.read("fast_iterations", c.fast_iterations);
    root.finish();
    c.validate();
    return c;
}

RunConfig load_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("<file>", "cannot read " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::string dump_config(const RunConfig& c)
{
    json j = json::object();
    j["schema_version"] = kConfigSchemaVersion;
    j["seed"] = c.seed;
    j["model"] = {{"image_size", c.dims.image_size}, {"channels", c.dims.channels}, {"patch", c.dims.patch},
                  {"width", c.dims.width},           {"time_dim", c.dims.time_dim}, {"d_in", c.dims.d_in},
                  {"rank", c.dims.rank},             {"gate_hidden", c.dims.gate_hidden}};
    j["schedule"] = {{"steps", c.schedule.steps},
                     {"beta_start", c.schedule.beta_start},
                     {"beta_end", c.schedule.beta_end}};
    j["pretrain"] = {{"iterations", c.pretrain.iterations},
                     {"batch_size", c.pretrain.batch_size},
                     {"lr", c.pretrain.lr},
                     {"null_prompt_prob", c.pretrain.null_prompt_prob}};
    const TrainConfig& t = c.train;
    j["train"] = {{"beta", t.beta},
                  {"k", t.k},
                  {"prune_threshold", t.prune_threshold},
                  {"iterations", t.iterations},
                  {"lr_experts", t.lr_experts},
                  {"lr_gating", t.lr_gating},
                  {"lr_token", t.lr_token},
                  {"optimizer", t.optimizer == Optimizer::kAdam ? "adam" : "sgd"},
                  {"momentum", t.momentum},
                  {"adam_beta2", t.adam_beta2},
                  {"max_grad_norm", t.max_grad_norm},
                  {"batch_size", t.batch_size},
                  {"expert_init_scale", t.expert_init_scale},
                  {"concept_init_noise", t.concept_init_noise}};
    j["concepts"] = {{"count", c.concepts.count}, {"seed", c.concepts.seed}};
    j["eval"] = {{"samples", c.eval.samples},
                 {"seed", c.eval.seed},
                 {"steps", c.eval.sampler.steps},
                 {"guidance", c.eval.sampler.guidance},
                 {"eta", c.eval.sampler.eta},
                 {"clip_x0", c.eval.sampler.clip_x0}};
    j["guided"] = {{"gamma_coarse", c.guided.gamma_coarse},
                   {"gamma_fine", c.guided.gamma_fine},
                   {"stage_ratio", c.guided.stage_ratio}};
    j["sample_prompts"] = c.sample_prompts;
    j["ablations"] = {{"disable_rdm", c.ablations.disable_rdm},
                      {"disable_sae", c.ablations.disable_sae},
                      {"disable_lrer", c.ablations.disable_lrer},
                      {"disable_hlag", c.ablations.disable_hlag}};
    j["fast"] = c.fast;
    j["fast_iterations"] = c.fast_iterations;
    return j.dump(2) + "\n";
}

}  // namespace r2moe
