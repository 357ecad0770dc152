#include "r2moe/checkpoint.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace r2moe {

namespace {

using nlohmann::json;

json mat_json(const Mat& m)
{
    json data = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            data.push_back(m(i, j));
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

Mat json_mat(const json& j)
{
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const json& data = j.at("data");
    if (rows < 0 || cols < 0 || static_cast<Eigen::Index>(data.size()) != rows * cols)
        throw CheckpointError("matrix payload does not match its shape");
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j2 = 0; j2 < cols; ++j2)
            m(i, j2) = data.at(static_cast<std::size_t>(i * cols + j2)).get<double>();
    return m;
}

json vec_json(const Eigen::Ref<const RowVec>& v)
{
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i)
        a.push_back(v[i]);
    return a;
}

RowVec json_vec(const json& a)
{
    RowVec v(static_cast<Eigen::Index>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i)
        v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
    return v;
}

json gate_json(const GatingNetwork& g)
{
    return {{"hidden_w", mat_json(g.hidden_w)},
            {"hidden_b", vec_json(g.hidden_b)},
            {"out_w", mat_json(g.out_w)},
            {"out_b", vec_json(g.out_b)}};
}

GatingNetwork json_gate(const json& j)
{
    GatingNetwork g;
    g.hidden_w = json_mat(j.at("hidden_w"));
    g.hidden_b = json_vec(j.at("hidden_b"));
    g.out_w = json_mat(j.at("out_w"));
    g.out_b = json_vec(j.at("out_b"));
    if (g.hidden_b.size() != g.hidden_w.cols() || g.out_w.rows() != g.hidden_w.cols() ||
        g.out_b.size() != g.out_w.cols())
        throw CheckpointError("gating network shapes are inconsistent");
    return g;
}

json projection_json(const MoEProjection& p)
{
    json experts = json::array();
    for (const auto& e : p.experts)
        experts.push_back({{"down", mat_json(e.down)},
                           {"up", mat_json(e.up)},
                           {"frozen", e.frozen},
                           {"retained", e.retained},
                           {"owner_task", e.owner_task}});
    return {{"base", mat_json(p.base)}, {"experts", std::move(experts)}};
}

void json_projection(const json& j, MoEProjection& p)
{
    const Mat base = json_mat(j.at("base"));
    if (base.rows() != p.base.rows() || base.cols() != p.base.cols())
        throw CheckpointError("base projection shape mismatch");
    p.base = base;
    p.experts.clear();
    for (const auto& e : j.at("experts")) {
        LowRankExpert x;
        x.down = json_mat(e.at("down"));
        x.up = json_mat(e.at("up"));
        if (x.down.rows() != p.base.rows() || x.up.cols() != p.base.cols() || x.down.cols() != x.up.rows())
            throw CheckpointError("expert shape mismatch");
        x.frozen = e.at("frozen").get<bool>();
        x.retained = e.at("retained").get<bool>();
        x.owner_task = e.at("owner_task").get<int>();
        p.experts.push_back(std::move(x));
    }
}

json selection_json(const SelectionResult& s)
{
    return {{"indices", s.indices}, {"alphas", vec_json(s.alphas.transpose())}};
}

SelectionResult json_selection(const json& j)
{
    SelectionResult s;
    s.indices = j.at("indices").get<std::vector<int>>();
    s.alphas = json_vec(j.at("alphas")).transpose();
    if (s.alphas.size() != static_cast<Eigen::Index>(s.indices.size()))
        throw CheckpointError("selection indices and alphas differ in length");
    return s;
}

json to_json(const LifelongState& s, const std::string& config_json)
{
    json j;
    j["format_version"] = kCheckpointFormatVersion;
    j["backbone_hash"] = hex64(s.backbone_hash);
    const ModelDims& d = s.dims;
    j["dims"] = {{"image_size", d.image_size}, {"channels", d.channels}, {"patch", d.patch},
                 {"width", d.width},           {"time_dim", d.time_dim}, {"d_in", d.d_in},
                 {"rank", d.rank},             {"gate_hidden", d.gate_hidden}};
    j["schedule"] = {{"steps", s.schedule_params.steps},
                     {"beta_start", s.schedule_params.beta_start},
                     {"beta_end", s.schedule_params.beta_end}};
    j["routing"] = {{"k", s.routing.k}, {"dense", s.routing.dense}};
    j["vocabulary"] = {{"base_words", s.vocab.base_words()}, {"concept_capacity", s.vocab.concept_capacity()}};

    json concepts = json::array();
    for (const auto& row : s.table.concept_rows())
        concepts.push_back(vec_json(row));
    std::vector<bool> frozen = s.table.concept_frozen();
    j["token_table"] = {{"base_rows", mat_json(s.table.base_rows())},
                        {"concept_rows", std::move(concepts)},
                        {"concept_frozen", frozen},
                        {"capacity", s.table.capacity()}};

    json bank = json::array();
    for (const auto& [index, c] : s.bank.entries())
        bank.push_back({{"concept", index}, {"embedding", mat_json(c)}});
    j["bank"] = std::move(bank);

    json theta = json::object();
    s.model.theta().for_each([&](const std::string& name, const Mat& m) { theta[name] = mat_json(m); });
    j["theta"] = std::move(theta);

    json layers = json::array();
    for (int l = 0; l < kMoELayers; ++l) {
        const MoELayer& layer = s.model.layer(l);
        layers.push_back({{"name", kLayerNames[static_cast<std::size_t>(l)]},
                          {"key", projection_json(layer.key)},
                          {"value", projection_json(layer.value)},
                          {"gate", gate_json(layer.gate)}});
    }
    j["layers"] = std::move(layers);

    if (s.previous_gates) {
        json prev = json::array();
        for (const auto& g : *s.previous_gates)
            prev.push_back(gate_json(g));
        j["previous_gates"] = std::move(prev);
    } else {
        j["previous_gates"] = nullptr;
    }

    json tasks = json::array();
    for (const auto& t : s.tasks) {
        json routing = json::array();
        json scores = json::array();
        for (int l = 0; l < kMoELayers; ++l) {
            routing.push_back(selection_json(t.routing[static_cast<std::size_t>(l)]));
            scores.push_back(vec_json(t.scores[static_cast<std::size_t>(l)]));
        }
        tasks.push_back({{"index", t.index},
                         {"class_word", t.class_word},
                         {"prompt_ids", t.prompt_ids},
                         {"routing", std::move(routing)},
                         {"scores", std::move(scores)}});
    }
    j["tasks"] = std::move(tasks);

    json ledger = json::array();
    for (const auto& r : s.ledger)
        ledger.push_back({{"task", r.task},
                          {"layer", r.layer},
                          {"alpha", r.alpha},
                          {"retained", r.retained},
                          {"param_delta", r.param_delta}});
    j["prune_ledger"] = std::move(ledger);

    if (config_json.empty()) {
        j["config"] = nullptr;
    } else {
        json cfg = json::parse(config_json);
        if (!cfg.is_object())
            throw CheckpointError("config echo must be a JSON object");
        j["config"] = std::move(cfg);
    }
    return j;
}

LifelongState from_json(const json& j, std::string* config_json)
{
    if (j.at("format_version").get<int>() != kCheckpointFormatVersion)
        throw CheckpointError("unsupported checkpoint format version");
    LifelongState s;
    const json& d = j.at("dims");
    s.dims.image_size = d.at("image_size").get<int>();
    s.dims.channels = d.at("channels").get<int>();
    s.dims.patch = d.at("patch").get<int>();
    s.dims.width = d.at("width").get<int>();
    s.dims.time_dim = d.at("time_dim").get<int>();
    s.dims.d_in = d.at("d_in").get<int>();
    s.dims.rank = d.at("rank").get<int>();
    s.dims.gate_hidden = d.at("gate_hidden").get<int>();
    const json& sc = j.at("schedule");
    s.schedule_params.steps = sc.at("steps").get<int>();
    s.schedule_params.beta_start = sc.at("beta_start").get<double>();
    s.schedule_params.beta_end = sc.at("beta_end").get<double>();
    s.schedule = NoiseSchedule::linear(s.schedule_params.steps, s.schedule_params.beta_start,
                                       s.schedule_params.beta_end);
    s.routing.k = j.at("routing").at("k").get<int>();
    s.routing.dense = j.at("routing").at("dense").get<bool>();
    s.vocab = Vocabulary(j.at("vocabulary").at("base_words").get<std::vector<std::string>>(),
                         j.at("vocabulary").at("concept_capacity").get<int>());

    const json& tt = j.at("token_table");
    std::vector<RowVec> concept_rows;
    for (const auto& row : tt.at("concept_rows"))
        concept_rows.push_back(json_vec(row));
    s.table = TokenEmbeddingTable(json_mat(tt.at("base_rows")), std::move(concept_rows), tt.at("capacity").get<int>());
    s.table.set_frozen_flags(tt.at("concept_frozen").get<std::vector<bool>>());
    if (s.table.d_in() != s.dims.d_in)
        throw CheckpointError("token table width does not match dims.d_in");

    for (const auto& e : j.at("bank"))
        s.bank.snapshot(e.at("concept").get<int>(), json_mat(e.at("embedding")));

    // A fresh denoiser supplies the fixed pooling operators and the target shapes.
    s.model = Denoiser(s.dims, s.schedule, 0);
    const json& theta = j.at("theta");
    std::size_t seen = 0;
    s.model.theta().for_each([&](const std::string& name, Mat& m) {
        const Mat loaded = json_mat(theta.at(name));
        if (loaded.rows() != m.rows() || loaded.cols() != m.cols())
            throw CheckpointError("theta." + name + " shape mismatch");
        m = loaded;
        ++seen;
    });
    if (seen != theta.size())
        throw CheckpointError("theta holds unknown entries");

    const json& layers = j.at("layers");
    if (layers.size() != static_cast<std::size_t>(kMoELayers))
        throw CheckpointError("expected one entry per attention layer");
    for (int l = 0; l < kMoELayers; ++l) {
        const json& lj = layers[static_cast<std::size_t>(l)];
        MoELayer& layer = s.model.layer(l);
        json_projection(lj.at("key"), layer.key);
        json_projection(lj.at("value"), layer.value);
        layer.gate = json_gate(lj.at("gate"));
        if (layer.key.experts.size() != layer.value.experts.size() ||
            static_cast<int>(layer.key.experts.size()) != layer.gate.width())
            throw CheckpointError("layer registries and gating width disagree");
    }

    if (!j.at("previous_gates").is_null()) {
        std::array<GatingNetwork, kMoELayers> prev;
        for (int l = 0; l < kMoELayers; ++l)
            prev[static_cast<std::size_t>(l)] = json_gate(j.at("previous_gates").at(static_cast<std::size_t>(l)));
        s.previous_gates = std::move(prev);
    }

    for (const auto& t : j.at("tasks")) {
        TaskRecord r;
        r.index = t.at("index").get<int>();
        r.class_word = t.at("class_word").get<std::string>();
        r.prompt_ids = t.at("prompt_ids").get<std::vector<int>>();
        for (int l = 0; l < kMoELayers; ++l) {
            r.routing[static_cast<std::size_t>(l)] = json_selection(t.at("routing").at(static_cast<std::size_t>(l)));
            r.scores[static_cast<std::size_t>(l)] = json_vec(t.at("scores").at(static_cast<std::size_t>(l)));
        }
        s.tasks.push_back(std::move(r));
    }

    for (const auto& r : j.at("prune_ledger"))
        s.ledger.push_back({r.at("task").get<int>(), r.at("layer").get<int>(), r.at("alpha").get<double>(),
                            r.at("retained").get<bool>(), r.at("param_delta").get<long>()});

    s.backbone_hash = std::stoull(j.at("backbone_hash").get<std::string>(), nullptr, 16);
    if (config_json)
        *config_json = j.at("config").is_null() ? std::string{} : j.at("config").dump(2) + "\n";
    return s;
}

}  // namespace

std::string serialize_checkpoint(const LifelongState& state, const std::string& config_json)
{
    return to_json(state, config_json).dump(1) + "\n";
}

LifelongState deserialize_checkpoint(const std::string& text, std::string* config_json)
{
    try {
        return from_json(json::parse(text), config_json);
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
    } catch (const std::logic_error& e) {
        throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
    }
}

void save_checkpoint(const std::filesystem::path& path, const LifelongState& state, const std::string& config_json)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    const std::string text = serialize_checkpoint(state, config_json);
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw CheckpointError("cannot write " + path.string());
    out << text;
}

LifelongState load_checkpoint(const std::filesystem::path& path, std::string* config_json)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw CheckpointError("cannot read " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return deserialize_checkpoint(buf.str(), config_json);
}

}  // namespace r2moe
