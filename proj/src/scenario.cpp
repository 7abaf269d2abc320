#include "hfl/scenario.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "hfl/errors.hpp"

namespace hfl {

using nlohmann::json;

void ScenarioConfig::validate() const {
    federation.validate();
    model.validate();
    if (!dataset) {
        if (synthetic.classes < 2) throw ConfigError("classes: must be >= 2");
        if (synthetic.per_class < 1) throw ConfigError("per_class: must be >= 1");
        if (synthetic.vocab_size < synthetic.classes) throw ConfigError("vocab: must be >= classes");
        if (synthetic.seq_len < 1) throw ConfigError("seq_len: must be >= 1");
        if (!(synthetic.separation > 0.0 && synthetic.separation <= 1.0))
            throw ConfigError("separation: must be in (0, 1]");
    }
}

LayerIndexSet parse_index_set(const std::string& text) {
    LayerIndexSet out;
    std::stringstream ss(text);
    std::string part;
    try {
        while (std::getline(ss, part, ',')) {
            if (part.empty()) continue;
            const auto dash = part.find('-');
            if (dash == std::string::npos) {
                out.indices.push_back(std::stoul(part));
            } else {
                const auto lo = std::stoul(part.substr(0, dash));
                const auto hi = std::stoul(part.substr(dash + 1));
                if (hi < lo) throw ConfigError("index: descending range " + part);
                for (auto i = lo; i <= hi; ++i) out.indices.push_back(i);
            }
        }
    } catch (const std::logic_error&) {
        throw ConfigError("index: cannot parse '" + text + "'");
    }
    return out;
}

std::string format_index_set(const LayerIndexSet& index) {
    std::string out;
    const auto& v = index.indices;
    for (std::size_t i = 0; i < v.size();) {
        std::size_t j = i;
        while (j + 1 < v.size() && v[j + 1] == v[j] + 1) ++j;
        if (!out.empty()) out += ',';
        out += std::to_string(v[i]);
        if (j > i) out += '-' + std::to_string(v[j]);
        i = j + 1;
    }
    return out;
}

json to_json(const ScenarioConfig& c) {
    const auto& f = c.federation;
    json j;
    if (c.dataset) {
        j["dataset"] = {{"path", c.dataset->string()},
                        {"tokens_field", c.schema.tokens_field},
                        {"label_field", c.schema.label_field},
                        {"max_input_len", c.schema.max_input_len}};
        if (c.schema.vocab_size) j["dataset"]["vocab_size"] = *c.schema.vocab_size;
    } else {
        j["synthetic"] = {{"classes", c.synthetic.classes},
                          {"per_class", c.synthetic.per_class},
                          {"vocab_size", c.synthetic.vocab_size},
                          {"seq_len", c.synthetic.seq_len},
                          {"separation", c.synthetic.separation}};
    }
    j["split"] = {c.split.train, c.split.val, c.split.test};
    j["federation"] = {{"clients", f.num_clients},
                       {"per_round", f.clients_per_round},
                       {"rounds", f.rounds},
                       {"local_epochs", f.local_epochs},
                       {"lr", f.learning_rate},
                       {"batch_size", f.batch_size},
                       {"sigma", f.sigma},
                       {"strategy", to_string(f.strategy)},
                       {"seed", f.seed},
                       {"patience", f.patience},
                       {"min_delta", f.min_delta},
                       {"stop_on_convergence", f.stop_on_convergence},
                       {"vram", f.vram_profile}};
    j["rank_policy"] = {{"alpha", f.rank_policy.alpha},
                        {"beta", f.rank_policy.beta},
                        {"gamma", f.rank_policy.gamma},
                        {"rmin", f.rank_policy.r_min},
                        {"rmax", f.rank_policy.r_max},
                        {"preset", c.weight_preset}};
    j["model"] = {{"depth", c.model.source_depth},
                  {"index", format_index_set(c.model.index)},
                  {"split_point", c.model.split_point},
                  {"d_model", c.model.d_model}};
    return j;
}

ScenarioConfig scenario_from_json(const json& j) {
    ScenarioConfig c;
    try {
        if (j.contains("dataset")) {
            const auto& d = j.at("dataset");
            c.dataset = d.at("path").get<std::string>();
            c.schema.tokens_field = d.value("tokens_field", c.schema.tokens_field);
            c.schema.label_field = d.value("label_field", c.schema.label_field);
            c.schema.max_input_len = d.value("max_input_len", c.schema.max_input_len);
            if (d.contains("vocab_size")) c.schema.vocab_size = d.at("vocab_size").get<int>();
        } else if (j.contains("synthetic")) {
            const auto& s = j.at("synthetic");
            c.synthetic = {s.at("classes").get<int>(), s.at("per_class").get<int>(), s.at("vocab_size").get<int>(),
                           s.at("seq_len").get<int>(), s.at("separation").get<double>()};
        }
        if (j.contains("split")) {
            const auto r = j.at("split").get<std::vector<double>>();
            if (r.size() != 3) throw ConfigError("split: expected three ratios");
            c.split = {r[0], r[1], r[2]};
        }
        if (j.contains("federation")) {
            const auto& f = j.at("federation");
            auto& fc = c.federation;
            fc.num_clients = f.value("clients", fc.num_clients);
            fc.clients_per_round = f.value("per_round", fc.clients_per_round);
            fc.rounds = f.value("rounds", fc.rounds);
            fc.local_epochs = f.value("local_epochs", fc.local_epochs);
            fc.learning_rate = f.value("lr", fc.learning_rate);
            fc.batch_size = f.value("batch_size", fc.batch_size);
            fc.sigma = f.value("sigma", fc.sigma);
            fc.strategy = parse_strategy(f.value("strategy", to_string(fc.strategy)));
            fc.seed = f.value("seed", fc.seed);
            fc.patience = f.value("patience", fc.patience);
            fc.min_delta = f.value("min_delta", fc.min_delta);
            fc.stop_on_convergence = f.value("stop_on_convergence", fc.stop_on_convergence);
            fc.vram_profile = f.value("vram", fc.vram_profile);
        }
        if (j.contains("rank_policy")) {
            const auto& r = j.at("rank_policy");
            auto& p = c.federation.rank_policy;
            p.alpha = r.value("alpha", p.alpha);
            p.beta = r.value("beta", p.beta);
            p.gamma = r.value("gamma", p.gamma);
            p.r_min = r.value("rmin", p.r_min);
            p.r_max = r.value("rmax", p.r_max);
            c.weight_preset = r.value("preset", std::string{});
        }
        if (j.contains("model")) {
            const auto& m = j.at("model");
            c.model.source_depth = m.value("depth", c.model.source_depth);
            if (m.contains("index")) c.model.index = parse_index_set(m.at("index").get<std::string>());
            c.model.split_point = m.value("split_point", c.model.split_point);
            c.model.d_model = m.value("d_model", c.model.d_model);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

Dataset load_scenario_dataset(const ScenarioConfig& config) {
    if (config.dataset) return ingest_dataset(*config.dataset, config.schema);
    const auto& s = config.synthetic;
    return synth_flows(s.classes, s.per_class, s.vocab_size, s.seq_len, s.separation, config.federation.seed);
}

json metrics_json(const ClassificationMetrics& m) {
    return {{"acc", m.acc},
            {"macro_pr", m.macro_pr},
            {"macro_rc", m.macro_rc},
            {"macro_f1", m.macro_f1},
            {"per_class_f1", m.per_class_f1},
            {"confusion", m.confusion.counts}};
}

std::string metrics_record(const RoundMetrics& m, Strategy strategy) {
    json delta = json::object();
    for (const auto& [target, norm] : m.delta_fro) delta[target] = norm;
    return json{{"round", m.round},
                {"strategy", to_string(strategy)},
                {"clients", m.clients},
                {"acc", m.test.acc},
                {"macro_pr", m.test.macro_pr},
                {"macro_rc", m.test.macro_rc},
                {"macro_f1", m.test.macro_f1},
                {"per_class_f1", m.test.per_class_f1},
                {"val_macro_f1", m.val_macro_f1},
                {"delta_fro", delta}}
        .dump();
}

ScenarioResult run_scenario(const ScenarioConfig& config) {
    config.validate();
    Dataset data = load_scenario_dataset(config);
    auto splits = split_dataset(data, config.split, config.federation.seed);

    ScenarioResult result{setup_federation(config.federation, config.model, std::move(splits)), {}, {}, {}, {}};
    result.initial_model = result.state.global;
    const auto strategy = config.federation.strategy;
    run_federation(result.state, [&](const FederationState&, const RoundMetrics& m) {
        result.metrics_lines.push_back(metrics_record(m, strategy));
        result.timing_lines.push_back(json{{"round", m.round}, {"wall_ms", m.wall_ms}}.dump());
    });

    const auto& state = result.state;
    json ranks = json::array();
    for (const auto& r : state.ranks)
        ranks.push_back({{"client_id", r.client_id},
                         {"data_volume", r.resources.data_volume},
                         {"entropy_bits", r.resources.entropy_bits},
                         {"vram_gb", r.resources.vram_gb},
                         {"normalized", r.normalized},
                         {"score", r.score},
                         {"rank", r.rank}});
    json curve = json::array();
    for (const auto& m : state.history) curve.push_back(m.test.macro_f1);
    result.report = {{"config", to_json(config)},
                     {"model", model_checkpoint(state.global).meta.at("manifest")},
                     {"rank_assignments", ranks},
                     {"final_metrics", metrics_json(state.history.back().test)},
                     {"convergence_round", state.converged_round},
                     {"rounds_run", state.history.size()},
                     {"macro_f1_curve", curve}};
    return result;
}

namespace {

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path.string());
    for (const auto& l : lines) out << l << '\n';
}

}  // namespace

void write_artifacts(const ScenarioResult& result, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    write_lines(out_dir / "metrics.jsonl", result.metrics_lines);
    write_lines(out_dir / "timing.jsonl", result.timing_lines);
    write_lines(out_dir / "report.json", {result.report.dump(2)});
    save_model(out_dir / "model.ckpt", result.state.global);
    save_model(out_dir / "model_init.ckpt", result.initial_model);
    write_partition_manifest(out_dir / "partition.jsonl", result.state.shards);
    std::vector<ResourceVector> resources;
    for (const auto& r : result.state.ranks) resources.push_back(r.resources);
    write_resource_manifest(out_dir / "resources.jsonl", resources);
}

SweepAxis parse_sweep_axis(const std::string& name) {
    if (name == "sigma") return SweepAxis::Sigma;
    if (name == "per_round" || name == "per-round") return SweepAxis::PerRound;
    if (name == "weights") return SweepAxis::Weights;
    if (name == "strategy") return SweepAxis::Strategy;
    throw ConfigError("axis: unknown sweep axis '" + name + "' (sigma, per_round, weights, strategy)");
}

std::string to_string(SweepAxis axis) {
    switch (axis) {
        case SweepAxis::Sigma: return "sigma";
        case SweepAxis::PerRound: return "per_round";
        case SweepAxis::Weights: return "weights";
        case SweepAxis::Strategy: return "strategy";
    }
    return "unknown";
}

SweepResult run_sweep(const ScenarioConfig& base, SweepAxis axis, const std::vector<std::string>& values) {
    if (values.size() < 2) throw ConfigError("values: a sweep needs at least two values");
    std::vector<std::string> ordered = values;
    if (axis == SweepAxis::Sigma) {
        try {
            std::stable_sort(ordered.begin(), ordered.end(),
                             [](const auto& a, const auto& b) { return std::stod(a) > std::stod(b); });
        } catch (const std::logic_error&) {
            throw ConfigError("values: sigma values must be numbers");
        }
    }

    SweepResult out;
    json table = json::array();
    json curves = json::object();
    for (const auto& v : ordered) {
        ScenarioConfig cfg = base;
        try {
            switch (axis) {
                case SweepAxis::Sigma: cfg.federation.sigma = std::stod(v); break;
                case SweepAxis::PerRound: cfg.federation.clients_per_round = std::stoi(v); break;
                case SweepAxis::Weights: {
                    const auto preset = rank_policy_preset(v);
                    auto& p = cfg.federation.rank_policy;
                    p.alpha = preset.alpha;
                    p.beta = preset.beta;
                    p.gamma = preset.gamma;
                    cfg.weight_preset = v;
                    break;
                }
                case SweepAxis::Strategy: cfg.federation.strategy = parse_strategy(v); break;
            }
        } catch (const std::logic_error&) {
            throw ConfigError("values: cannot parse '" + v + "' for axis " + to_string(axis));
        }
        auto run = run_scenario(cfg);
        double merged_norm = 0.0;
        for (const auto& [target, d] : run.state.global.merged) merged_norm += frobenius_norm(d);
        const auto& fin = run.state.history.back().test;
        table.push_back({{"value", v},
                         {"acc", fin.acc},
                         {"macro_pr", fin.macro_pr},
                         {"macro_rc", fin.macro_rc},
                         {"macro_f1", fin.macro_f1},
                         {"merged_delta_fro", merged_norm},
                         {"convergence_round", run.state.converged_round}});
        curves[v] = run.report.at("macro_f1_curve");
        out.runs.push_back(std::move(run));
    }
    out.report = {{"axis", to_string(axis)},
                  {"values", ordered},
                  {"base_config", to_json(base)},
                  {"table", table},
                  {"curves", curves}};
    return out;
}

std::vector<std::string> checkpoint_diff(const Checkpoint& a, const Checkpoint& b) {
    std::vector<std::string> out;
    for (const auto& [name, t] : a.tensors) {
        auto it = b.tensors.find(name);
        if (it == b.tensors.end() || !t.bit_equal(it->second)) out.push_back(name);
    }
    for (const auto& [name, t] : b.tensors)
        if (!a.tensors.count(name)) out.push_back(name);
    return out;
}

}  // namespace hfl
