// hflsim: run and sweep heterogeneous federated LoRA experiments.

#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "hfl/errors.hpp"
#include "hfl/kernels.hpp"
#include "hfl/scenario.hpp"

namespace {

struct Flags {
    std::string dataset;
    bool synthetic = false;
    std::string config_file;
    std::string preset;
    std::string index;
    std::string vram;
    std::optional<double> alpha, beta, gamma;
    std::string out = "hflsim_out";
};

std::vector<double> parse_doubles(const std::string& text, const char* field) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string part;
    try {
        while (std::getline(ss, part, ','))
            if (!part.empty()) out.push_back(std::stod(part));
    } catch (const std::logic_error&) {
        throw hfl::ConfigError(std::string(field) + ": cannot parse '" + text + "'");
    }
    return out;
}

void add_scenario_flags(CLI::App& app, hfl::ScenarioConfig& cfg, Flags& flags, std::string& strategy) {
    auto& fed = cfg.federation;
    auto* ds = app.add_option("--dataset", flags.dataset, "Line-delimited JSON flow records");
    auto* syn = app.add_flag("--synthetic", flags.synthetic, "Generate a synthetic flow dataset (default)");
    ds->excludes(syn);
    app.add_option("--config", flags.config_file, "Scenario JSON (a report's \"config\" echo works)");
    app.add_option("--tokens-field", cfg.schema.tokens_field, "Token array field name");
    app.add_option("--label-field", cfg.schema.label_field, "Label field name");
    app.add_option("--classes", cfg.synthetic.classes, "Synthetic classes");
    app.add_option("--per-class", cfg.synthetic.per_class, "Synthetic records per class");
    app.add_option("--vocab", cfg.synthetic.vocab_size, "Synthetic vocabulary size");
    app.add_option("--seq-len", cfg.synthetic.seq_len, "Synthetic sequence length");
    app.add_option("--separation", cfg.synthetic.separation, "Synthetic class separation in (0,1]");
    app.add_option("--clients", fed.num_clients, "Total clients K");
    app.add_option("--per-round", fed.clients_per_round, "Clients sampled per round");
    app.add_option("--rounds", fed.rounds, "Communication rounds");
    app.add_option("--local-epochs", fed.local_epochs, "Local epochs per round");
    app.add_option("--lr", fed.learning_rate, "Learning rate");
    app.add_option("--batch-size", fed.batch_size, "Mini-batch size");
    app.add_option("--sigma", fed.sigma, "Dirichlet concentration");
    app.add_option("--strategy", strategy, "stacking, naive, zeropad or reference");
    app.add_option("--alpha", flags.alpha, "Rank weight on data volume");
    app.add_option("--beta", flags.beta, "Rank weight on label entropy");
    app.add_option("--gamma", flags.gamma, "Rank weight on compute");
    app.add_option("--preset", flags.preset, "Weight preset: volume, balanced, compute");
    app.add_option("--rmin", fed.rank_policy.r_min, "Minimum LoRA rank (power of two)");
    app.add_option("--rmax", fed.rank_policy.r_max, "Maximum LoRA rank (power of two)");
    app.add_option("--vram", flags.vram, "Comma-separated VRAM budgets in GB");
    app.add_option("--seed", fed.seed, "Master seed");
    app.add_option("--workers", fed.workers, "Client-parallel worker threads");
    app.add_option("--patience", fed.patience, "Convergence patience in rounds (0 disables)");
    app.add_option("--min-delta", fed.min_delta, "Minimum validation F1 improvement");
    app.add_flag("--early-stop", fed.stop_on_convergence, "Stop once converged");
    app.add_option("--depth", cfg.model.source_depth, "Source backbone depth");
    app.add_option("--index", flags.index, "Retained layers, e.g. 0-3,6,7");
    app.add_option("--split-point", cfg.model.split_point, "First classifier block");
    app.add_option("--d-model", cfg.model.d_model, "Hidden width");
    app.add_option("--out", flags.out, "Output directory");
}

// Applies the flags given on top of an optional --config file.
hfl::ScenarioConfig resolve(const CLI::App& app, const hfl::ScenarioConfig& cli, const Flags& flags,
                            const std::string& strategy) {
    hfl::ScenarioConfig cfg = cli;
    if (!flags.config_file.empty()) {
        std::ifstream in(flags.config_file);
        if (!in) throw hfl::ConfigError("config: cannot open " + flags.config_file);
        auto j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded()) throw hfl::ConfigError("config: " + flags.config_file + " is not JSON");
        cfg = hfl::scenario_from_json(j.contains("config") ? j.at("config") : j);
        // Flags given explicitly on the command line win over the file.
        const std::vector<std::pair<const char*, std::function<void(hfl::ScenarioConfig&)>>> copy{
            {"--tokens-field", [&](auto& c) { c.schema.tokens_field = cli.schema.tokens_field; }},
            {"--label-field", [&](auto& c) { c.schema.label_field = cli.schema.label_field; }},
            {"--classes", [&](auto& c) { c.synthetic.classes = cli.synthetic.classes; }},
            {"--per-class", [&](auto& c) { c.synthetic.per_class = cli.synthetic.per_class; }},
            {"--vocab", [&](auto& c) { c.synthetic.vocab_size = cli.synthetic.vocab_size; }},
            {"--seq-len", [&](auto& c) { c.synthetic.seq_len = cli.synthetic.seq_len; }},
            {"--separation", [&](auto& c) { c.synthetic.separation = cli.synthetic.separation; }},
            {"--clients", [&](auto& c) { c.federation.num_clients = cli.federation.num_clients; }},
            {"--per-round", [&](auto& c) { c.federation.clients_per_round = cli.federation.clients_per_round; }},
            {"--rounds", [&](auto& c) { c.federation.rounds = cli.federation.rounds; }},
            {"--local-epochs", [&](auto& c) { c.federation.local_epochs = cli.federation.local_epochs; }},
            {"--lr", [&](auto& c) { c.federation.learning_rate = cli.federation.learning_rate; }},
            {"--batch-size", [&](auto& c) { c.federation.batch_size = cli.federation.batch_size; }},
            {"--sigma", [&](auto& c) { c.federation.sigma = cli.federation.sigma; }},
            {"--rmin", [&](auto& c) { c.federation.rank_policy.r_min = cli.federation.rank_policy.r_min; }},
            {"--rmax", [&](auto& c) { c.federation.rank_policy.r_max = cli.federation.rank_policy.r_max; }},
            {"--seed", [&](auto& c) { c.federation.seed = cli.federation.seed; }},
            {"--patience", [&](auto& c) { c.federation.patience = cli.federation.patience; }},
            {"--min-delta", [&](auto& c) { c.federation.min_delta = cli.federation.min_delta; }},
            {"--early-stop", [&](auto& c) { c.federation.stop_on_convergence = cli.federation.stop_on_convergence; }},
            {"--depth", [&](auto& c) { c.model.source_depth = cli.model.source_depth; }},
            {"--split-point", [&](auto& c) { c.model.split_point = cli.model.split_point; }},
            {"--d-model", [&](auto& c) { c.model.d_model = cli.model.d_model; }},
        };
        for (const auto& [flag, apply] : copy)
            if (app.count(flag) > 0) apply(cfg);
    }
    cfg.federation.workers = cli.federation.workers;
    if (!flags.dataset.empty()) cfg.dataset = flags.dataset;
    if (flags.synthetic) cfg.dataset.reset();
    if (!strategy.empty()) cfg.federation.strategy = hfl::parse_strategy(strategy);
    if (!flags.preset.empty()) {
        const auto p = hfl::rank_policy_preset(flags.preset);
        cfg.federation.rank_policy.alpha = p.alpha;
        cfg.federation.rank_policy.beta = p.beta;
        cfg.federation.rank_policy.gamma = p.gamma;
        cfg.weight_preset = flags.preset;
    }
    if (flags.alpha) cfg.federation.rank_policy.alpha = *flags.alpha;
    if (flags.beta) cfg.federation.rank_policy.beta = *flags.beta;
    if (flags.gamma) cfg.federation.rank_policy.gamma = *flags.gamma;
    if (!flags.index.empty()) cfg.model.index = hfl::parse_index_set(flags.index);
    if (!flags.vram.empty()) cfg.federation.vram_profile = parse_doubles(flags.vram, "vram");
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Heterogeneous federated LoRA simulator for traffic-flow classification"};
    app.require_subcommand(1);

    hfl::ScenarioConfig run_cfg, sweep_cfg;
    Flags run_flags, sweep_flags;
    std::string run_strategy, sweep_strategy;

    auto* run = app.add_subcommand("run", "Run one federated experiment");
    add_scenario_flags(*run, run_cfg, run_flags, run_strategy);

    auto* sweep = app.add_subcommand("sweep", "Run one experiment per value of an axis");
    add_scenario_flags(*sweep, sweep_cfg, sweep_flags, sweep_strategy);
    std::string axis;
    std::vector<std::string> values;
    sweep->add_option("--axis", axis, "sigma, per_round, weights or strategy")->required();
    sweep->add_option("--values", values, "Axis values (comma separated)")->required()->delimiter(',');

    auto* diff = app.add_subcommand("ckpt-diff", "List tensors that differ between two checkpoints");
    std::string ckpt_a, ckpt_b, prefix;
    diff->add_option("a", ckpt_a)->required();
    diff->add_option("b", ckpt_b)->required();
    diff->add_option("--prefix", prefix, "Only compare tensors whose name starts with this");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*run) {
            const auto cfg = resolve(*run, run_cfg, run_flags, run_strategy);
            hfl::kernels::set_threads(cfg.federation.workers);
            const auto result = hfl::run_scenario(cfg);
            hfl::write_artifacts(result, run_flags.out);
            const auto& fin = result.state.history.back().test;
            std::cout << "rounds=" << result.state.history.size() << " acc=" << fin.acc
                      << " macro_f1=" << fin.macro_f1 << " out=" << run_flags.out << "\n";
        } else if (*sweep) {
            const auto cfg = resolve(*sweep, sweep_cfg, sweep_flags, sweep_strategy);
            hfl::kernels::set_threads(cfg.federation.workers);
            const auto result = hfl::run_sweep(cfg, hfl::parse_sweep_axis(axis), values);
            std::filesystem::create_directories(sweep_flags.out);
            std::ofstream(std::filesystem::path(sweep_flags.out) / "sweep.json") << result.report.dump(2) << '\n';
            for (const auto& row : result.report.at("table"))
                std::cout << axis << "=" << row.at("value").get<std::string>() << " acc=" << row.at("acc")
                          << " macro_f1=" << row.at("macro_f1") << "\n";
        } else if (*diff) {
            auto a = hfl::load_checkpoint(ckpt_a);
            auto b = hfl::load_checkpoint(ckpt_b);
            int differing = 0;
            for (const auto& name : hfl::checkpoint_diff(a, b)) {
                if (!name.starts_with(prefix)) continue;
                std::cout << name << "\n";
                ++differing;
            }
            return differing == 0 ? 0 : 1;
        }
    } catch (const hfl::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const hfl::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
