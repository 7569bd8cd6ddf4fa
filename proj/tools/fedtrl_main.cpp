#include "fedtrl/experiment.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using fedtrl::config::ExperimentConfig;

namespace {

constexpr int kExitConfigError = 2;
constexpr int kExitRuntimeError = 3;

struct CommonOpts {
    std::string config_path;
    std::string variant;
    std::string out_dir;
    std::vector<std::string> overrides;
    std::int64_t seed = -1;
    int workers = -1;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required = true) {
    cmd->add_option("--config", opts.config_path, "Config file (.toml or .json)")
        ->required(config_required);
    cmd->add_option("--variant", opts.variant, "Ablation variant: full|no_grl|no_proto|no_dag|fedavg");
    cmd->add_option("--seed", opts.seed, "Override the global seed");
    cmd->add_option("--out", opts.out_dir, "Output directory");
    cmd->add_option("--workers", opts.workers, "Parallel client workers (0 = one per client)");
    cmd->add_option("--set", opts.overrides, "Dotted-path override, e.g. train.batch_size=8")
        ->take_all();
}

// Resolves the output directory: --out beats the config value; FEDTRL_OUT, if
// set, re-roots relative paths.
std::string resolve_out(const std::string& from_cfg, const std::string& from_flag) {
    fs::path out = from_flag.empty() ? from_cfg : from_flag;
    if (const char* root = std::getenv("FEDTRL_OUT"); root && *root && out.is_relative()) {
        out = fs::path(root) / out;
    }
    return out.string();
}

ExperimentConfig load_with_overrides(const CommonOpts& opts) {
    nlohmann::json j = fedtrl::config::load(opts.config_path).to_json();
    for (const std::string& ov : opts.overrides) fedtrl::config::apply_override(j, ov);
    ExperimentConfig cfg = ExperimentConfig::from_json(j);
    if (!opts.variant.empty()) cfg.variant = fedtrl::config::variant_from_string(opts.variant);
    if (opts.seed >= 0) cfg.seed = static_cast<std::uint64_t>(opts.seed);
    if (opts.workers >= 0) cfg.workers = opts.workers;
    cfg.out_dir = resolve_out(cfg.out_dir, opts.out_dir);
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fedtrl: federated time-series pretraining simulator"};
    app.require_subcommand(1);

    CommonOpts run_opts;
    CLI::App* run = app.add_subcommand("run", "Train a federation and evaluate it");
    add_common(run, run_opts);

    CommonOpts eval_opts;
    std::string eval_state;
    CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a saved simulation state");
    add_common(eval_cmd, eval_opts);
    eval_cmd->add_option("--state", eval_state, "Simulation state checkpoint (.ckpt)")->required();

    std::vector<std::string> compare_dirs;
    bool compare_force = false;
    CLI::App* cmp = app.add_subcommand("compare", "Tabulate metrics across run directories");
    cmp->add_option("dirs", compare_dirs, "Run directories")->expected(-1);
    cmp->add_flag("--force", compare_force, "Allow mismatched config hashes / eval grids");

    CommonOpts gen_opts;
    CLI::App* gen = app.add_subcommand("gen-data", "Generate the synthetic federation to CSV");
    add_common(gen, gen_opts);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : kExitConfigError;
    }

    ExperimentConfig cfg;
    try {
        if (run->parsed()) cfg = load_with_overrides(run_opts);
        if (eval_cmd->parsed()) cfg = load_with_overrides(eval_opts);
        if (gen->parsed()) cfg = load_with_overrides(gen_opts);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    }

    try {
        if (run->parsed()) {
            fedtrl::experiment::run_experiment(cfg);
            std::cout << "run complete: " << cfg.out_dir << "\n";
        } else if (eval_cmd->parsed()) {
            auto sim = fedtrl::experiment::Simulation::resume(cfg, eval_state);
            fs::create_directories(cfg.out_dir);
            auto in_dom = evaluate_federation(sim, fedtrl::eval::Protocol::in_domain);
            nlohmann::json j = in_dom.to_json();
            j["config_hash"] = sim.cfg.hash();
            std::ofstream(fs::path(cfg.out_dir) / "metrics_in_domain.json") << j.dump(2) << "\n";
            if (!sim.federation.unseen_domain.empty()) {
                auto zs = evaluate_federation(sim, fedtrl::eval::Protocol::zero_shot);
                nlohmann::json jz = zs.to_json();
                jz["config_hash"] = sim.cfg.hash();
                std::ofstream(fs::path(cfg.out_dir) / "metrics_zero_shot.json") << jz.dump(2) << "\n";
                std::cout << "zero-shot mse: " << zs.aggregate.at("mse") << "\n";
            }
            std::cout << "in-domain mse: " << in_dom.aggregate.at("mse") << "\n";
        } else if (cmp->parsed()) {
            fedtrl::experiment::compare(compare_dirs, std::cout, compare_force);
        } else if (gen->parsed()) {
            auto fed = fedtrl::experiment::build_federation(cfg);
            fs::create_directories(cfg.out_dir);
            fedtrl::data::write_manifest(fed, cfg.seed,
                                         (fs::path(cfg.out_dir) / "dataset.json").string());
            auto dump = [&](const std::vector<fedtrl::data::TimeSeriesWindow>& ws,
                            const std::string& name) {
                std::ofstream csv(fs::path(cfg.out_dir) / name);
                csv << "window,subdomain,pos,value\n";
                for (std::size_t i = 0; i < ws.size(); ++i) {
                    const auto& w = ws[i];
                    for (Eigen::Index t = 0; t < w.context.size(); ++t)
                        csv << i << "," << w.subdomain_label << "," << t << "," << w.context(t) << "\n";
                    for (Eigen::Index t = 0; t < w.target.size(); ++t)
                        csv << i << "," << w.subdomain_label << "," << (w.context.size() + t) << ","
                            << w.target(t) << "\n";
                }
            };
            for (const auto& c : fed.clients)
                dump(c.windows, "client" + std::to_string(c.client_id) + "_train.csv");
            for (const auto& c : fed.held_out)
                dump(c.windows, "client" + std::to_string(c.client_id) + "_heldout.csv");
            dump(fed.unseen_domain, "unseen.csv");
            std::cout << "wrote dataset to " << cfg.out_dir << "\n";
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntimeError;
    }
    return 0;
}
