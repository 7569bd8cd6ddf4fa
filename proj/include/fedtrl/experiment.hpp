#pragma once

// End-to-end orchestration: build a federation from config, run federated
// rounds, log per-round reports, checkpoint/resume, and evaluate.

#include "fedtrl/config.hpp"

#include <iosfwd>
#include <optional>

namespace fedtrl::experiment {

struct Simulation {
    config::ExperimentConfig cfg;
    data::FederationDataset federation;
    diffusion::NoiseSchedule schedule;
    std::vector<client::ClientState> clients;
    server::ServerState server;

    server::AggregationReport step();  // one federated round

    // Full resumable state (params, optimizer moments, rng streams, history).
    void save_state(const std::string& path) const;
    static Simulation resume(const config::ExperimentConfig& cfg, const std::string& state_path);
};

Simulation make_simulation(const config::ExperimentConfig& cfg);

data::FederationDataset build_federation(const config::ExperimentConfig& cfg);
data::FederationSpec synthetic_spec(const config::FederationConfig& fc);

// Installs the global encoder into a copy of every client model and averages
// eval::evaluate over the client models.
eval::MetricsReport evaluate_federation(const Simulation& sim, eval::Protocol protocol);

// Runs the configured rounds, writing a JSONL round log, checkpoints, metrics
// JSON/CSV and a reproducibility manifest into cfg.out_dir.
void run_experiment(const config::ExperimentConfig& cfg);

// Variant harness: applies the ablation knobs, trains and returns zero-shot
// metrics (no artifacts written).
eval::MetricsReport run_ablation(const config::ExperimentConfig& base, config::Variant variant);

// Aligned comparison table (markdown + relative deltas) across run dirs.
void compare(const std::vector<std::string>& run_dirs, std::ostream& out, bool force = false);

}  // namespace fedtrl::experiment
