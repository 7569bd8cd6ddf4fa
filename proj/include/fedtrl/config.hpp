#pragma once

// Experiment configuration: TOML in, validated struct + JSON mirror out.
// Every run artifact embeds the config hash.

#include "fedtrl/client.hpp"
#include "fedtrl/eval.hpp"
#include "fedtrl/server.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace fedtrl::config {

enum class Variant { full, no_grl, no_proto, no_dag, fedavg };

Variant variant_from_string(const std::string& s);
std::string variant_to_string(Variant v);

struct FederationConfig {
    std::string kind = "synthetic";  // "synthetic" | "csv"
    int clients = 4;
    int subdomains = 2;
    int train_windows = 64;
    int heldout_windows = 16;
    int unseen_windows = 32;
    int context_len = 128;
    int horizon = 32;
    // csv mode
    std::vector<std::string> csv_paths;
    std::string csv_column;
    int csv_stride = 1;
};

struct DiffusionConfig {
    int steps = 1250;
    std::string kind = "cosine";
    bool per_patch_timestep = true;
};

struct LossConfig {
    double lambda_dom = 0.1;
    double lambda_align = 0.1;
    double grl_lambda = 1.0;
    double nu = 5.0;
    double warm_frac = 0.4;    // R_warm as a fraction of total rounds
    double anneal_frac = 0.2;  // anneal length as a fraction of total rounds
};

struct TrainConfig {
    int local_epochs = 1;
    int batch_size = 16;
    double learning_rate = 1e-4;
    int proto_samples = 0;
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    int rounds = 60;
    Variant variant = Variant::full;
    std::string out_dir = "runs/out";
    int workers = 0;
    int checkpoint_every = 20;

    FederationConfig federation;
    model::ModelConfig model;
    DiffusionConfig diffusion;
    LossConfig loss;
    server::DagConfig dag;
    TrainConfig train;
    eval::EvalConfig eval;

    void validate() const;  // throws with a field-level message
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    std::string hash() const;  // FNV-1a over the canonical JSON dump
};

// Minimal TOML reader covering the configs this project emits: [section]
// headers, scalar keys (string, int, float, bool) and flat numeric arrays.
nlohmann::json parse_toml(const std::string& text);

ExperimentConfig load(const std::string& path);  // .toml or .json by extension

// Applies "a.b.c=value" style overrides onto the JSON form before validation.
void apply_override(nlohmann::json& j, const std::string& dotted);

// Derived pieces.
losses::WarmupSchedule warmup_schedule(const ExperimentConfig& cfg);
client::LocalTrainConfig local_train_config(const ExperimentConfig& cfg,
                                            const diffusion::NoiseSchedule& schedule);
server::RoundConfig round_config(const ExperimentConfig& cfg,
                                 const diffusion::NoiseSchedule& schedule);

// Variant knob application (no_grl, no_proto, no_dag, fedavg).
ExperimentConfig apply_variant(ExperimentConfig cfg, Variant v);

}  // namespace fedtrl::config
