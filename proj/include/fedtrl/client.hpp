#pragma once

// Client side of the round protocol: local epochs over the combined objective,
// prototype computation, and the encoder-plus-prototype upload.

#include "fedtrl/data.hpp"
#include "fedtrl/diffusion.hpp"
#include "fedtrl/losses.hpp"
#include "fedtrl/model.hpp"

#include <optional>

namespace fedtrl::client {

using num::Matrix;

struct LocalTrainConfig {
    int local_epochs = 1;
    int batch_size = 16;
    double learning_rate = 1e-4;
    losses::LossWeights weights;         // nll_beta here is ignored; the warm-up drives it
    losses::WarmupSchedule warmup;
    diffusion::NoiseSchedule schedule;
    bool per_patch_timestep = true;      // false: one t shared per sequence
    int proto_samples = 0;               // 0 = use every window for the prototype
};

// Adam moment accumulators, one pair per tensor.
struct AdamState {
    std::map<std::string, Matrix> m;
    std::map<std::string, Matrix> v;
    long step = 0;

    void ensure_shapes(const model::ModelParams& params);
    void apply(model::ModelParams& params, const num::GradientSet& grads, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
};

struct ClientState {
    int client_id = 0;
    data::ClientDataset dataset;
    model::ModelParams params;
    AdamState optimizer;
    std::mt19937_64 rng;  // stream disjoint per client
};

ClientState make_client(int client_id, data::ClientDataset dataset, const model::ModelConfig& config,
                        std::uint64_t global_seed);

struct ClientUpdate {
    int client_id = 0;
    std::map<std::string, Matrix> encoder;  // theta_E only
    Matrix prototype;                        // 1 x d
    std::size_t n_k = 0;
};

// Loss components of the last optimizer step, for logging.
struct LocalLossTrace {
    double task = 0.0;
    double dom = 0.0;
    double align = 0.0;
    double total = 0.0;
};

// Overwrites the client's encoder with the broadcast one, runs the configured
// local epochs, then returns the post-training encoder and prototype.
// global_prototype is absent in round 1.
ClientUpdate local_update(ClientState& state, const std::map<std::string, Matrix>& global_encoder,
                          const std::optional<Matrix>& global_prototype, int round,
                          const LocalTrainConfig& config, LocalLossTrace* trace = nullptr);

// Unweighted mean of per-window pooled prototypes over a fixed evaluation pass.
Matrix compute_client_prototype(const data::ClientDataset& dataset, const model::ModelParams& params,
                                int proto_samples = 0);

// Serialized update: encoder-only checkpoint plus a JSON sidecar.
void save_update(const ClientUpdate& update, const std::string& checkpoint_path,
                 const std::string& sidecar_path);

}  // namespace fedtrl::client
