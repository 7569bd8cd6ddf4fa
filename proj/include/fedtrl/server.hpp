#pragma once

// Server side of the round protocol: prototype aggregation, global domain
// classifier, invariance/deviation scores, softmax-weighted encoder
// aggregation (DaG), and the FedAvg baseline.

#include "fedtrl/client.hpp"

#include <deque>
#include <optional>

namespace fedtrl::server {

using num::Matrix;
using Vector = Eigen::VectorXd;

enum class Aggregation { dag, fedavg };

struct DagConfig {
    double alpha = 1.0;
    double beta = 0.5;
    double tau = 1.0;
    bool invert_invariance = false;  // s_k = +alpha l_k - beta d_k instead of the verbatim form
    int history_rounds = 5;          // H: prototype ring buffer depth
    int classifier_epochs = 5;
    double classifier_lr = 5e-4;
    int classifier_hidden = 64;
    bool warm_start = false;         // reuse last round's classifier init
};

struct RoundConfig {
    client::LocalTrainConfig local;
    DagConfig dag;
    Aggregation aggregation = Aggregation::dag;
    std::uint64_t seed = 0;   // global seed, classifier init derives from it
    int workers = 0;          // 0 = one thread per client
};

// Parameters of the global domain classifier f_d.
using ClassifierParams = std::map<std::string, Matrix>;

struct ServerState {
    int round = 0;  // completed rounds
    std::map<std::string, Matrix> global_encoder;
    std::optional<Matrix> global_prototype;
    // Last H rounds of uploaded prototypes; entry r holds one 1 x d prototype
    // per client, indexed by client position.
    std::deque<std::vector<Matrix>> prototype_history;
    std::optional<ClassifierParams> classifier;  // kept only for warm starts
};

struct AggregationReport {
    int round = 0;
    Vector invariance;   // l_k
    Vector deviation;    // d_k
    Vector score;        // s_k pre-softmax
    Vector weight;       // w_k post-softmax (or n_k/n under FedAvg)
    Matrix global_prototype;
    std::vector<client::LocalLossTrace> client_losses;
};

// p_g = sum_k (n_k / n) p_k. Throws if fewer than 2 updates or zero samples.
Matrix aggregate_prototypes(const std::vector<client::ClientUpdate>& updates);

// Fresh-initialized (unless warm-started) MLP trained by cross-entropy on the
// history buffer, then frozen for this round's scoring.
ClassifierParams train_domain_classifier(const std::deque<std::vector<Matrix>>& history,
                                         int n_clients, const DagConfig& config, std::uint64_t seed,
                                         const std::optional<ClassifierParams>& warm_init = std::nullopt);

// Per-client CE of the frozen classifier against the client's own index.
Vector invariance_scores(const ClassifierParams& classifier, const std::vector<Matrix>& prototypes);

Vector deviation_scores(const std::vector<Matrix>& prototypes, const Matrix& global_prototype);

// w = softmax(s / tau) with s_k = -alpha l_k - beta d_k (verbatim form), max
// subtracted for stability. invert flips the sign of the invariance term.
Vector dag_weights(const Vector& invariance, const Vector& deviation, double alpha, double beta,
                   double tau, bool invert_invariance = false);

// Elementwise convex combination of encoder parameter sets.
std::map<std::string, Matrix> aggregate_encoders(
    const std::vector<std::map<std::string, Matrix>>& encoders, const Vector& weights);

std::map<std::string, Matrix> fedavg_aggregate(
    const std::vector<std::map<std::string, Matrix>>& encoders, const std::vector<std::size_t>& n);

// One full round: broadcast, parallel local updates, aggregation, advance.
AggregationReport run_round(ServerState& state, std::vector<client::ClientState>& clients,
                            const RoundConfig& config);

ServerState make_server(const model::ModelConfig& config, std::uint64_t seed);

}  // namespace fedtrl::server
