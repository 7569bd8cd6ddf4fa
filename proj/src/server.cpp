#include "fedtrl/server.hpp"

#include <cmath>
#include <future>
#include <stdexcept>

namespace fedtrl::server {

Matrix aggregate_prototypes(const std::vector<client::ClientUpdate>& updates) {
    if (updates.size() < 2) throw std::invalid_argument("aggregate_prototypes: need at least 2 updates");
    std::size_t total = 0;
    for (const auto& u : updates) total += u.n_k;
    if (total == 0) throw std::invalid_argument("aggregate_prototypes: zero total samples");
    Matrix p = Matrix::Zero(updates[0].prototype.rows(), updates[0].prototype.cols());
    for (const auto& u : updates) {
        p += (static_cast<double>(u.n_k) / static_cast<double>(total)) * u.prototype;
    }
    return p;
}

namespace {

num::Var classifier_logits(num::Tape& tape, const std::map<std::string, num::Var>& pv, num::Var x) {
    num::Var h = num::relu(num::add_rowvec(num::matmul(x, pv.at("w1")), pv.at("b1")));
    return num::add_rowvec(num::matmul(h, pv.at("w2")), pv.at("b2"));
}

}  // namespace

ClassifierParams train_domain_classifier(const std::deque<std::vector<Matrix>>& history,
                                         int n_clients, const DagConfig& config, std::uint64_t seed,
                                         const std::optional<ClassifierParams>& warm_init) {
    if (history.empty()) throw std::invalid_argument("train_domain_classifier: empty history");
    for (const auto& round_protos : history) {
        if (static_cast<int>(round_protos.size()) != n_clients) {
            throw std::invalid_argument("train_domain_classifier: a client is missing from history");
        }
    }
    int d = static_cast<int>(history.front().front().cols());
    int hid = config.classifier_hidden;

    ClassifierParams params;
    if (config.warm_start && warm_init.has_value()) {
        params = *warm_init;
    } else {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> dist(0.0, 0.1);
        auto weight = [&](int r, int c) {
            Matrix m(r, c);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) m(i, j) = dist(rng);
            return m;
        };
        params["w1"] = weight(d, hid);
        params["b1"] = Matrix::Zero(1, hid);
        // Zero output layer: the classifier starts exactly uniform, so
        // indistinguishable prototypes keep it uniform instead of inheriting
        // arbitrary init noise into the invariance scores.
        params["w2"] = Matrix::Zero(hid, n_clients);
        params["b2"] = Matrix::Zero(1, n_clients);
    }

    // Flatten the buffer into one training batch per epoch.
    Matrix x(static_cast<Eigen::Index>(history.size()) * n_clients, d);
    std::vector<int> labels;
    Eigen::Index row = 0;
    for (const auto& round_protos : history) {
        for (int k = 0; k < n_clients; ++k) {
            x.row(row++) = round_protos[static_cast<std::size_t>(k)].row(0);
            labels.push_back(k);
        }
    }

    std::map<std::string, Matrix> m, v;
    for (const auto& [name, t] : params) {
        m[name] = Matrix::Zero(t.rows(), t.cols());
        v[name] = Matrix::Zero(t.rows(), t.cols());
    }
    for (int epoch = 0; epoch < config.classifier_epochs; ++epoch) {
        num::Tape tape;
        std::map<std::string, num::Var> pv;
        for (const auto& [name, t] : params) pv[name] = tape.param(name, t);
        num::Var logits = classifier_logits(tape, pv, tape.constant(x, "prototypes"));
        num::Var loss = num::softmax_cross_entropy_mean(logits, labels);
        num::GradientSet grads = tape.backward(loss);
        double bc1 = 1.0 - std::pow(0.9, epoch + 1);
        double bc2 = 1.0 - std::pow(0.999, epoch + 1);
        for (auto& [name, t] : params) {
            const Matrix& g = grads.at(name);
            m[name] = 0.9 * m[name] + 0.1 * g;
            v[name] = 0.999 * v[name] + 0.001 * g.cwiseProduct(g);
            t -= config.classifier_lr *
                 (m[name] / bc1).cwiseQuotient(((v[name] / bc2).cwiseSqrt().array() + 1e-8).matrix());
        }
    }
    return params;
}

Vector invariance_scores(const ClassifierParams& classifier, const std::vector<Matrix>& prototypes) {
    Vector scores(static_cast<Eigen::Index>(prototypes.size()));
    for (std::size_t k = 0; k < prototypes.size(); ++k) {
        num::Tape tape;
        std::map<std::string, num::Var> pv;
        for (const auto& [name, t] : classifier) pv[name] = tape.constant(t, name);
        num::Var logits = classifier_logits(tape, pv, tape.constant(prototypes[k], "prototype"));
        num::Var ce = num::softmax_cross_entropy_mean(logits, {static_cast<int>(k)});
        scores(static_cast<Eigen::Index>(k)) = tape.value(ce)(0, 0);
    }
    return scores;
}

Vector deviation_scores(const std::vector<Matrix>& prototypes, const Matrix& global_prototype) {
    Vector scores(static_cast<Eigen::Index>(prototypes.size()));
    for (std::size_t k = 0; k < prototypes.size(); ++k) {
        scores(static_cast<Eigen::Index>(k)) = (prototypes[k] - global_prototype).squaredNorm();
    }
    return scores;
}

Vector dag_weights(const Vector& invariance, const Vector& deviation, double alpha, double beta,
                   double tau, bool invert_invariance) {
    if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("dag_weights: alpha, beta must be >= 0");
    if (tau <= 0.0) throw std::invalid_argument("dag_weights: tau must be positive");
    double inv_sign = invert_invariance ? 1.0 : -1.0;
    Vector s = inv_sign * alpha * invariance - beta * deviation;
    Vector z = s / tau;
    double m = z.maxCoeff();
    Vector e = (z.array() - m).exp();
    return e / e.sum();
}

std::map<std::string, Matrix> aggregate_encoders(
    const std::vector<std::map<std::string, Matrix>>& encoders, const Vector& weights) {
    if (encoders.empty()) throw std::invalid_argument("aggregate_encoders: no encoders");
    if (weights.size() != static_cast<Eigen::Index>(encoders.size())) {
        throw std::invalid_argument("aggregate_encoders: one weight per encoder required");
    }
    std::map<std::string, Matrix> out;
    for (const auto& [name, t] : encoders.front()) out[name] = weights(0) * t;
    for (std::size_t k = 1; k < encoders.size(); ++k) {
        for (auto& [name, acc] : out) {
            auto it = encoders[k].find(name);
            if (it == encoders[k].end() || it->second.rows() != acc.rows() ||
                it->second.cols() != acc.cols()) {
                throw std::invalid_argument("aggregate_encoders: shape mismatch for '" + name + "'");
            }
            acc += weights(static_cast<Eigen::Index>(k)) * it->second;
        }
    }
    return out;
}

std::map<std::string, Matrix> fedavg_aggregate(
    const std::vector<std::map<std::string, Matrix>>& encoders, const std::vector<std::size_t>& n) {
    if (encoders.size() != n.size()) throw std::invalid_argument("fedavg_aggregate: count mismatch");
    double total = 0.0;
    for (std::size_t nk : n) total += static_cast<double>(nk);
    if (total == 0.0) throw std::invalid_argument("fedavg_aggregate: zero total samples");
    Vector w(static_cast<Eigen::Index>(n.size()));
    for (std::size_t k = 0; k < n.size(); ++k) w(static_cast<Eigen::Index>(k)) = n[k] / total;
    return aggregate_encoders(encoders, w);
}

ServerState make_server(const model::ModelConfig& config, std::uint64_t seed) {
    ServerState state;
    model::ModelParams ref = model::init_params(config, seed);
    state.global_encoder = ref.encoder_tensors();
    return state;
}

AggregationReport run_round(ServerState& state, std::vector<client::ClientState>& clients,
                            const RoundConfig& config) {
    int round = state.round + 1;
    std::size_t K = clients.size();
    std::vector<client::ClientUpdate> updates(K);
    std::vector<client::LocalLossTrace> traces(K);

    int workers = config.workers > 0 ? config.workers : static_cast<int>(K);
    if (workers <= 1) {
        for (std::size_t k = 0; k < K; ++k) {
            updates[k] = client::local_update(clients[k], state.global_encoder, state.global_prototype,
                                              round, config.local, &traces[k]);
        }
    } else {
        std::vector<std::future<void>> futures;
        for (std::size_t k = 0; k < K; ++k) {
            futures.push_back(std::async(std::launch::async, [&, k] {
                updates[k] = client::local_update(clients[k], state.global_encoder,
                                                  state.global_prototype, round, config.local, &traces[k]);
            }));
        }
        for (auto& f : futures) f.get();  // rethrows the first client failure
    }

    Matrix p_g = aggregate_prototypes(updates);

    std::vector<Matrix> prototypes;
    std::vector<std::map<std::string, Matrix>> encoders;
    std::vector<std::size_t> counts;
    for (const auto& u : updates) {
        prototypes.push_back(u.prototype);
        encoders.push_back(u.encoder);
        counts.push_back(u.n_k);
    }

    state.prototype_history.push_back(prototypes);
    while (static_cast<int>(state.prototype_history.size()) > config.dag.history_rounds) {
        state.prototype_history.pop_front();
    }

    AggregationReport report;
    report.round = round;
    report.global_prototype = p_g;
    report.client_losses = traces;

    if (config.aggregation == Aggregation::dag) {
        ClassifierParams fd = train_domain_classifier(
            state.prototype_history, static_cast<int>(K), config.dag,
            config.seed * 0x51D26AB1ULL + static_cast<std::uint64_t>(round), state.classifier);
        state.classifier = fd;
        report.invariance = invariance_scores(fd, prototypes);
        report.deviation = deviation_scores(prototypes, p_g);
        report.score = (config.dag.invert_invariance ? 1.0 : -1.0) * config.dag.alpha * report.invariance -
                       config.dag.beta * report.deviation;
        report.weight = dag_weights(report.invariance, report.deviation, config.dag.alpha,
                                    config.dag.beta, config.dag.tau, config.dag.invert_invariance);
        state.global_encoder = aggregate_encoders(encoders, report.weight);
    } else {
        double total = 0.0;
        for (std::size_t nk : counts) total += static_cast<double>(nk);
        report.invariance = Vector::Zero(static_cast<Eigen::Index>(K));
        report.deviation = Vector::Zero(static_cast<Eigen::Index>(K));
        report.score = Vector::Zero(static_cast<Eigen::Index>(K));
        report.weight = Vector(static_cast<Eigen::Index>(K));
        for (std::size_t k = 0; k < K; ++k) {
            report.weight(static_cast<Eigen::Index>(k)) = counts[k] / total;
        }
        state.global_encoder = fedavg_aggregate(encoders, counts);
    }

    state.global_prototype = p_g;
    state.round = round;
    return report;
}

}  // namespace fedtrl::server
