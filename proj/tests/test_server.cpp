#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fedtrl/server.hpp"

#include <cmath>
#include <random>

using namespace fedtrl;
using num::Matrix;
using server::Vector;

namespace {

client::ClientUpdate make_update(int id, const Matrix& proto, std::size_t n) {
    client::ClientUpdate u;
    u.client_id = id;
    u.prototype = proto;
    u.n_k = n;
    return u;
}

Matrix row2(double a, double b) {
    Matrix m(1, 2);
    m << a, b;
    return m;
}

}  // namespace

TEST_CASE("prototype aggregation is the sample-weighted mean") {
    auto p = server::aggregate_prototypes({make_update(0, row2(1, 0), 5),
                                           make_update(1, row2(0, 1), 5)});
    CHECK(p(0, 0) == doctest::Approx(0.5));
    CHECK(p(0, 1) == doctest::Approx(0.5));

    Matrix four(1, 1), zero(1, 1);
    four << 4.0;
    zero << 0.0;
    auto w = server::aggregate_prototypes({make_update(0, four, 3), make_update(1, zero, 1)});
    CHECK(w(0, 0) == doctest::Approx(3.0));

    auto same = server::aggregate_prototypes({make_update(0, row2(2, 3), 7),
                                              make_update(1, row2(2, 3), 2)});
    CHECK(same(0, 0) == doctest::Approx(2.0));
    CHECK(same(0, 1) == doctest::Approx(3.0));

    CHECK_THROWS_AS(server::aggregate_prototypes({make_update(0, four, 3)}), std::invalid_argument);
    CHECK_THROWS_AS(server::aggregate_prototypes(
                        {make_update(0, four, 0), make_update(1, zero, 0)}),
                    std::invalid_argument);
}

TEST_CASE("dag weights: symmetry and the closed-form two-client case") {
    Vector l3 = Vector::Constant(3, 0.7), d3 = Vector::Constant(3, 0.2);
    Vector w = server::dag_weights(l3, d3, 1.0, 0.5, 1.0);
    for (int k = 0; k < 3; ++k) CHECK(w(k) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    Vector l(2), d(2);
    l << 0.0, std::log(2.0);
    d << 0.0, 0.0;
    Vector w2 = server::dag_weights(l, d, 1.0, 0.0, 1.0);
    CHECK(w2(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(w2(1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    // invert_invariance flips which client the invariance term favors.
    Vector wi = server::dag_weights(l, d, 1.0, 0.0, 1.0, true);
    CHECK(wi(0) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    CHECK_THROWS_AS(server::dag_weights(l, d, 1.0, 0.5, 0.0), std::invalid_argument);
}

TEST_CASE("deviation scores") {
    std::vector<Matrix> protos = {row2(1, 0), row2(0, 0), row2(3, 4)};
    Vector d = server::deviation_scores(protos, row2(0, 0));
    CHECK(d(0) == doctest::Approx(1.0));
    CHECK(d(1) == doctest::Approx(0.0));
    CHECK(d(2) == doctest::Approx(25.0));
    CHECK(d.minCoeff() >= 0.0);
}

TEST_CASE("encoder aggregation: one-hot, uniform and fedavg consistency") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> dist(0.0, 1.0);
    auto enc = [&] {
        std::map<std::string, Matrix> e;
        Matrix m(2, 2);
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) m(i, j) = dist(rng);
        e["encoder/w"] = m;
        return e;
    };
    std::vector<std::map<std::string, Matrix>> encoders = {enc(), enc(), enc()};

    Vector onehot(3);
    onehot << 0, 1, 0;
    CHECK(server::aggregate_encoders(encoders, onehot).at("encoder/w") ==
          encoders[1].at("encoder/w"));

    std::vector<std::map<std::string, Matrix>> same = {encoders[0], encoders[0], encoders[0]};
    Vector skew(3);
    skew << 0.6, 0.3, 0.1;
    CHECK((server::aggregate_encoders(same, skew).at("encoder/w") -
           encoders[0].at("encoder/w")).cwiseAbs().maxCoeff() < 1e-15);

    Vector uniform = Vector::Constant(3, 1.0 / 3.0);
    auto via_w = server::aggregate_encoders(encoders, uniform);
    auto via_n = server::fedavg_aggregate(encoders, {4, 4, 4});
    CHECK(via_w.at("encoder/w") == via_n.at("encoder/w"));

    auto single = server::fedavg_aggregate({encoders[0]}, {9});
    CHECK(single.at("encoder/w") == encoders[0].at("encoder/w"));
}

TEST_CASE("domain classifier separates separable prototypes and stays uniform otherwise") {
    server::DagConfig cfg;
    cfg.classifier_hidden = 16;
    cfg.classifier_epochs = 50;
    cfg.classifier_lr = 5e-2;

    std::deque<std::vector<Matrix>> history;
    for (int r = 0; r < 5; ++r) {
        history.push_back({row2(1.0 + 0.01 * r, 0.0), row2(0.0, 1.0 + 0.01 * r)});
    }
    auto params = server::train_domain_classifier(history, 2, cfg, 7);
    Vector ce = server::invariance_scores(params, {row2(1, 0), row2(0, 1)});
    CHECK(ce.mean() < std::log(2.0));
    CHECK(ce.minCoeff() >= 0.0);

    // Identical prototypes: zero-initialized output layer never moves, so the
    // classifier stays exactly uniform.
    std::deque<std::vector<Matrix>> same;
    for (int r = 0; r < 5; ++r) same.push_back({row2(0.4, 0.6), row2(0.4, 0.6)});
    auto uparams = server::train_domain_classifier(same, 2, cfg, 7);
    Vector uce = server::invariance_scores(uparams, {row2(0.4, 0.6), row2(0.4, 0.6)});
    CHECK(std::abs(uce(0) - std::log(2.0)) < 1e-15);
    CHECK(std::abs(uce(1) - std::log(2.0)) < 1e-15);

    // Fixed seed: identical parameters.
    auto again = server::train_domain_classifier(history, 2, cfg, 7);
    for (const auto& [name, t] : params) CHECK(again.at(name) == t);

    CHECK_THROWS_AS(server::train_domain_classifier({}, 2, cfg, 7), std::invalid_argument);
}

namespace {

model::ModelConfig small_config() {
    model::ModelConfig cfg;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.ffn_dim = 16;
    cfg.patch_len = 4;
    cfg.max_patches = 8;
    cfg.classifier_hidden = 8;
    return cfg;
}

data::FederationDataset small_federation(std::uint64_t seed) {
    data::FederationSpec spec;
    spec.context_len = 16;
    spec.horizon = 4;
    spec.unseen_windows = 1;
    data::ClientSpec c;
    c.train_windows = 6;
    c.heldout_windows = 1;
    data::SubdomainGen a, b;
    a.frequency = 0.1;
    b.frequency = 0.3;
    c.subdomains = {a, b};
    spec.clients = {c, c};
    spec.unseen = c;
    return data::generate_synthetic_federation(spec, seed);
}

server::RoundConfig round_config() {
    server::RoundConfig rc;
    rc.local.local_epochs = 1;
    rc.local.batch_size = 4;
    rc.local.learning_rate = 1e-3;
    rc.local.schedule = diffusion::build_noise_schedule(50, diffusion::ScheduleKind::cosine);
    rc.local.warmup = {0, 1};
    rc.seed = 5;
    rc.workers = 1;  // sequential, so both runs of a pair behave identically
    return rc;
}

}  // namespace

TEST_CASE("a round advances state and produces convex weights") {
    data::FederationDataset fed = small_federation(31);
    std::vector<client::ClientState> clients;
    for (auto& ds : fed.clients) clients.push_back(client::make_client(ds.client_id, ds, small_config(), 5));
    // Two rounds so the history holds enough prototypes to score.
    server::ServerState state = server::make_server(clients[0].params.config, 5);

    server::RoundConfig rc = round_config();
    server::AggregationReport r1 = server::run_round(state, clients, rc);
    CHECK(r1.round == 1);
    CHECK(state.round == 1);
    CHECK(state.global_prototype.has_value());
    CHECK(r1.weight.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r1.weight.minCoeff() > 0.0);
    CHECK(r1.invariance.minCoeff() >= 0.0);
    CHECK(r1.deviation.minCoeff() >= 0.0);

    server::AggregationReport r2 = server::run_round(state, clients, rc);
    CHECK(r2.round == 2);
    CHECK(static_cast<int>(state.prototype_history.size()) == 2);
}

TEST_CASE("fedavg aggregation weighs clients by sample count") {
    data::FederationDataset fed = small_federation(37);
    std::vector<client::ClientState> clients;
    for (auto& ds : fed.clients) clients.push_back(client::make_client(ds.client_id, ds, small_config(), 7));
    server::ServerState state = server::make_server(clients[0].params.config, 7);
    server::RoundConfig rc = round_config();
    rc.aggregation = server::Aggregation::fedavg;
    server::AggregationReport r = server::run_round(state, clients, rc);
    CHECK(r.weight(0) == doctest::Approx(0.5));
    CHECK(r.weight(1) == doctest::Approx(0.5));
    CHECK(r.invariance.isZero(0.0));
}

TEST_CASE("identical clients get uniform weights and a fixed-point aggregation") {
    data::FederationDataset fed = small_federation(41);
    client::ClientState proto_client = client::make_client(0, fed.clients[0], small_config(), 9);
    std::vector<client::ClientState> clients = {proto_client, proto_client};
    clients[1].client_id = 1;

    server::ServerState state = server::make_server(proto_client.params.config, 9);
    server::RoundConfig rc = round_config();
    for (int r = 0; r < 3; ++r) {
        server::AggregationReport rep = server::run_round(state, clients, rc);
        CHECK(rep.weight(0) == doctest::Approx(0.5).epsilon(1e-15));
        CHECK(rep.weight(1) == doctest::Approx(0.5).epsilon(1e-15));
        CHECK(rep.invariance(0) == rep.invariance(1));
    }
    // Both clients marched in lockstep; the average of two identical encoders
    // is that encoder.
    for (const auto& [name, t] : state.global_encoder) {
        CHECK(t == clients[0].params.encoder_tensors().at(name));
    }
}

TEST_CASE("parallel and sequential rounds agree bitwise") {
    auto run = [](int workers) {
        data::FederationDataset fed = small_federation(43);
        std::vector<client::ClientState> clients;
        for (auto& ds : fed.clients)
            clients.push_back(client::make_client(ds.client_id, ds, small_config(), 11));
        server::ServerState state = server::make_server(clients[0].params.config, 11);
        server::RoundConfig rc = round_config();
        rc.workers = workers;
        server::run_round(state, clients, rc);
        server::run_round(state, clients, rc);
        return state.global_encoder;
    };
    auto seq = run(1);
    auto par = run(0);
    for (const auto& [name, t] : seq) CHECK(par.at(name) == t);
}
