#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fedtrl/eval.hpp"

#include <cmath>
#include <random>

using namespace fedtrl;
using data::Vector;

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector x(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double d : v) x(i++) = d;
    return x;
}

}  // namespace

TEST_CASE("pointwise errors") {
    CHECK(eval::mse(vec({1, 2}), vec({1, 2})) == doctest::Approx(0.0));
    CHECK(eval::mse(vec({0, 2}), vec({1, 1})) == doctest::Approx(1.0));
    CHECK(eval::mae(vec({0, 2}), vec({1, 1})) == doctest::Approx(1.0));
    // Paired permutation invariance.
    CHECK(eval::mse(vec({0, 2}), vec({1, 1})) == eval::mse(vec({2, 0}), vec({1, 1})));
}

TEST_CASE("crps: exact two-sample case and bounds") {
    std::vector<Vector> collapsed = {vec({1.0}), vec({1.0})};
    CHECK(eval::crps_from_samples(collapsed, vec({1.0})) == doctest::Approx(0.0));

    std::vector<Vector> pair = {vec({0.0}), vec({2.0})};
    CHECK(std::abs(eval::crps_from_samples(pair, vec({1.0})) - 0.5) < 1e-12);

    std::mt19937_64 rng(3);
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<Vector> random;
    double mean_abs = 0.0;
    for (int i = 0; i < 20; ++i) {
        random.push_back(vec({dist(rng)}));
        mean_abs += std::abs(random.back()(0) - 0.3);
    }
    mean_abs /= 20.0;
    double crps = eval::crps_from_samples(random, vec({0.3}));
    CHECK(crps <= mean_abs + 1e-12);
    CHECK(crps >= 0.0);

    CHECK_THROWS_AS(eval::crps_from_samples({vec({1.0})}, vec({1.0})), std::invalid_argument);
}

TEST_CASE("crps estimator converges in the sample count") {
    // One fixed Student-t forecast distribution, represented at two sample
    // resolutions by evenly spaced order statistics of a common draw pool.
    // The all-pairs estimator (pinned by the exact two-sample case above)
    // carries an O(1/m) bias, so convergence is checked at m=100 vs m=1000.
    std::mt19937_64 rng(11);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::chi_squared_distribution<double> chi2(5.0);
    std::vector<double> pool(100000);
    for (double& v : pool) v = 0.4 + 0.9 * (normal(rng) / std::sqrt(chi2(rng) / 5.0));
    std::sort(pool.begin(), pool.end());

    auto subsample = [&](int m) {
        std::vector<Vector> out;
        for (int i = 0; i < m; ++i) {
            std::size_t idx = static_cast<std::size_t>((i + 0.5) / m * pool.size());
            out.push_back(vec({pool[idx]}));
        }
        return out;
    };
    double small = eval::crps_from_samples(subsample(100), vec({0.2}));
    double large = eval::crps_from_samples(subsample(1000), vec({0.2}));
    CHECK(std::abs(small - large) / large < 0.05);

    // Symmetric in sample order.
    std::vector<Vector> fwd = subsample(50);
    std::vector<Vector> rev(fwd.rbegin(), fwd.rend());
    CHECK(eval::crps_from_samples(fwd, vec({0.2})) ==
          doctest::Approx(eval::crps_from_samples(rev, vec({0.2}))).epsilon(1e-13));
}

TEST_CASE("mase against the seasonal-naive reference") {
    // Periodic truth with period 4; the seasonal-naive forecast repeats the
    // last season and scores exactly 1 by construction.
    int season = 4;
    Vector insample(12), y(4), yhat(4);
    for (int t = 0; t < 12; ++t) insample(t) = std::sin(2.0 * M_PI * t / season) + 0.1 * (t % 3);
    for (int t = 0; t < 4; ++t) {
        y(t) = std::sin(2.0 * M_PI * (12 + t) / season) + 0.1 * ((12 + t) % 3);
        yhat(t) = insample(8 + t);  // value one season earlier
    }
    double denom = 0.0;
    for (int t = season; t < 12; ++t) denom += std::abs(insample(t) - insample(t - season));
    denom /= (12 - season);
    double expected = (y - yhat).cwiseAbs().mean() / denom;
    CHECK(eval::mase(y, yhat, insample, season) == doctest::Approx(expected).epsilon(1e-12));

    CHECK(eval::mase(y, y, insample, season) == doctest::Approx(0.0));
    // Scale invariance under joint scaling.
    CHECK(eval::mase(3.0 * y, 3.0 * yhat, 3.0 * insample, season) ==
          doctest::Approx(eval::mase(y, yhat, insample, season)).epsilon(1e-12));

    CHECK_THROWS_AS(eval::mase(y, yhat, Vector::Ones(12), season), std::invalid_argument);
}

TEST_CASE("mase equals one for a seasonal-naive forecast of a seasonal walk") {
    // In-sample seasonal differences all have magnitude c, and the forecast
    // errors are also c, so the ratio is exactly 1.
    int season = 3;
    Vector insample(9);
    for (int t = 0; t < 9; ++t) insample(t) = 0.5 * t;  // diff over a season = 1.5
    Vector y(3), yhat(3);
    for (int t = 0; t < 3; ++t) {
        y(t) = 0.5 * (9 + t);
        yhat(t) = insample(6 + t);  // seasonal-naive continuation, error 1.5
    }
    CHECK(eval::mase(y, yhat, insample, season) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("weighted quantile loss") {
    std::vector<Vector> collapsed(5, vec({2.0, -1.0}));
    CHECK(eval::weighted_quantile_loss(collapsed, vec({2.0, -1.0})) == doctest::Approx(0.0));

    std::mt19937_64 rng(7);
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<Vector> random;
    for (int i = 0; i < 30; ++i) random.push_back(vec({dist(rng), dist(rng)}));
    CHECK(eval::weighted_quantile_loss(random, vec({0.4, -0.2})) >= 0.0);

    CHECK_THROWS_AS(eval::weighted_quantile_loss(collapsed, vec({0.0, 0.0})), std::invalid_argument);
    CHECK(eval::default_quantiles().size() == 9);
    CHECK(eval::default_quantiles().front() == doctest::Approx(0.1));
    CHECK(eval::default_quantiles().back() == doctest::Approx(0.9));
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

data::FederationDataset small_federation() {
    data::FederationSpec spec;
    spec.context_len = 16;
    spec.horizon = 8;
    spec.unseen_windows = 3;
    data::ClientSpec c;
    c.train_windows = 4;
    c.heldout_windows = 3;
    data::SubdomainGen g;
    g.frequency = 0.1;
    c.subdomains = {g};
    spec.clients = {c, c};
    spec.unseen = c;
    return data::generate_synthetic_federation(spec, 3);
}

}  // namespace

TEST_CASE("evaluate produces a deterministic grid of finite metrics") {
    model::ModelParams params = model::init_params(small_config(), 5);
    data::FederationDataset fed = small_federation();
    diffusion::NoiseSchedule sched = diffusion::build_noise_schedule(50, diffusion::ScheduleKind::cosine);
    eval::EvalConfig cfg;
    cfg.horizons = {4, 8};
    cfg.sample_count = 4;
    cfg.mase_season = 4;
    cfg.seed = 9;

    eval::MetricsReport a = eval::evaluate(params, fed, eval::Protocol::in_domain, sched, cfg);
    CHECK(a.entries.size() == 4);  // 2 clients x 2 horizons
    CHECK(a.entries.count("client0/h4") == 1);
    CHECK(a.entries.count("client1/h8") == 1);
    for (const auto& [key, metrics] : a.entries) {
        CHECK(metrics.count("mse") == 1);
        CHECK(metrics.count("mae") == 1);
        CHECK(metrics.count("mase") == 1);
        for (const auto& [name, v] : metrics) CHECK(std::isfinite(v));
    }
    CHECK(a.aggregate.count("mse") == 1);

    eval::MetricsReport b = eval::evaluate(params, fed, eval::Protocol::in_domain, sched, cfg);
    CHECK(a.to_csv() == b.to_csv());

    eval::MetricsReport z = eval::evaluate(params, fed, eval::Protocol::zero_shot, sched, cfg);
    CHECK(z.entries.count("unseen/h8") == 1);
    CHECK(z.entries.size() == 2);

    eval::MetricsReport p = eval::evaluate(params, fed, eval::Protocol::probabilistic, sched, cfg);
    CHECK(p.entries.at("client0/h4").count("crps") == 1);
    CHECK(p.entries.at("client0/h4").count("wql") == 1);

    data::FederationDataset empty = fed;
    empty.unseen_domain.clear();
    CHECK_THROWS_AS(eval::evaluate(params, empty, eval::Protocol::zero_shot, sched, cfg),
                    std::invalid_argument);
}

TEST_CASE("report serialization carries the grid") {
    model::ModelParams params = model::init_params(small_config(), 7);
    data::FederationDataset fed = small_federation();
    diffusion::NoiseSchedule sched = diffusion::build_noise_schedule(50, diffusion::ScheduleKind::cosine);
    eval::EvalConfig cfg;
    cfg.horizons = {4};
    cfg.sample_count = 4;
    cfg.mase_season = 4;
    eval::MetricsReport r = eval::evaluate(params, fed, eval::Protocol::in_domain, sched, cfg);

    nlohmann::json j = r.to_json();
    CHECK(j.contains("entries"));
    CHECK(j.contains("aggregate"));
    CHECK(j.at("entries").contains("client0/h4"));

    std::string csv = r.to_csv();
    CHECK(csv.find("client0/h4") != std::string::npos);
    CHECK(csv.find("mse") != std::string::npos);
}
