#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fedtrl/model.hpp"

#include <cmath>
#include <random>

using namespace fedtrl;
using num::Matrix;

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
    cfg.subdomain_count = 2;
    cfg.classifier_hidden = 8;
    return cfg;
}

Matrix random_patches(int n, int p, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix m(n, p);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < p; ++j) m(i, j) = dist(rng);
    return m;
}

}  // namespace

TEST_CASE("embedding has token shape and active positions") {
    model::ModelParams params = model::init_params(small_config(), 1);
    Matrix patches = random_patches(5, 4, 2);

    num::Tape tape;
    model::ParamVars pv = model::make_param_vars(tape, params);
    num::Var tokens = model::embed_patches(tape, pv, patches);
    CHECK(tape.value(tokens).rows() == 5);
    CHECK(tape.value(tokens).cols() == 8);

    // Zero projection: tokens collapse onto the positional table.
    model::ModelParams zeroed = params;
    zeroed.tensors["encoder/embed_w"].setZero();
    num::Tape tape2;
    model::ParamVars pv2 = model::make_param_vars(tape2, zeroed);
    num::Var tok2 = model::embed_patches(tape2, pv2, patches);
    CHECK(tape2.value(tok2) == zeroed.tensors["encoder/pos"].topRows(5));

    // Positions make patch order matter.
    Matrix swapped = patches;
    swapped.row(0).swap(swapped.row(1));
    num::Tape tape3;
    model::ParamVars pv3 = model::make_param_vars(tape3, params);
    num::Var tok3 = model::embed_patches(tape3, pv3, swapped);
    CHECK((tape.value(tokens) - tape3.value(tok3)).cwiseAbs().maxCoeff() > 1e-8);
}

TEST_CASE("encoder is causal") {
    model::ModelParams params = model::init_params(small_config(), 3);
    Matrix patches = random_patches(6, 4, 4);
    int j = 3;  // perturbed patch

    auto run = [&](const Matrix& p) {
        num::Tape tape;
        model::ParamVars pv = model::make_param_vars(tape, params);
        return tape.value(model::encode(tape, pv, model::embed_patches(tape, pv, p)));
    };
    Matrix base = run(patches);
    Matrix bumped = patches;
    bumped(j, 1) += 1.0;
    Matrix pert = run(bumped);

    for (int i = 0; i < j; ++i) CHECK(base.row(i) == pert.row(i));  // bitwise
    CHECK((base.row(j) - pert.row(j)).cwiseAbs().maxCoeff() > 0.0);

    // A single token encodes on its own.
    Matrix one = run(patches.topRows(1));
    CHECK(one.rows() == 1);
}

TEST_CASE("decoder is shifted-causal: a patch never sees its own clean row") {
    model::ModelParams params = model::init_params(small_config(), 5);
    Matrix clean = random_patches(5, 4, 6);
    Matrix noisy = random_patches(5, 4, 7);

    auto run = [&](const Matrix& cl) {
        num::Tape tape;
        model::ParamVars pv = model::make_param_vars(tape, params);
        num::Var H = model::encode(tape, pv, model::embed_patches(tape, pv, cl));
        num::Var q = model::embed_noisy_patches(tape, pv, noisy);
        return tape.value(model::decode_denoise(tape, pv, q, H));
    };
    Matrix base = run(clean);
    int j = 2;
    Matrix bumped = clean;
    bumped(j, 0) += 1.0;
    Matrix pert = run(bumped);
    // H rows >= j change; decoder rows <= j only see H rows < their index.
    for (int i = 0; i <= j; ++i) CHECK(base.row(i) == pert.row(i));
    CHECK((base.row(j + 1) - pert.row(j + 1)).cwiseAbs().maxCoeff() > 0.0);

    // Query row 0 with no offset sees only the start token, not H row 0.
    Matrix pert0 = run([&] {
        Matrix c = clean;
        c(0, 0) += 1.0;
        return c;
    }());
    CHECK(base.row(0) == pert0.row(0));
}

TEST_CASE("heads project to patch length") {
    model::ModelConfig cfg = small_config();
    model::ModelParams params = model::init_params(cfg, 8);
    Matrix clean = random_patches(3, 4, 9);

    num::Tape tape;
    model::ParamVars pv = model::make_param_vars(tape, params);
    num::Var H = model::encode(tape, pv, model::embed_patches(tape, pv, clean));
    num::Var zhat = model::decode_denoise(tape, pv, model::embed_noisy_patches(tape, pv, clean), H);
    num::Var point = model::project_point(tape, pv, zhat);
    auto [mu, sigma] = model::project_probabilistic(tape, pv, zhat);

    CHECK(tape.value(point).rows() == 3);
    CHECK(tape.value(point).cols() == 4);
    CHECK(tape.value(mu).rows() == 3);
    CHECK(tape.value(sigma).cols() == 4);
    CHECK(tape.value(sigma).minCoeff() > 0.0);

    // Zero heads: zero point output, sigma at softplus(0) + floor.
    model::ModelParams zeroed = params;
    zeroed.tensors["point_head/w"].setZero();
    zeroed.tensors["prob_head/scale_w"].setZero();
    num::Tape tape2;
    model::ParamVars pv2 = model::make_param_vars(tape2, zeroed);
    num::Var H2 = model::encode(tape2, pv2, model::embed_patches(tape2, pv2, clean));
    num::Var z2 = model::decode_denoise(tape2, pv2, model::embed_noisy_patches(tape2, pv2, clean), H2);
    CHECK(tape2.value(model::project_point(tape2, pv2, z2)).isZero(0.0));
    auto [mu2, sigma2] = model::project_probabilistic(tape2, pv2, z2);
    CHECK(tape2.value(sigma2)(0, 0) == doctest::Approx(std::log(2.0) + 1e-4).epsilon(1e-12));
}

TEST_CASE("prototype pooling is the row mean") {
    num::Tape tape;
    Matrix same = Matrix::Ones(4, 1) * Matrix::Ones(1, 3);
    same.array() *= 2.5;
    CHECK(tape.value(model::pool_prototype(tape, tape.constant(same))) ==
          Matrix::Constant(1, 3, 2.5));

    Matrix h(2, 2);
    h << 1, 3, 3, 5;
    Matrix p = tape.value(model::pool_prototype(tape, tape.constant(h)));
    CHECK(p(0, 0) == doctest::Approx(2.0));
    CHECK(p(0, 1) == doctest::Approx(4.0));

    Matrix hperm(2, 2);
    hperm << 3, 5, 1, 3;
    CHECK(tape.value(model::pool_prototype(tape, tape.constant(hperm))) == p);
}

TEST_CASE("subdomain classifier: lambda only affects gradients") {
    model::ModelParams params = model::init_params(small_config(), 10);
    Matrix proto = random_patches(1, 8, 11);

    auto logits_and_grads = [&](double lambda) {
        num::Tape tape;
        model::ParamVars pv = model::make_param_vars(tape, params);
        num::Var p = tape.param("proto_in", proto);
        num::Var logits = model::classify_subdomain(tape, pv, p, lambda);
        num::Var ce = num::softmax_cross_entropy_mean(logits, {1});
        Matrix lv = tape.value(logits);
        num::GradientSet g = tape.backward(ce);
        return std::pair<Matrix, num::GradientSet>(lv, g);
    };

    auto [l0, g0] = logits_and_grads(0.0);
    auto [l1, g1] = logits_and_grads(1.0);
    auto [lh, gh] = logits_and_grads(0.5);
    CHECK(l0 == l1);  // identity forward

    CHECK(g0.at("proto_in").isZero(0.0));  // stop-gradient at lambda = 0
    CHECK((gh.at("proto_in") - 0.5 * g1.at("proto_in")).cwiseAbs().maxCoeff() < 1e-15);
    // Classifier parameters live above the GRL: untouched by lambda.
    CHECK(g0.at("classifier/w1") == g1.at("classifier/w1"));
    CHECK(g0.at("classifier/w2") == g1.at("classifier/w2"));
}

TEST_CASE("forecast rollout shape, determinism and sample sanity") {
    model::ModelConfig cfg = small_config();
    model::ModelParams params = model::init_params(cfg, 12);
    diffusion::NoiseSchedule sched = diffusion::build_noise_schedule(50, diffusion::ScheduleKind::cosine);

    data::Vector context(16);
    for (int i = 0; i < 16; ++i) context(i) = std::sin(0.3 * i) + 2.0;

    model::ForecastOptions opts;
    std::mt19937_64 rng(5);
    model::ForecastOutput point = model::forecast(context, 4, params, sched, opts, rng);
    CHECK(point.point.size() == 4);  // F = P: a single generation step
    CHECK(point.point.allFinite());

    opts.mode = model::ForecastMode::samples;
    opts.sample_count = 3;
    std::mt19937_64 r1(7), r2(7);
    model::ForecastOutput a = model::forecast(context, 6, params, sched, opts, r1);
    model::ForecastOutput b = model::forecast(context, 6, params, sched, opts, r2);
    REQUIRE(a.samples.size() == 3);
    CHECK(a.point.size() == 6);
    for (int m = 0; m < 3; ++m) CHECK(a.samples[m] == b.samples[m]);

    // Sigma forced to its floor: sample paths hug the point path.
    model::ModelParams tight = params;
    tight.tensors["prob_head/scale_w"].setZero();
    tight.tensors["prob_head/scale_b"].setConstant(-40.0);  // softplus ~ 0
    tight.tensors["prob_head/mu_w"] = tight.tensors["point_head/w"];
    tight.tensors["prob_head/mu_b"] = tight.tensors["point_head/b"];
    std::mt19937_64 r3(9);
    model::ForecastOutput t = model::forecast(context, 4, tight, sched, opts, r3);
    auto [x_norm, stats] = data::instance_normalize(context);
    double sigma_denorm = 1e-4 * stats.std;
    for (const auto& path : t.samples) {
        CHECK((path - t.point).cwiseAbs().maxCoeff() < 5.0 * sigma_denorm);
    }
}

TEST_CASE("encoder partition contains exactly the shareable tensors") {
    model::ModelParams params = model::init_params(small_config(), 13);
    auto enc = params.encoder_tensors();
    CHECK(!enc.empty());
    for (const auto& [name, t] : enc) CHECK(name.rfind("encoder/", 0) == 0);
    CHECK(enc.count("decoder/embed_w") == 0);
    CHECK(enc.count("classifier/w1") == 0);

    // Round trip through set_encoder_tensors.
    model::ModelParams other = model::init_params(small_config(), 14);
    other.set_encoder_tensors(enc);
    for (const auto& [name, t] : enc) CHECK(other.tensors.at(name) == t);
    CHECK(other.tensors.at("point_head/w") != params.tensors.at("point_head/w"));
}
