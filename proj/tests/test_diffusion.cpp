#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fedtrl/diffusion.hpp"

#include <random>

using namespace fedtrl;

TEST_CASE("schedules start at alpha_bar = 1") {
    for (auto kind : {diffusion::ScheduleKind::cosine, diffusion::ScheduleKind::linear}) {
        diffusion::NoiseSchedule s = diffusion::build_noise_schedule(100, kind);
        CHECK(s.alpha_bar(0) == doctest::Approx(1.0));
    }
}

TEST_CASE("cosine schedule is nonincreasing and decays below 1e-2 at 1250") {
    diffusion::NoiseSchedule s =
        diffusion::build_noise_schedule(1250, diffusion::ScheduleKind::cosine);
    REQUIRE(s.alpha_bar.size() == 1251);
    for (int t = 1; t <= 1250; ++t) {
        CHECK(s.alpha_bar(t) <= s.alpha_bar(t - 1) + 1e-15);
        CHECK(s.alpha_bar(t) >= 1e-6);
        CHECK(s.alpha_bar(t) <= 1.0);
    }
    CHECK(s.alpha_bar(1250) <= 1e-2);
}

TEST_CASE("linear schedule single step") {
    diffusion::NoiseSchedule s = diffusion::build_noise_schedule(1, diffusion::ScheduleKind::linear);
    CHECK(s.alpha_bar(1) == doctest::Approx(1.0 - 1e-4).epsilon(1e-12));
}

TEST_CASE("timestep sampling is uniform on 1..T_d") {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 100; ++i) CHECK(diffusion::sample_timestep(rng, 1) == 1);

    const int draws = 100000;
    std::vector<int> counts(11, 0);
    for (int i = 0; i < draws; ++i) {
        int t = diffusion::sample_timestep(rng, 10);
        REQUIRE(t >= 1);
        REQUIRE(t <= 10);
        ++counts[static_cast<std::size_t>(t)];
    }
    for (int t = 1; t <= 10; ++t) {
        CHECK(counts[static_cast<std::size_t>(t)] / double(draws) == doctest::Approx(0.1).epsilon(0.05));
    }

    std::mt19937_64 a(9), b(9);
    for (int i = 0; i < 50; ++i) {
        CHECK(diffusion::sample_timestep(a, 1000) == diffusion::sample_timestep(b, 1000));
    }
}

TEST_CASE("forward diffusion endpoints") {
    diffusion::NoiseSchedule s =
        diffusion::build_noise_schedule(50, diffusion::ScheduleKind::cosine);
    diffusion::Vector x(4), eps(4);
    x << 1, -2, 0.5, 3;
    eps << 0.1, 0.2, -0.3, 0.4;
    CHECK(diffusion::forward_diffuse(x, 0, eps, s) == x);

    diffusion::NoiseSchedule degenerate;
    degenerate.steps = 1;
    degenerate.alpha_bar = diffusion::Vector(2);
    degenerate.alpha_bar << 1.0, 0.0;
    CHECK(diffusion::forward_diffuse(x, 1, eps, degenerate) == eps);
}

TEST_CASE("forward diffusion matches the marginal variance") {
    diffusion::NoiseSchedule s =
        diffusion::build_noise_schedule(1250, diffusion::ScheduleKind::cosine);
    int t = 600;
    const int draws = 100000;
    std::mt19937_64 rng(21);
    std::normal_distribution<double> normal(0.0, 1.0);
    diffusion::Vector x = diffusion::Vector::Zero(1);

    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < draws; ++i) {
        diffusion::Vector eps(1);
        eps(0) = normal(rng);
        double v = diffusion::forward_diffuse(x, t, eps, s)(0);
        sum += v;
        sum2 += v * v;
    }
    double mean = sum / draws;
    double var = sum2 / draws - mean * mean;
    CHECK(var == doctest::Approx(1.0 - s.alpha_bar(t)).epsilon(0.01));
}
