#pragma once

// Noise schedule and forward corruption x~ = sqrt(abar_t) x + sqrt(1-abar_t) eps.

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string>

namespace fedtrl::diffusion {

using Vector = Eigen::VectorXd;

enum class ScheduleKind { cosine, linear };

ScheduleKind schedule_kind_from_string(const std::string& s);

struct NoiseSchedule {
    int steps = 0;       // T_d
    Vector alpha_bar;    // length T_d + 1, alpha_bar(0) == 1, nonincreasing
};

// cosine: squared-cosine with s = 0.008, clipped to [1e-6, 1].
// linear: alpha_bar_t = prod(1 - beta_i), beta linear in [1e-4, 0.02].
NoiseSchedule build_noise_schedule(int steps, ScheduleKind kind);

// Uniform on 1..T_d (t = 0 excluded so training corruption is never vacuous).
int sample_timestep(std::mt19937_64& rng, int steps);

// Exact elementwise corruption; eps must match x in size, 0 <= t <= T_d.
Vector forward_diffuse(const Vector& x, int t, const Vector& eps, const NoiseSchedule& schedule);

}  // namespace fedtrl::diffusion
