#include "fedtrl/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace fedtrl::diffusion {

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "cosine") return ScheduleKind::cosine;
    if (s == "linear") return ScheduleKind::linear;
    throw std::invalid_argument("unknown noise schedule kind '" + s + "'");
}

NoiseSchedule build_noise_schedule(int steps, ScheduleKind kind) {
    if (steps < 1) throw std::invalid_argument("build_noise_schedule: need at least 1 step");
    NoiseSchedule sched;
    sched.steps = steps;
    sched.alpha_bar.resize(steps + 1);
    if (kind == ScheduleKind::cosine) {
        constexpr double s = 0.008;
        auto f = [&](double t) {
            double c = std::cos((t / steps + s) / (1.0 + s) * M_PI / 2.0);
            return c * c;
        };
        double f0 = f(0.0);
        for (int t = 0; t <= steps; ++t) {
            sched.alpha_bar(t) = std::clamp(f(static_cast<double>(t)) / f0, 1e-6, 1.0);
        }
    } else {
        sched.alpha_bar(0) = 1.0;
        double prod = 1.0;
        for (int t = 1; t <= steps; ++t) {
            double beta = steps == 1 ? 1e-4
                                     : 1e-4 + (0.02 - 1e-4) * (t - 1) / static_cast<double>(steps - 1);
            prod *= 1.0 - beta;
            sched.alpha_bar(t) = prod;
        }
    }
    sched.alpha_bar(0) = 1.0;
    return sched;
}

int sample_timestep(std::mt19937_64& rng, int steps) {
    std::uniform_int_distribution<int> dist(1, steps);
    return dist(rng);
}

Vector forward_diffuse(const Vector& x, int t, const Vector& eps, const NoiseSchedule& schedule) {
    if (eps.size() != x.size()) {
        throw std::invalid_argument("forward_diffuse: eps size " + std::to_string(eps.size()) +
                                    " does not match patch size " + std::to_string(x.size()));
    }
    if (t < 0 || t > schedule.steps) {
        throw std::invalid_argument("forward_diffuse: timestep out of range");
    }
    double ab = schedule.alpha_bar(t);
    return std::sqrt(ab) * x + std::sqrt(1.0 - ab) * eps;
}

}  // namespace fedtrl::diffusion
