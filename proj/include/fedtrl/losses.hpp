#pragma once

// Training objectives: task loss with warm-up, sub-domain adversarial loss,
// prototype alignment and their weighted combination.

#include "fedtrl/numerics.hpp"

#include <vector>

namespace fedtrl::losses {

using num::Matrix;
using num::Tape;
using num::Var;

struct LossWeights {
    double lambda_dom = 0.1;
    double lambda_align = 0.1;
    double grl_lambda = 1.0;
    double nll_beta = 0.0;   // in [0,1], driven by the warm-up schedule
    double nu = 5.0;         // must stay > 2

    void validate() const;
};

struct WarmupSchedule {
    int warm_rounds = 0;     // R_warm: beta == 0 before this round
    int anneal_rounds = 1;   // linear ramp length, beta == 1 afterwards
};

// Mean over points of 1/2 log(pi (nu-2) sigma^2) + (nu+1)/2 log(1 + (y-mu)^2/((nu-2) sigma^2)).
// Gamma-function constants omitted; with fixed nu they are additive constants.
Var student_t_nll(Tape& tape, const Matrix& y, Var mu, Var sigma, double nu);

// MSE of the point head plus beta * student_t_nll.
Var task_loss(Tape& tape, const Matrix& y, Var xhat, Var mu, Var sigma, double nu, double beta);

// Mean cross-entropy over per-sequence prototype logits.
Var domain_loss(Tape& tape, Var logits, const std::vector<int>& labels);

// Squared Euclidean distance; the global prototype enters as a constant, so
// gradient flows to the local prototype only.
Var align_loss(Tape& tape, Var prototype, const Matrix& global_prototype);

Var total_loss(Tape& tape, Var task, Var dom, Var align, const LossWeights& weights);

// 0 before warm_rounds, linear to 1 over anneal_rounds, clamped to [0,1].
double beta_schedule(int round, const WarmupSchedule& schedule);

// Reference value of the paper-form NLL at a single point, for tests.
double student_t_nll_scalar(double y, double mu, double sigma, double nu);

}  // namespace fedtrl::losses
