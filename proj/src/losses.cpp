#include "fedtrl/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace fedtrl::losses {

void LossWeights::validate() const {
    if (lambda_dom < 0.0 || lambda_align < 0.0 || grl_lambda < 0.0) {
        throw std::invalid_argument("loss weights must be nonnegative");
    }
    if (nll_beta < 0.0 || nll_beta > 1.0) {
        throw std::invalid_argument("nll_beta must lie in [0,1]");
    }
    if (nu <= 2.0) throw std::invalid_argument("Student-t nu must exceed 2");
}

Var student_t_nll(Tape& tape, const Matrix& y, Var mu, Var sigma, double nu) {
    if (nu <= 2.0) throw std::invalid_argument("student_t_nll: nu must exceed 2");
    const Matrix& mv = tape.value(mu);
    if (y.rows() != mv.rows() || y.cols() != mv.cols()) {
        throw std::invalid_argument("student_t_nll: target shape mismatch");
    }
    if (tape.value(sigma).minCoeff() <= 0.0) {
        throw std::invalid_argument("student_t_nll: sigma must be positive");
    }
    Var yv = tape.constant(y, "target");
    Var sigma2 = num::square(sigma);
    Var resid2 = num::square(num::sub(yv, mu));
    // 1/2 log(pi (nu-2) sigma^2)
    Var first = num::scale(num::log(num::scale(sigma2, M_PI * (nu - 2.0))), 0.5);
    // (nu+1)/2 log(1 + r^2 / ((nu-2) sigma^2))
    Var ratio = num::divide(resid2, num::scale(sigma2, nu - 2.0));
    Var second = num::scale(num::log(num::add_const(ratio, 1.0)), (nu + 1.0) / 2.0);
    return num::mean_all(num::add(first, second));
}

Var task_loss(Tape& tape, const Matrix& y, Var xhat, Var mu, Var sigma, double nu, double beta) {
    if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("task_loss: beta must lie in [0,1]");
    const Matrix& xv = tape.value(xhat);
    if (y.rows() != xv.rows() || y.cols() != xv.cols()) {
        throw std::invalid_argument("task_loss: prediction shape mismatch");
    }
    Var yv = tape.constant(y, "target");
    Var mse = num::mean_all(num::square(num::sub(yv, xhat)));
    if (beta == 0.0) return mse;
    return num::add(mse, num::scale(student_t_nll(tape, y, mu, sigma, nu), beta));
}

Var domain_loss(Tape&, Var logits, const std::vector<int>& labels) {
    return num::softmax_cross_entropy_mean(logits, labels);
}

Var align_loss(Tape& tape, Var prototype, const Matrix& global_prototype) {
    const Matrix& p = tape.value(prototype);
    if (p.rows() != global_prototype.rows() || p.cols() != global_prototype.cols()) {
        throw std::invalid_argument("align_loss: prototype dimension mismatch");
    }
    Var g = tape.constant(global_prototype, "global_prototype");
    return num::sum(num::square(num::sub(prototype, g)));
}

Var total_loss(Tape&, Var task, Var dom, Var align, const LossWeights& weights) {
    weights.validate();
    Var out = task;
    out = num::add(out, num::scale(dom, weights.lambda_dom));
    out = num::add(out, num::scale(align, weights.lambda_align));
    return out;
}

double beta_schedule(int round, const WarmupSchedule& schedule) {
    if (round < 0) throw std::invalid_argument("beta_schedule: round must be >= 0");
    if (schedule.anneal_rounds < 1) throw std::invalid_argument("beta_schedule: anneal_rounds >= 1");
    if (round < schedule.warm_rounds) return 0.0;
    double beta = static_cast<double>(round - schedule.warm_rounds) / schedule.anneal_rounds;
    return std::clamp(beta, 0.0, 1.0);
}

double student_t_nll_scalar(double y, double mu, double sigma, double nu) {
    double r2 = (y - mu) * (y - mu);
    return 0.5 * std::log(M_PI * (nu - 2.0) * sigma * sigma) +
           (nu + 1.0) / 2.0 * std::log1p(r2 / ((nu - 2.0) * sigma * sigma));
}

}  // namespace fedtrl::losses
