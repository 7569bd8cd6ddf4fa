#pragma once

// Forecast metrics (MSE/MAE/CRPS/MASE/WQL) and evaluation protocols over a
// federation's held-out and unseen-domain splits.

#include "fedtrl/data.hpp"
#include "fedtrl/model.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <vector>

namespace fedtrl::eval {

using data::Vector;

double mse(const Vector& y, const Vector& yhat);
double mae(const Vector& y, const Vector& yhat);

// Empirical per-point CRPS: mean|X - y| - 1/2 mean|X - X'| over all sample
// pairs, averaged over the horizon. Needs at least 2 samples.
double crps_from_samples(const std::vector<Vector>& samples, const Vector& y);

// MAE scaled by the seasonal-naive in-sample MAE.
double mase(const Vector& y, const Vector& yhat, const Vector& insample, int season);

const std::vector<double>& default_quantiles();  // the nine deciles

// Quantile losses at the given levels from empirical sample quantiles,
// normalized by sum |y|.
double weighted_quantile_loss(const std::vector<Vector>& samples, const Vector& y,
                              const std::vector<double>& quantiles = default_quantiles());

enum class Protocol { in_domain, zero_shot, probabilistic };

struct EvalConfig {
    std::vector<int> horizons = {8, 16, 32};
    int sample_count = 20;
    int mase_season = 24;
    std::uint64_t seed = 1;
};

struct MetricsReport {
    // key: "<split>/h<horizon>" -> metric name -> value
    std::map<std::string, std::map<std::string, double>> entries;
    std::map<std::string, double> aggregate;  // arithmetic means over entries
    Protocol protocol = Protocol::in_domain;
    int sample_count = 0;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    std::string to_csv() const;  // one row per split x horizon x metric
};

MetricsReport evaluate(const model::ModelParams& params, const data::FederationDataset& federation,
                       Protocol protocol, const diffusion::NoiseSchedule& schedule,
                       const EvalConfig& config);

}  // namespace fedtrl::eval
