#include "fedtrl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace fedtrl::eval {

namespace {

void require_same_length(const Vector& y, const Vector& yhat, const char* op) {
    if (y.size() != yhat.size()) {
        throw std::invalid_argument(std::string(op) + ": length mismatch (" + std::to_string(y.size()) +
                                    " vs " + std::to_string(yhat.size()) + ")");
    }
}

}  // namespace

double mse(const Vector& y, const Vector& yhat) {
    require_same_length(y, yhat, "mse");
    return (y - yhat).squaredNorm() / static_cast<double>(y.size());
}

double mae(const Vector& y, const Vector& yhat) {
    require_same_length(y, yhat, "mae");
    return (y - yhat).cwiseAbs().mean();
}

double crps_from_samples(const std::vector<Vector>& samples, const Vector& y) {
    if (samples.size() < 2) throw std::invalid_argument("crps_from_samples: need at least 2 samples");
    std::size_t m = samples.size();
    double total = 0.0;
    for (Eigen::Index t = 0; t < y.size(); ++t) {
        double first = 0.0;
        for (const auto& s : samples) first += std::abs(s(t) - y(t));
        first /= static_cast<double>(m);
        double second = 0.0;
        for (std::size_t a = 0; a < m; ++a)
            for (std::size_t b = 0; b < m; ++b) second += std::abs(samples[a](t) - samples[b](t));
        second /= static_cast<double>(m * m);
        total += first - 0.5 * second;
    }
    return total / static_cast<double>(y.size());
}

double mase(const Vector& y, const Vector& yhat, const Vector& insample, int season) {
    require_same_length(y, yhat, "mase");
    if (insample.size() <= season) {
        throw std::invalid_argument("mase: in-sample series shorter than the season");
    }
    double denom = 0.0;
    for (Eigen::Index t = season; t < insample.size(); ++t) {
        denom += std::abs(insample(t) - insample(t - season));
    }
    denom /= static_cast<double>(insample.size() - season);
    if (denom == 0.0) throw std::invalid_argument("mase: degenerate (seasonally constant) series");
    return mae(y, yhat) / denom;
}

const std::vector<double>& default_quantiles() {
    static const std::vector<double> q = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    return q;
}

double weighted_quantile_loss(const std::vector<Vector>& samples, const Vector& y,
                              const std::vector<double>& quantiles) {
    if (samples.empty()) throw std::invalid_argument("weighted_quantile_loss: no samples");
    double y_abs = y.cwiseAbs().sum();
    if (y_abs == 0.0) throw std::invalid_argument("weighted_quantile_loss: degenerate all-zero target");

    std::size_t m = samples.size();
    double total = 0.0;
    std::vector<double> column(m);
    for (Eigen::Index t = 0; t < y.size(); ++t) {
        for (std::size_t i = 0; i < m; ++i) column[i] = samples[i](t);
        std::sort(column.begin(), column.end());
        for (double q : quantiles) {
            if (q <= 0.0 || q >= 1.0) throw std::invalid_argument("quantile levels must lie in (0,1)");
            // Linear-interpolated empirical quantile.
            double pos = q * static_cast<double>(m - 1);
            std::size_t lo = static_cast<std::size_t>(pos);
            double frac = pos - static_cast<double>(lo);
            double yq = lo + 1 < m ? column[lo] * (1.0 - frac) + column[lo + 1] * frac : column[lo];
            double indicator = y(t) < yq ? 1.0 : 0.0;
            total += 2.0 * (q - indicator) * (y(t) - yq);
        }
    }
    return total / y_abs;
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json j;
    j["protocol"] = protocol == Protocol::in_domain     ? "in_domain"
                    : protocol == Protocol::zero_shot   ? "zero_shot"
                                                        : "probabilistic";
    j["sample_count"] = sample_count;
    j["seed"] = seed;
    j["entries"] = entries;
    j["aggregate"] = aggregate;
    return j;
}

std::string MetricsReport::to_csv() const {
    std::ostringstream os;
    os << "dataset,metric,value\n";
    os.precision(17);
    for (const auto& [key, metrics] : entries) {
        for (const auto& [name, value] : metrics) {
            os << key << "," << name << "," << value << "\n";
        }
    }
    for (const auto& [name, value] : aggregate) {
        os << "aggregate," << name << "," << value << "\n";
    }
    return os.str();
}

namespace {

void evaluate_split(const std::string& split_name, const std::vector<data::TimeSeriesWindow>& windows,
                    const model::ModelParams& params, const diffusion::NoiseSchedule& schedule,
                    Protocol protocol, const EvalConfig& config, MetricsReport& report) {
    if (windows.empty()) throw std::invalid_argument("evaluate: empty split '" + split_name + "'");
    bool probabilistic = protocol == Protocol::probabilistic;
    for (int horizon : config.horizons) {
        double sum_mse = 0.0, sum_mae = 0.0, sum_mase = 0.0, sum_crps = 0.0, sum_wql = 0.0;
        int mase_count = 0, wql_count = 0;
        for (std::size_t wi = 0; wi < windows.size(); ++wi) {
            const auto& w = windows[wi];
            if (w.target.size() < horizon) {
                throw std::invalid_argument("evaluate: window target shorter than horizon");
            }
            Vector y = w.target.head(horizon);
            model::ForecastOptions opts;
            opts.mode = probabilistic ? model::ForecastMode::samples : model::ForecastMode::point;
            opts.sample_count = config.sample_count;
            std::mt19937_64 rng(config.seed * 0x2545F4914F6CDD1DULL + wi * 1000 +
                                static_cast<std::uint64_t>(horizon));
            model::ForecastOutput out = model::forecast(w.context, horizon, params, schedule, opts, rng);

            sum_mse += mse(y, out.point);
            sum_mae += mae(y, out.point);
            int season = std::min<int>(config.mase_season, static_cast<int>(w.context.size()) - 1);
            try {
                sum_mase += mase(y, out.point, w.context, season);
                ++mase_count;
            } catch (const std::invalid_argument&) {
                // degenerate seasonal denominator; skip this window for MASE
            }
            if (probabilistic) {
                sum_crps += crps_from_samples(out.samples, y);
                try {
                    sum_wql += weighted_quantile_loss(out.samples, y);
                    ++wql_count;
                } catch (const std::invalid_argument&) {
                }
            }
        }
        double n = static_cast<double>(windows.size());
        std::string key = split_name + "/h" + std::to_string(horizon);
        auto& m = report.entries[key];
        m["mse"] = sum_mse / n;
        m["mae"] = sum_mae / n;
        if (mase_count > 0) m["mase"] = sum_mase / mase_count;
        if (probabilistic) {
            m["crps"] = sum_crps / n;
            if (wql_count > 0) m["wql"] = sum_wql / wql_count;
        }
    }
}

}  // namespace

MetricsReport evaluate(const model::ModelParams& params, const data::FederationDataset& federation,
                       Protocol protocol, const diffusion::NoiseSchedule& schedule,
                       const EvalConfig& config) {
    MetricsReport report;
    report.protocol = protocol;
    report.sample_count = protocol == Protocol::probabilistic ? config.sample_count : 0;
    report.seed = config.seed;

    if (protocol == Protocol::zero_shot) {
        evaluate_split("unseen", federation.unseen_domain, params, schedule, protocol, config, report);
    } else {
        for (const auto& held : federation.held_out) {
            evaluate_split("client" + std::to_string(held.client_id), held.windows, params, schedule,
                           protocol, config, report);
        }
    }

    std::map<std::string, double> sums;
    std::map<std::string, int> counts;
    for (const auto& [key, metrics] : report.entries) {
        for (const auto& [name, value] : metrics) {
            sums[name] += value;
            counts[name] += 1;
        }
    }
    for (const auto& [name, total] : sums) report.aggregate[name] = total / counts[name];
    return report;
}

}  // namespace fedtrl::eval
