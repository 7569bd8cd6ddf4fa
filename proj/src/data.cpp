#include "fedtrl/data.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace fedtrl::data {

std::pair<Vector, NormStats> instance_normalize(const Vector& x) {
    if (x.size() < 2) {
        throw std::invalid_argument("instance_normalize: need at least 2 points, got " +
                                    std::to_string(x.size()));
    }
    double mean = x.mean();
    double var = (x.array() - mean).square().mean();
    double std = std::max(std::sqrt(var), kNormEpsilon);
    NormStats stats{mean, std};
    return {(x.array() - mean) / std, stats};
}

Vector instance_denormalize(const Vector& y, const NormStats& stats) {
    return y * stats.std + Vector::Constant(y.size(), stats.mean);
}

Matrix patchify(const Vector& x, int patch_len) {
    if (patch_len < 1) throw std::invalid_argument("patchify: patch length must be >= 1");
    if (x.size() < patch_len) {
        throw std::invalid_argument("patchify: series length " + std::to_string(x.size()) +
                                    " shorter than patch length " + std::to_string(patch_len));
    }
    Eigen::Index n = x.size() / patch_len;
    Matrix patches(n, patch_len);
    for (Eigen::Index i = 0; i < n; ++i) {
        patches.row(i) = x.segment(i * patch_len, patch_len).transpose();
    }
    return patches;
}

namespace {

// One series of the given length from a sub-domain generator.
Vector generate_series(const SubdomainGen& g, const ClientSpec& client, int length,
                       std::mt19937_64& rng) {
    std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * M_PI);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_int_distribution<int> shift_pos(length / 4, 3 * length / 4);

    double phase = phase_dist(rng);
    int jump_at = shift_pos(rng);
    Vector x(length);
    double ar = 0.0;
    for (int t = 0; t < length; ++t) {
        ar = g.ar_coeff * ar + noise(rng) * g.noise_std;
        double v = g.amplitude * std::sin(2.0 * M_PI * g.frequency * t + phase) + g.trend * t + ar;
        if (g.regime_shift != 0.0 && t >= jump_at) v += g.regime_shift;
        x(t) = client.level_offset + client.scale * v;
    }
    return x;
}

std::vector<TimeSeriesWindow> generate_windows(const ClientSpec& spec, int count, int T, int F,
                                               std::mt19937_64& rng) {
    if (spec.subdomains.empty()) throw std::invalid_argument("client spec has no sub-domains");
    std::vector<TimeSeriesWindow> windows;
    windows.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        int label = i % static_cast<int>(spec.subdomains.size());
        Vector series = generate_series(spec.subdomains[static_cast<std::size_t>(label)], spec, T + F, rng);
        TimeSeriesWindow w;
        w.context = series.head(T);
        w.target = series.tail(F);
        w.subdomain_label = label;
        windows.push_back(std::move(w));
    }
    return windows;
}

}  // namespace

FederationDataset generate_synthetic_federation(const FederationSpec& spec, std::uint64_t seed) {
    if (spec.clients.size() < 2) {
        throw std::invalid_argument("generate_synthetic_federation: need at least 2 clients");
    }
    FederationDataset fed;
    for (std::size_t k = 0; k < spec.clients.size(); ++k) {
        const ClientSpec& cs = spec.clients[k];
        if (cs.train_windows < 1) {
            throw std::invalid_argument("client " + std::to_string(k) + " has no training windows");
        }
        std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + k);
        ClientDataset train;
        train.client_id = static_cast<int>(k);
        train.subdomain_count = static_cast<int>(cs.subdomains.size());
        train.windows = generate_windows(cs, cs.train_windows, spec.context_len, spec.horizon, rng);
        ClientDataset held;
        held.client_id = static_cast<int>(k);
        held.subdomain_count = train.subdomain_count;
        held.windows = generate_windows(cs, cs.heldout_windows, spec.context_len, spec.horizon, rng);
        fed.clients.push_back(std::move(train));
        fed.held_out.push_back(std::move(held));
    }
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + 0xABCDULL);
    fed.unseen_domain =
        generate_windows(spec.unseen, spec.unseen_windows, spec.context_len, spec.horizon, rng);
    return fed;
}

ClientDataset load_csv_dataset(const std::string& path, const CsvLoadOptions& opts) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_csv_dataset: cannot open " + path);

    std::string header;
    if (!std::getline(in, header)) throw std::runtime_error("load_csv_dataset: empty file " + path);

    auto split = [](const std::string& line) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        return cells;
    };

    std::vector<std::string> cols = split(header);
    int col_idx = -1;
    for (std::size_t i = 0; i < cols.size(); ++i) {
        if (cols[i] == opts.column) col_idx = static_cast<int>(i);
    }
    if (col_idx < 0) {
        throw std::runtime_error("load_csv_dataset: column '" + opts.column + "' not found in " + path);
    }

    std::vector<double> values;
    std::string line;
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        std::vector<std::string> cells = split(line);
        if (col_idx >= static_cast<int>(cells.size())) {
            throw std::runtime_error("load_csv_dataset: row " + std::to_string(row) +
                                     " has no column '" + opts.column + "'");
        }
        const std::string& cell = cells[static_cast<std::size_t>(col_idx)];
        try {
            std::size_t pos = 0;
            double v = std::stod(cell, &pos);
            if (pos != cell.size() || std::isnan(v)) throw std::invalid_argument(cell);
            values.push_back(v);
        } catch (const std::exception&) {
            throw std::runtime_error("load_csv_dataset: non-numeric cell '" + cell + "' at row " +
                                     std::to_string(row) + ", column '" + opts.column + "'");
        }
    }

    int window = opts.context_len + opts.horizon;
    if (static_cast<int>(values.size()) < window) {
        throw std::runtime_error("load_csv_dataset: need at least " + std::to_string(window) +
                                 " rows, got " + std::to_string(values.size()));
    }

    ClientDataset ds;
    ds.subdomain_count = opts.subdomain_label + 1;
    Eigen::Map<const Vector> series(values.data(), static_cast<Eigen::Index>(values.size()));
    for (int start = 0; start + window <= static_cast<int>(values.size()); start += opts.stride) {
        TimeSeriesWindow w;
        w.context = series.segment(start, opts.context_len);
        w.target = series.segment(start + opts.context_len, opts.horizon);
        w.subdomain_label = opts.subdomain_label;
        ds.windows.push_back(std::move(w));
    }
    return ds;
}

void write_manifest(const FederationDataset& fed, std::uint64_t seed, const std::string& path) {
    nlohmann::json j;
    j["seed"] = seed;
    j["unseen_windows"] = fed.unseen_domain.size();
    for (std::size_t k = 0; k < fed.clients.size(); ++k) {
        nlohmann::json c;
        c["client_id"] = fed.clients[k].client_id;
        c["train_windows"] = fed.clients[k].n_k();
        c["heldout_windows"] = fed.held_out[k].n_k();
        c["subdomain_count"] = fed.clients[k].subdomain_count;
        j["clients"].push_back(c);
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_manifest: cannot write " + path);
    out << j.dump(2) << "\n";
}

FederationSpec make_federation_spec(int clients, int subdomains_per_client, int train_windows,
                                    int heldout_windows, int unseen_windows, int context_len,
                                    int horizon) {
    if (clients < 2) throw std::invalid_argument("make_federation_spec: need at least 2 clients");
    if (subdomains_per_client < 1) {
        throw std::invalid_argument("make_federation_spec: need at least 1 sub-domain per client");
    }
    FederationSpec spec;
    spec.context_len = context_len;
    spec.horizon = horizon;
    spec.unseen_windows = unseen_windows;

    // Sub-domains within a client share the client's frequency; they differ
    // only by nuisance measurement regimes (noise level, level shifts), so a
    // regime-invariant representation is the one that transfers.
    auto make_client = [&](double freq, double offset, double base_noise) {
        ClientSpec c;
        c.train_windows = train_windows;
        c.heldout_windows = heldout_windows;
        c.level_offset = offset;
        for (int s = 0; s < subdomains_per_client; ++s) {
            SubdomainGen g;
            g.frequency = freq;
            g.amplitude = 1.0;
            g.trend = 0.005 * s;
            g.ar_coeff = s == 0 ? 0.3 : 0.0;
            g.noise_std = s == 0 ? base_noise : 6.0 * base_noise;  // noisy capture regime
            g.regime_shift = s == 0 ? 0.0 : 1.5;
            c.subdomains.push_back(g);
        }
        return c;
    };

    for (int k = 0; k < clients - 1; ++k) {
        double freq = 0.02 + 0.01 * k;
        double offset = 0.5 * ((k % 3) - 1);
        spec.clients.push_back(make_client(freq, offset, 0.1));
    }
    // Outlier client: a clean, strong signal in an unrelated frequency band.
    // It holds the largest sample count, so sample-proportional aggregation
    // tilts the shared encoder toward its band; domain-aware weighting does
    // not over-trust it.
    ClientSpec outlier = make_client(0.30, 2.0, 0.1);
    for (auto& g : outlier.subdomains) {
        g.ar_coeff = 0.0;   // iid noise: unpredictable targets, updates never settle
        g.amplitude = 0.05;
        g.noise_std = 1.0;
        if (g.regime_shift != 0.0) g.regime_shift = 3.0;  // keep its regimes separable
    }
    outlier.train_windows = 3 * train_windows;
    spec.clients.push_back(outlier);

    // Unseen domain: clean capture in the majority frequency band.
    spec.unseen = make_client(0.025, 0.2, 0.1);
    for (auto& g : spec.unseen.subdomains) {
        g.noise_std = 0.1;
        g.regime_shift = 0.0;
        g.ar_coeff = 0.3;
    }
    spec.unseen.train_windows = spec.unseen_windows;
    return spec;
}

FederationSpec bundled_federation_spec(int train_windows) {
    return make_federation_spec(4, 2, train_windows, 16, 32, 128, 32);
}

}  // namespace fedtrl::data
