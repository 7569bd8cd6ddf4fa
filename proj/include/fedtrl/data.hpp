#pragma once

// Federation construction: synthetic multi-sub-domain clients, CSV ingestion,
// instance normalization and patching.

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace fedtrl::data {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct NormStats {
    double mean = 0.0;
    double std = 1.0;
};

struct TimeSeriesWindow {
    Vector context;       // length T
    Vector target;        // length F
    int subdomain_label = 0;
    NormStats norm_stats; // filled on normalization
};

struct ClientDataset {
    int client_id = 0;
    std::vector<TimeSeriesWindow> windows;
    int subdomain_count = 1;

    std::size_t n_k() const { return windows.size(); }
};

struct FederationDataset {
    std::vector<ClientDataset> clients;
    std::vector<ClientDataset> held_out;        // same client ids, disjoint windows
    std::vector<TimeSeriesWindow> unseen_domain;  // never trained on
};

// (x - mean) / max(std, eps), population std, eps = 1e-5. Throws for
// length < 2. Returned stats allow exact denormalization.
std::pair<Vector, NormStats> instance_normalize(const Vector& x);
Vector instance_denormalize(const Vector& y, const NormStats& stats);

inline constexpr double kNormEpsilon = 1e-5;

// Non-overlapping patches of length P; trailing T mod P values dropped.
// Row i of the result is patch i.
Matrix patchify(const Vector& x, int patch_len);

struct SubdomainGen {
    double frequency = 0.05;    // cycles per step
    double amplitude = 1.0;
    double trend = 0.0;         // linear slope per step
    double ar_coeff = 0.5;      // AR(1) noise memory
    double noise_std = 0.1;
    double regime_shift = 0.0;  // level jump at a random position
};

struct ClientSpec {
    std::vector<SubdomainGen> subdomains;
    int train_windows = 64;
    int heldout_windows = 16;
    double level_offset = 0.0;  // client-specific covariate shift
    double scale = 1.0;
};

struct FederationSpec {
    std::vector<ClientSpec> clients;
    int context_len = 128;   // T
    int horizon = 32;        // F
    int unseen_windows = 32;
    ClientSpec unseen;       // generator for the unseen-domain split
};

// Deterministic under seed. Throws if fewer than 2 clients or a client has no
// windows.
FederationDataset generate_synthetic_federation(const FederationSpec& spec, std::uint64_t seed);

struct CsvLoadOptions {
    std::string column;
    int context_len = 96;
    int horizon = 24;
    int stride = 1;
    int subdomain_label = 0;
};

// Sliding windows over one numeric CSV column. Errors name the offending row
// and column.
ClientDataset load_csv_dataset(const std::string& path, const CsvLoadOptions& opts);

// Writes a JSON manifest of the federation (ids, counts, splits, seed).
void write_manifest(const FederationDataset& fed, std::uint64_t seed, const std::string& path);

// Heterogeneous federation template: clients 0..K-2 draw from related
// frequency families with client-specific level shifts, the last client is a
// high-noise outlier in an unrelated band; the unseen domain resembles the
// majority.
FederationSpec make_federation_spec(int clients, int subdomains_per_client, int train_windows,
                                    int heldout_windows, int unseen_windows, int context_len,
                                    int horizon);

// The 4-client instance used by the bundled configs and desk experiments.
FederationSpec bundled_federation_spec(int train_windows = 64);

}  // namespace fedtrl::data
