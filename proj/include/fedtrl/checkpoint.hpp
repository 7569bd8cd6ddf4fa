#pragma once

// Versioned checkpoint files: a JSON manifest (names, shapes, config hash,
// arbitrary metadata) followed by little-endian 64-bit float payloads in
// manifest order. Encoder-only checkpoints are the same format restricted to
// "encoder/" keys.

#include <Eigen/Dense>

#include <nlohmann/json.hpp>

#include <map>
#include <random>
#include <string>

namespace fedtrl::checkpoint {

using Matrix = Eigen::MatrixXd;
using TensorMap = std::map<std::string, Matrix>;

inline constexpr int kFormatVersion = 1;

void save_tensors(const TensorMap& tensors, const std::string& path,
                  const nlohmann::json& metadata = nlohmann::json::object());

struct Loaded {
    TensorMap tensors;
    nlohmann::json metadata;
};

Loaded load_tensors(const std::string& path);

// mt19937_64 round trip through its text representation.
std::string rng_to_string(const std::mt19937_64& rng);
std::mt19937_64 rng_from_string(const std::string& s);

}  // namespace fedtrl::checkpoint
