#pragma once

// Local network: patch embedding, causal encoder (theta_E), cross-attention
// denoising decoder (theta_D), dual forecasting heads, prototype pooling and
// the GRL-fronted sub-domain classifier (theta_C).

#include "fedtrl/data.hpp"
#include "fedtrl/diffusion.hpp"
#include "fedtrl/numerics.hpp"

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace fedtrl::model {

using num::Matrix;
using num::Tape;
using num::Var;

struct ModelConfig {
    int d_model = 64;
    int n_heads = 4;
    int enc_layers = 2;
    int dec_layers = 1;
    int ffn_dim = 128;
    int patch_len = 16;
    int max_patches = 16;
    int subdomain_count = 2;
    int classifier_hidden = 64;
    double student_t_nu = 5.0;   // fixed, never trained
    double sigma_floor = 1e-4;

    bool operator==(const ModelConfig&) const = default;
};

// Named dense parameters. Encoder parameters (the shareable partition) carry
// the "encoder/" prefix; everything else stays local to the client.
struct ModelParams {
    ModelConfig config;
    std::map<std::string, Matrix> tensors;

    bool is_encoder_key(const std::string& name) const { return name.rfind("encoder/", 0) == 0; }
    std::map<std::string, Matrix> encoder_tensors() const;
    void set_encoder_tensors(const std::map<std::string, Matrix>& enc);
};

ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// Parameters registered on a tape for one forward/backward pass.
struct ParamVars {
    const ModelConfig* config = nullptr;
    std::map<std::string, Var> vars;

    Var at(const std::string& name) const;
};

ParamVars make_param_vars(Tape& tape, const ModelParams& params);

// --- per-sequence forward pieces ---

// patches: N x P clean patches -> N x d tokens (projection + learned position).
Var embed_patches(Tape& tape, const ParamVars& pv, const Matrix& patches);
// noisy counterpart uses its own embedding and positions (query tokens).
Var embed_noisy_patches(Tape& tape, const ParamVars& pv, const Matrix& noisy_patches);

// Causally masked pre-norm transformer; row i of H depends on tokens 0..i only.
Var encode(Tape& tape, const ParamVars& pv, Var tokens);

// Cross-attention denoising: query i attends to the learned start token plus
// H rows 0..i-1 (shifted-causal), so a patch never sees its own clean encoding.
// `query_offset` shifts the attention window, letting a single query row act
// as patch index `query_offset` against a full-length H during generation.
Var decode_denoise(Tape& tape, const ParamVars& pv, Var noisy_tokens, Var H, int query_offset = 0);

Var project_point(Tape& tape, const ParamVars& pv, Var zhat);                       // N x P
std::pair<Var, Var> project_probabilistic(Tape& tape, const ParamVars& pv, Var zhat);  // mu, sigma

Var pool_prototype(Tape& tape, Var H);  // 1 x d columnwise mean

// logits = MLP(GRL(prototype, lambda)); forward values independent of lambda.
Var classify_subdomain(Tape& tape, const ParamVars& pv, Var prototype, double grl_lambda);

// --- forecasting ---

enum class ForecastMode { point, samples };

struct ForecastOutput {
    data::Vector point;            // length F, denormalized
    std::vector<data::Vector> samples;  // m paths in samples mode
};

struct ForecastOptions {
    ForecastMode mode = ForecastMode::point;
    int sample_count = 20;
    bool feed_back_samples = false;  // samples mode: feed mu back by default
};

ForecastOutput forecast(const data::Vector& context, int horizon, const ModelParams& params,
                        const diffusion::NoiseSchedule& schedule, const ForecastOptions& opts,
                        std::mt19937_64& rng);

}  // namespace fedtrl::model
