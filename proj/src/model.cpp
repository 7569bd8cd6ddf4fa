#include "fedtrl/model.hpp"

#include <cmath>
#include <stdexcept>

namespace fedtrl::model {

namespace {

constexpr double kMaskOff = -1e30;

Matrix causal_mask(int rows) {
    Matrix m = Matrix::Zero(rows, rows);
    for (int i = 0; i < rows; ++i)
        for (int j = i + 1; j < rows; ++j) m(i, j) = kMaskOff;
    return m;
}

// Query i may see key 0 (start token) and keys 1..i+offset (H rows < i+offset).
Matrix shifted_cross_mask(int n_query, int n_keys, int offset) {
    Matrix m = Matrix::Constant(n_query, n_keys, kMaskOff);
    for (int i = 0; i < n_query; ++i) {
        for (int j = 0; j < n_keys && j <= i + offset; ++j) m(i, j) = 0.0;
    }
    return m;
}

}  // namespace

std::map<std::string, Matrix> ModelParams::encoder_tensors() const {
    std::map<std::string, Matrix> enc;
    for (const auto& [name, t] : tensors) {
        if (is_encoder_key(name)) enc[name] = t;
    }
    return enc;
}

void ModelParams::set_encoder_tensors(const std::map<std::string, Matrix>& enc) {
    for (const auto& [name, t] : enc) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::runtime_error("unknown encoder tensor '" + name + "'");
        if (it->second.rows() != t.rows() || it->second.cols() != t.cols()) {
            throw std::runtime_error("shape mismatch restoring encoder tensor '" + name + "'");
        }
        it->second = t;
    }
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
    if (config.d_model % config.n_heads != 0) {
        throw std::invalid_argument("d_model must be divisible by n_heads");
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 0.02);

    ModelParams p;
    p.config = config;
    auto weight = [&](const std::string& name, int r, int c) {
        Matrix m(r, c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) m(i, j) = dist(rng);
        p.tensors[name] = std::move(m);
    };
    auto zeros = [&](const std::string& name, int r, int c) { p.tensors[name] = Matrix::Zero(r, c); };
    auto ones = [&](const std::string& name, int c) { p.tensors[name] = Matrix::Ones(1, c); };

    int d = config.d_model;
    int dh = d / config.n_heads;
    int P = config.patch_len;

    weight("encoder/embed_w", P, d);
    zeros("encoder/embed_b", 1, d);
    weight("encoder/pos", config.max_patches, d);
    for (int l = 0; l < config.enc_layers; ++l) {
        std::string pre = "encoder/L" + std::to_string(l) + "/";
        ones(pre + "ln1_g", d);
        zeros(pre + "ln1_b", 1, d);
        for (int h = 0; h < config.n_heads; ++h) {
            weight(pre + "q" + std::to_string(h), d, dh);
            weight(pre + "k" + std::to_string(h), d, dh);
            weight(pre + "v" + std::to_string(h), d, dh);
        }
        weight(pre + "attn_out", d, d);
        zeros(pre + "attn_out_b", 1, d);
        ones(pre + "ln2_g", d);
        zeros(pre + "ln2_b", 1, d);
        weight(pre + "ffn_w1", d, config.ffn_dim);
        zeros(pre + "ffn_b1", 1, config.ffn_dim);
        weight(pre + "ffn_w2", config.ffn_dim, d);
        zeros(pre + "ffn_b2", 1, d);
    }
    ones("encoder/ln_f_g", d);
    zeros("encoder/ln_f_b", 1, d);

    weight("decoder/embed_w", P, d);
    zeros("decoder/embed_b", 1, d);
    weight("decoder/pos", config.max_patches, d);
    weight("decoder/start", 1, d);
    for (int l = 0; l < config.dec_layers; ++l) {
        std::string pre = "decoder/L" + std::to_string(l) + "/";
        ones(pre + "ln1_g", d);
        zeros(pre + "ln1_b", 1, d);
        for (int h = 0; h < config.n_heads; ++h) {
            weight(pre + "q" + std::to_string(h), d, dh);
            weight(pre + "k" + std::to_string(h), d, dh);
            weight(pre + "v" + std::to_string(h), d, dh);
        }
        weight(pre + "attn_out", d, d);
        zeros(pre + "attn_out_b", 1, d);
        ones(pre + "ln2_g", d);
        zeros(pre + "ln2_b", 1, d);
        weight(pre + "ffn_w1", d, config.ffn_dim);
        zeros(pre + "ffn_b1", 1, config.ffn_dim);
        weight(pre + "ffn_w2", config.ffn_dim, d);
        zeros(pre + "ffn_b2", 1, d);
    }
    ones("decoder/ln_f_g", d);
    zeros("decoder/ln_f_b", 1, d);

    weight("point_head/w", d, P);
    zeros("point_head/b", 1, P);
    weight("prob_head/mu_w", d, P);
    zeros("prob_head/mu_b", 1, P);
    weight("prob_head/scale_w", d, P);
    zeros("prob_head/scale_b", 1, P);

    weight("classifier/w1", d, config.classifier_hidden);
    zeros("classifier/b1", 1, config.classifier_hidden);
    weight("classifier/w2", config.classifier_hidden, config.subdomain_count);
    zeros("classifier/b2", 1, config.subdomain_count);
    return p;
}

Var ParamVars::at(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw std::runtime_error("unknown parameter '" + name + "'");
    return it->second;
}

ParamVars make_param_vars(Tape& tape, const ModelParams& params) {
    ParamVars pv;
    pv.config = &params.config;
    for (const auto& [name, t] : params.tensors) {
        pv.vars[name] = tape.param(name, t);
    }
    return pv;
}

namespace {

Var layer_norm(Tape&, const ParamVars& pv, Var x, const std::string& g, const std::string& b) {
    return num::add_rowvec(num::mul_rowvec(num::row_norm(x), pv.at(g)), pv.at(b));
}

Var multi_head_attention(Tape& tape, const ParamVars& pv, const std::string& pre, Var queries,
                         Var keys, const Matrix& mask) {
    const ModelConfig& cfg = *pv.config;
    int dh = cfg.d_model / cfg.n_heads;
    double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    Var merged{};
    for (int h = 0; h < cfg.n_heads; ++h) {
        Var q = num::matmul(queries, pv.at(pre + "q" + std::to_string(h)));
        Var k = num::matmul(keys, pv.at(pre + "k" + std::to_string(h)));
        Var v = num::matmul(keys, pv.at(pre + "v" + std::to_string(h)));
        Var scores = num::scale(num::matmul(q, num::transpose(k)), inv_sqrt_dh);
        Var attn = num::masked_row_softmax(scores, mask);
        Var out = num::matmul(attn, v);
        merged = h == 0 ? out : num::concat_cols(merged, out);
    }
    (void)tape;
    return num::add_rowvec(num::matmul(merged, pv.at(pre + "attn_out")), pv.at(pre + "attn_out_b"));
}

Var ffn_block(Tape&, const ParamVars& pv, const std::string& pre, Var x) {
    Var h = num::add_rowvec(num::matmul(x, pv.at(pre + "ffn_w1")), pv.at(pre + "ffn_b1"));
    h = num::gelu(h);
    return num::add_rowvec(num::matmul(h, pv.at(pre + "ffn_w2")), pv.at(pre + "ffn_b2"));
}

Var embed(Tape& tape, const ParamVars& pv, const Matrix& patches, const std::string& embed_w,
          const std::string& embed_b, const std::string& pos, int pos_offset) {
    const ModelConfig& cfg = *pv.config;
    if (patches.cols() != cfg.patch_len) {
        throw std::runtime_error("embed: patch length " + std::to_string(patches.cols()) +
                                 " does not match config " + std::to_string(cfg.patch_len));
    }
    int n = static_cast<int>(patches.rows());
    if (pos_offset + n > cfg.max_patches) {
        throw std::runtime_error("embed: sequence of " + std::to_string(pos_offset + n) +
                                 " patches exceeds max_patches " + std::to_string(cfg.max_patches));
    }
    Var x = tape.constant(patches, "patches");
    Var tokens = num::add_rowvec(num::matmul(x, pv.at(embed_w)), pv.at(embed_b));
    Var pos_rows = num::slice_rows(pv.at(pos), pos_offset, n);
    return num::add(tokens, pos_rows);
}

}  // namespace

Var embed_patches(Tape& tape, const ParamVars& pv, const Matrix& patches) {
    return embed(tape, pv, patches, "encoder/embed_w", "encoder/embed_b", "encoder/pos", 0);
}

Var embed_noisy_patches(Tape& tape, const ParamVars& pv, const Matrix& noisy_patches) {
    return embed(tape, pv, noisy_patches, "decoder/embed_w", "decoder/embed_b", "decoder/pos", 0);
}

Var encode(Tape& tape, const ParamVars& pv, Var tokens) {
    const ModelConfig& cfg = *pv.config;
    int n = static_cast<int>(tape.value(tokens).rows());
    Matrix mask = causal_mask(n);
    Var h = tokens;
    for (int l = 0; l < cfg.enc_layers; ++l) {
        std::string pre = "encoder/L" + std::to_string(l) + "/";
        Var a = layer_norm(tape, pv, h, pre + "ln1_g", pre + "ln1_b");
        h = num::add(h, multi_head_attention(tape, pv, pre, a, a, mask));
        Var f = layer_norm(tape, pv, h, pre + "ln2_g", pre + "ln2_b");
        h = num::add(h, ffn_block(tape, pv, pre, f));
    }
    return layer_norm(tape, pv, h, "encoder/ln_f_g", "encoder/ln_f_b");
}

Var decode_denoise(Tape& tape, const ParamVars& pv, Var noisy_tokens, Var H, int query_offset) {
    const ModelConfig& cfg = *pv.config;
    int nq = static_cast<int>(tape.value(noisy_tokens).rows());
    int nk = static_cast<int>(tape.value(H).rows()) + 1;
    Var keys = num::concat_rows(pv.at("decoder/start"), H);
    Matrix mask = shifted_cross_mask(nq, nk, query_offset);
    Var h = noisy_tokens;
    for (int l = 0; l < cfg.dec_layers; ++l) {
        std::string pre = "decoder/L" + std::to_string(l) + "/";
        Var a = layer_norm(tape, pv, h, pre + "ln1_g", pre + "ln1_b");
        h = num::add(h, multi_head_attention(tape, pv, pre, a, keys, mask));
        Var f = layer_norm(tape, pv, h, pre + "ln2_g", pre + "ln2_b");
        h = num::add(h, ffn_block(tape, pv, pre, f));
    }
    return layer_norm(tape, pv, h, "decoder/ln_f_g", "decoder/ln_f_b");
}

Var project_point(Tape&, const ParamVars& pv, Var zhat) {
    return num::add_rowvec(num::matmul(zhat, pv.at("point_head/w")), pv.at("point_head/b"));
}

std::pair<Var, Var> project_probabilistic(Tape&, const ParamVars& pv, Var zhat) {
    const ModelConfig& cfg = *pv.config;
    Var mu = num::add_rowvec(num::matmul(zhat, pv.at("prob_head/mu_w")), pv.at("prob_head/mu_b"));
    Var raw = num::add_rowvec(num::matmul(zhat, pv.at("prob_head/scale_w")), pv.at("prob_head/scale_b"));
    Var sigma = num::add_const(num::softplus(raw), cfg.sigma_floor);
    return {mu, sigma};
}

Var pool_prototype(Tape&, Var H) { return num::mean_rows(H); }

Var classify_subdomain(Tape& tape, const ParamVars& pv, Var prototype, double grl_lambda) {
    const ModelConfig& cfg = *pv.config;
    const Matrix& p = tape.value(prototype);
    if (p.cols() != cfg.d_model) {
        throw std::runtime_error("classify_subdomain: prototype dimension mismatch");
    }
    if (tape.value(pv.at("classifier/w2")).cols() != cfg.subdomain_count) {
        throw std::runtime_error("classify_subdomain: sub-domain count mismatch");
    }
    Var x = num::gradient_reversal(prototype, grl_lambda);
    Var h = num::relu(num::add_rowvec(num::matmul(x, pv.at("classifier/w1")), pv.at("classifier/b1")));
    return num::add_rowvec(num::matmul(h, pv.at("classifier/w2")), pv.at("classifier/b2"));
}

namespace {

double sample_student_t(double mu, double sigma, double nu, std::mt19937_64& rng) {
    // The NLL parameterization makes sigma^2 the variance, so the underlying
    // location-scale t uses scale sigma * sqrt((nu-2)/nu).
    std::normal_distribution<double> normal(0.0, 1.0);
    std::chi_squared_distribution<double> chi2(nu);
    double z = normal(rng);
    double v = chi2(rng);
    double t = z / std::sqrt(v / nu);
    return mu + sigma * std::sqrt((nu - 2.0) / nu) * t;
}

// One generation rollout over ceil(F/P) patch steps in normalized space. All
// paths of one forecast share query_noise (one pure-noise patch per step), so
// sample paths differ from the point path only through emission sampling.
data::Vector rollout(const Matrix& context_patches, int horizon, const ModelParams& params,
                     const std::vector<Matrix>& query_noise, bool sample_emit, bool sample_feedback,
                     std::mt19937_64& rng) {
    const ModelConfig& cfg = params.config;
    int P = cfg.patch_len;
    int steps = (horizon + P - 1) / P;
    Matrix clean = context_patches;
    data::Vector out(steps * P);

    for (int s = 0; s < steps; ++s) {
        int n = static_cast<int>(clean.rows());
        Tape tape;
        ParamVars pv = make_param_vars(tape, params);
        Var tokens = embed_patches(tape, pv, clean);
        Var H = encode(tape, pv, tokens);

        // Pure-noise query patch at position n.
        const Matrix& noise = query_noise.at(static_cast<std::size_t>(s));
        Var query = embed(tape, pv, noise, "decoder/embed_w", "decoder/embed_b", "decoder/pos", n);
        Var zhat = decode_denoise(tape, pv, query, H, n);

        Matrix point = tape.value(project_point(tape, pv, zhat));
        auto [mu_v, sigma_v] = project_probabilistic(tape, pv, zhat);
        Matrix mu = tape.value(mu_v);
        Matrix sigma = tape.value(sigma_v);

        Matrix emitted(1, P);
        if (sample_emit) {
            for (int j = 0; j < P; ++j) {
                emitted(0, j) = sample_student_t(mu(0, j), sigma(0, j), cfg.student_t_nu, rng);
            }
        } else {
            emitted = point;
        }
        out.segment(s * P, P) = emitted.row(0).transpose();

        Matrix fed = sample_emit && !sample_feedback ? mu : emitted;
        Matrix next(clean.rows() + 1, P);
        next.topRows(clean.rows()) = clean;
        next.bottomRows(1) = fed;
        clean = std::move(next);
    }
    return out.head(horizon);
}

}  // namespace

ForecastOutput forecast(const data::Vector& context, int horizon, const ModelParams& params,
                        const diffusion::NoiseSchedule&, const ForecastOptions& opts,
                        std::mt19937_64& rng) {
    if (horizon < 1) throw std::invalid_argument("forecast: horizon must be >= 1");
    auto [x_norm, stats] = data::instance_normalize(context);
    int P = params.config.patch_len;
    Matrix patches = data::patchify(x_norm, P);

    int steps = (horizon + P - 1) / P;
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Matrix> query_noise;
    for (int s = 0; s < steps; ++s) {
        Matrix noise(1, P);
        for (int j = 0; j < P; ++j) noise(0, j) = normal(rng);
        query_noise.push_back(std::move(noise));
    }

    ForecastOutput result;
    {
        std::mt19937_64 point_rng = rng;
        data::Vector norm_path = rollout(patches, horizon, params, query_noise, false, false, point_rng);
        result.point = data::instance_denormalize(norm_path, stats);
    }
    if (opts.mode == ForecastMode::samples) {
        result.samples.reserve(static_cast<std::size_t>(opts.sample_count));
        for (int m = 0; m < opts.sample_count; ++m) {
            std::mt19937_64 path_rng(rng() ^ (0x5851F42D4C957F2DULL * static_cast<std::uint64_t>(m + 1)));
            data::Vector norm_path =
                rollout(patches, horizon, params, query_noise, true, opts.feed_back_samples, path_rng);
            result.samples.push_back(data::instance_denormalize(norm_path, stats));
        }
    }
    return result;
}

}  // namespace fedtrl::model
