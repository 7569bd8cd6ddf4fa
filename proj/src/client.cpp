#include "fedtrl/client.hpp"

#include "fedtrl/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace fedtrl::client {

void AdamState::ensure_shapes(const model::ModelParams& params) {
    for (const auto& [name, t] : params.tensors) {
        auto it = m.find(name);
        if (it == m.end() || it->second.rows() != t.rows() || it->second.cols() != t.cols()) {
            m[name] = Matrix::Zero(t.rows(), t.cols());
            v[name] = Matrix::Zero(t.rows(), t.cols());
        }
    }
}

void AdamState::apply(model::ModelParams& params, const num::GradientSet& grads, double lr,
                      double beta1, double beta2, double eps) {
    ensure_shapes(params);
    ++step;
    double bc1 = 1.0 - std::pow(beta1, step);
    double bc2 = 1.0 - std::pow(beta2, step);
    for (auto& [name, t] : params.tensors) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Matrix& g = git->second;
        Matrix& mm = m[name];
        Matrix& vv = v[name];
        mm = beta1 * mm + (1.0 - beta1) * g;
        vv = beta2 * vv + (1.0 - beta2) * g.cwiseProduct(g);
        Matrix mhat = mm / bc1;
        Matrix vhat = vv / bc2;
        t -= lr * mhat.cwiseQuotient((vhat.cwiseSqrt().array() + eps).matrix());
    }
}

ClientState make_client(int client_id, data::ClientDataset dataset, const model::ModelConfig& config,
                        std::uint64_t global_seed) {
    ClientState state;
    state.client_id = client_id;
    state.dataset = std::move(dataset);
    model::ModelConfig cfg = config;
    cfg.subdomain_count = state.dataset.subdomain_count;
    state.params = model::init_params(cfg, global_seed * 1000003ULL + static_cast<std::uint64_t>(client_id));
    state.rng.seed(global_seed * 0x9E3779B97F4A7C15ULL + 17ULL * static_cast<std::uint64_t>(client_id) + 1);
    return state;
}

namespace {

struct BatchLoss {
    num::Var total;
    double task_v, dom_v, align_v, total_v;
};

void check_component(double v, const char* name) {
    if (!std::isfinite(v)) {
        throw std::runtime_error(std::string("non-finite ") + name + " loss during local update");
    }
}

BatchLoss batch_loss(num::Tape& tape, const model::ParamVars& pv, ClientState& state,
                     const std::vector<std::size_t>& batch, const std::optional<Matrix>& global_prototype,
                     double beta, const LocalTrainConfig& cfg) {
    std::normal_distribution<double> normal(0.0, 1.0);
    num::Var task_sum{}, proto_sum{}, logits_batch{};
    std::vector<int> labels;

    for (std::size_t bi = 0; bi < batch.size(); ++bi) {
        const data::TimeSeriesWindow& w = state.dataset.windows[batch[bi]];
        auto [x_norm, stats] = data::instance_normalize(w.context);
        Matrix clean = data::patchify(x_norm, pv.config->patch_len);
        int n = static_cast<int>(clean.rows());
        int P = pv.config->patch_len;

        Matrix noisy(n, P);
        int shared_t = cfg.per_patch_timestep ? 0 : diffusion::sample_timestep(state.rng, cfg.schedule.steps);
        for (int i = 0; i < n; ++i) {
            int t = cfg.per_patch_timestep ? diffusion::sample_timestep(state.rng, cfg.schedule.steps)
                                           : shared_t;
            data::Vector eps(P);
            for (int j = 0; j < P; ++j) eps(j) = normal(state.rng);
            noisy.row(i) =
                diffusion::forward_diffuse(clean.row(i).transpose(), t, eps, cfg.schedule).transpose();
        }

        num::Var tokens = model::embed_patches(tape, pv, clean);
        num::Var H = model::encode(tape, pv, tokens);
        num::Var noisy_tokens = model::embed_noisy_patches(tape, pv, noisy);
        num::Var zhat = model::decode_denoise(tape, pv, noisy_tokens, H);
        num::Var xhat = model::project_point(tape, pv, zhat);
        auto [mu, sigma] = model::project_probabilistic(tape, pv, zhat);
        num::Var proto = model::pool_prototype(tape, H);
        num::Var logits = model::classify_subdomain(tape, pv, proto, cfg.weights.grl_lambda);

        num::Var task = losses::task_loss(tape, clean, xhat, mu, sigma, cfg.weights.nu, beta);
        task_sum = bi == 0 ? task : num::add(task_sum, task);
        proto_sum = bi == 0 ? proto : num::add(proto_sum, proto);
        logits_batch = bi == 0 ? logits : num::concat_rows(logits_batch, logits);
        labels.push_back(w.subdomain_label);
    }

    double inv_b = 1.0 / static_cast<double>(batch.size());
    num::Var task = num::scale(task_sum, inv_b);
    num::Var dom = losses::domain_loss(tape, logits_batch, labels);
    num::Var batch_proto = num::scale(proto_sum, inv_b);

    losses::LossWeights weights = cfg.weights;
    weights.nll_beta = beta;
    num::Var align;
    double align_v = 0.0;
    if (global_prototype.has_value()) {
        align = losses::align_loss(tape, batch_proto, *global_prototype);
        align_v = tape.value(align)(0, 0);
    } else {
        align = tape.constant(Matrix::Zero(1, 1), "align_skipped");
        weights.lambda_align = 0.0;
    }

    num::Var total = losses::total_loss(tape, task, dom, align, weights);
    BatchLoss out{total, tape.value(task)(0, 0), tape.value(dom)(0, 0), align_v,
                  tape.value(total)(0, 0)};
    check_component(out.task_v, "task");
    check_component(out.dom_v, "domain");
    check_component(out.align_v, "alignment");
    check_component(out.total_v, "total");
    return out;
}

}  // namespace

ClientUpdate local_update(ClientState& state, const std::map<std::string, Matrix>& global_encoder,
                          const std::optional<Matrix>& global_prototype, int round,
                          const LocalTrainConfig& config, LocalLossTrace* trace) {
    if (state.dataset.windows.empty()) {
        throw std::runtime_error("local_update: client " + std::to_string(state.client_id) +
                                 " has an empty dataset");
    }
    if (round < 1) throw std::invalid_argument("local_update: round must be >= 1");
    state.params.set_encoder_tensors(global_encoder);

    double beta = losses::beta_schedule(round, config.warmup);
    std::vector<std::size_t> order(state.dataset.windows.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < config.local_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), state.rng);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
            num::Tape tape;
            model::ParamVars pv = model::make_param_vars(tape, state.params);
            BatchLoss loss = batch_loss(tape, pv, state, batch, global_prototype, beta, config);
            num::GradientSet grads = tape.backward(loss.total);
            state.optimizer.apply(state.params, grads, config.learning_rate);
            if (trace) {
                trace->task = loss.task_v;
                trace->dom = loss.dom_v;
                trace->align = loss.align_v;
                trace->total = loss.total_v;
            }
        }
    }

    ClientUpdate update;
    update.client_id = state.client_id;
    update.encoder = state.params.encoder_tensors();
    update.prototype = compute_client_prototype(state.dataset, state.params, config.proto_samples);
    update.n_k = state.dataset.n_k();
    return update;
}

Matrix compute_client_prototype(const data::ClientDataset& dataset, const model::ModelParams& params,
                                int proto_samples) {
    if (dataset.windows.empty()) {
        throw std::runtime_error("compute_client_prototype: empty dataset");
    }
    std::size_t n = dataset.windows.size();
    std::vector<std::size_t> indices;
    if (proto_samples > 0 && static_cast<std::size_t>(proto_samples) < n) {
        // Evenly spaced deterministic subsample.
        for (int i = 0; i < proto_samples; ++i) {
            indices.push_back(static_cast<std::size_t>(i) * n / static_cast<std::size_t>(proto_samples));
        }
    } else {
        indices.resize(n);
        std::iota(indices.begin(), indices.end(), 0);
    }

    Matrix sum = Matrix::Zero(1, params.config.d_model);
    for (std::size_t idx : indices) {
        const data::TimeSeriesWindow& w = dataset.windows[idx];
        auto [x_norm, stats] = data::instance_normalize(w.context);
        Matrix clean = data::patchify(x_norm, params.config.patch_len);
        num::Tape tape;
        model::ParamVars pv = model::make_param_vars(tape, params);
        num::Var H = model::encode(tape, pv, model::embed_patches(tape, pv, clean));
        sum += tape.value(model::pool_prototype(tape, H));
    }
    return sum / static_cast<double>(indices.size());
}

void save_update(const ClientUpdate& update, const std::string& checkpoint_path,
                 const std::string& sidecar_path) {
    checkpoint::save_tensors(update.encoder, checkpoint_path,
                             {{"kind", "client_update"}, {"client_id", update.client_id}});
    nlohmann::json side;
    side["client_id"] = update.client_id;
    side["n_k"] = update.n_k;
    side["prototype"] = std::vector<double>(update.prototype.data(),
                                            update.prototype.data() + update.prototype.size());
    std::ofstream out(sidecar_path);
    if (!out) throw std::runtime_error("save_update: cannot write " + sidecar_path);
    out << side.dump(2) << "\n";
}

}  // namespace fedtrl::client
