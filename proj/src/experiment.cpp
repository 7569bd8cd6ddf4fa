#include "fedtrl/experiment.hpp"

#include "fedtrl/checkpoint.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

namespace fedtrl::experiment {

namespace fs = std::filesystem;

constexpr const char* kCodeVersion = "fedtrl 0.1.0";

data::FederationSpec synthetic_spec(const config::FederationConfig& fc) {
    return data::make_federation_spec(fc.clients, fc.subdomains, fc.train_windows,
                                      fc.heldout_windows, fc.unseen_windows, fc.context_len,
                                      fc.horizon);
}

data::FederationDataset build_federation(const config::ExperimentConfig& cfg) {
    if (cfg.federation.kind == "synthetic") {
        return data::generate_synthetic_federation(synthetic_spec(cfg.federation), cfg.seed);
    }
    // CSV: one client per file, chronological 80/20 train/held-out split.
    data::FederationDataset fed;
    int id = 0;
    for (const std::string& path : cfg.federation.csv_paths) {
        data::CsvLoadOptions opts;
        opts.column = cfg.federation.csv_column;
        opts.context_len = cfg.federation.context_len;
        opts.horizon = cfg.federation.horizon;
        opts.stride = cfg.federation.csv_stride;
        data::ClientDataset ds = load_csv_dataset(path, opts);
        ds.client_id = id;
        std::size_t split = ds.windows.size() * 4 / 5;
        if (split == 0 || split == ds.windows.size()) {
            throw std::runtime_error("csv dataset " + path + " too small for a train/held-out split");
        }
        data::ClientDataset train, held;
        train.client_id = held.client_id = id;
        train.subdomain_count = held.subdomain_count = ds.subdomain_count;
        train.windows.assign(ds.windows.begin(), ds.windows.begin() + static_cast<std::ptrdiff_t>(split));
        held.windows.assign(ds.windows.begin() + static_cast<std::ptrdiff_t>(split), ds.windows.end());
        fed.clients.push_back(std::move(train));
        fed.held_out.push_back(std::move(held));
        ++id;
    }
    return fed;
}

Simulation make_simulation(const config::ExperimentConfig& raw_cfg) {
    config::ExperimentConfig cfg = config::apply_variant(raw_cfg, raw_cfg.variant);
    cfg.validate();
    Simulation sim;
    sim.cfg = cfg;
    sim.schedule = diffusion::build_noise_schedule(cfg.diffusion.steps,
                                                   diffusion::schedule_kind_from_string(cfg.diffusion.kind));
    sim.federation = build_federation(cfg);
    for (auto& ds : sim.federation.clients) {
        sim.clients.push_back(client::make_client(ds.client_id, ds, cfg.model, cfg.seed));
    }
    sim.server = server::make_server(cfg.model, cfg.seed);
    return sim;
}

server::AggregationReport Simulation::step() {
    return server::run_round(server, clients, config::round_config(cfg, schedule));
}

void Simulation::save_state(const std::string& path) const {
    checkpoint::TensorMap tensors;
    nlohmann::json meta;
    meta["kind"] = "simulation_state";
    meta["config_hash"] = cfg.hash();
    meta["round"] = server.round;
    meta["code_version"] = kCodeVersion;

    for (const auto& c : clients) {
        std::string pre = "client" + std::to_string(c.client_id) + "/";
        for (const auto& [name, t] : c.params.tensors) tensors[pre + "params/" + name] = t;
        for (const auto& [name, t] : c.optimizer.m) tensors[pre + "adam_m/" + name] = t;
        for (const auto& [name, t] : c.optimizer.v) tensors[pre + "adam_v/" + name] = t;
        meta["clients"][std::to_string(c.client_id)] = {
            {"rng", checkpoint::rng_to_string(c.rng)},
            {"adam_step", c.optimizer.step},
        };
    }
    for (const auto& [name, t] : server.global_encoder) tensors["server/encoder/" + name] = t;
    if (server.global_prototype.has_value()) {
        tensors["server/global_prototype"] = *server.global_prototype;
    }
    int r = 0;
    for (const auto& round_protos : server.prototype_history) {
        for (std::size_t k = 0; k < round_protos.size(); ++k) {
            tensors["server/history/" + std::to_string(r) + "/" + std::to_string(k)] = round_protos[k];
        }
        ++r;
    }
    meta["history_rounds"] = r;
    if (server.classifier.has_value()) {
        for (const auto& [name, t] : *server.classifier) tensors["server/classifier/" + name] = t;
    }
    checkpoint::save_tensors(tensors, path, meta);
}

Simulation Simulation::resume(const config::ExperimentConfig& cfg, const std::string& state_path) {
    Simulation sim = make_simulation(cfg);
    checkpoint::Loaded loaded = checkpoint::load_tensors(state_path);
    const nlohmann::json& meta = loaded.metadata;
    if (meta.value("kind", "") != "simulation_state") {
        throw std::runtime_error("resume: " + state_path + " is not a simulation state file");
    }
    if (meta.value("config_hash", "") != sim.cfg.hash()) {
        throw std::runtime_error("resume: state was produced by a different config");
    }
    sim.server.round = meta.at("round").get<int>();

    for (auto& c : sim.clients) {
        std::string pre = "client" + std::to_string(c.client_id) + "/";
        const auto& cm = meta.at("clients").at(std::to_string(c.client_id));
        c.rng = checkpoint::rng_from_string(cm.at("rng").get<std::string>());
        c.optimizer.step = cm.at("adam_step").get<long>();
        for (auto& [name, t] : c.params.tensors) t = loaded.tensors.at(pre + "params/" + name);
        c.optimizer.ensure_shapes(c.params);
        for (auto& [name, t] : c.optimizer.m) t = loaded.tensors.at(pre + "adam_m/" + name);
        for (auto& [name, t] : c.optimizer.v) t = loaded.tensors.at(pre + "adam_v/" + name);
    }
    for (auto& [name, t] : sim.server.global_encoder) t = loaded.tensors.at("server/encoder/" + name);
    if (loaded.tensors.count("server/global_prototype")) {
        sim.server.global_prototype = loaded.tensors.at("server/global_prototype");
    }
    sim.server.prototype_history.clear();
    int hist = meta.value("history_rounds", 0);
    for (int r = 0; r < hist; ++r) {
        std::vector<num::Matrix> round_protos;
        for (std::size_t k = 0; k < sim.clients.size(); ++k) {
            round_protos.push_back(
                loaded.tensors.at("server/history/" + std::to_string(r) + "/" + std::to_string(k)));
        }
        sim.server.prototype_history.push_back(std::move(round_protos));
    }
    server::ClassifierParams clf;
    for (const auto& [name, t] : loaded.tensors) {
        if (name.rfind("server/classifier/", 0) == 0) clf[name.substr(18)] = t;
    }
    if (!clf.empty()) sim.server.classifier = clf;
    return sim;
}

eval::MetricsReport evaluate_federation(const Simulation& sim, eval::Protocol protocol) {
    eval::MetricsReport merged;
    merged.protocol = protocol;
    merged.sample_count = protocol == eval::Protocol::probabilistic ? sim.cfg.eval.sample_count : 0;
    merged.seed = sim.cfg.eval.seed;

    for (const auto& c : sim.clients) {
        model::ModelParams params = c.params;
        params.set_encoder_tensors(sim.server.global_encoder);

        data::FederationDataset view;
        if (protocol == eval::Protocol::zero_shot) {
            view.unseen_domain = sim.federation.unseen_domain;
        } else {
            view.held_out.push_back(sim.federation.held_out.at(static_cast<std::size_t>(c.client_id)));
        }
        eval::MetricsReport part = eval::evaluate(params, view, protocol, sim.schedule, sim.cfg.eval);
        for (const auto& [key, metrics] : part.entries) {
            std::string merged_key = protocol == eval::Protocol::zero_shot
                                         ? "model" + std::to_string(c.client_id) + "_" + key
                                         : key;
            merged.entries[merged_key] = metrics;
        }
    }
    std::map<std::string, double> sums;
    std::map<std::string, int> counts;
    for (const auto& [key, metrics] : merged.entries) {
        for (const auto& [name, value] : metrics) {
            sums[name] += value;
            counts[name] += 1;
        }
    }
    for (const auto& [name, total] : sums) merged.aggregate[name] = total / counts[name];
    return merged;
}

namespace {

nlohmann::json report_to_json(const server::AggregationReport& r, const std::string& config_hash) {
    nlohmann::json j;
    j["round"] = r.round;
    j["config_hash"] = config_hash;
    j["invariance"] = std::vector<double>(r.invariance.data(), r.invariance.data() + r.invariance.size());
    j["deviation"] = std::vector<double>(r.deviation.data(), r.deviation.data() + r.deviation.size());
    j["score"] = std::vector<double>(r.score.data(), r.score.data() + r.score.size());
    j["weight"] = std::vector<double>(r.weight.data(), r.weight.data() + r.weight.size());
    j["global_prototype_norm"] = r.global_prototype.norm();
    nlohmann::json losses = nlohmann::json::array();
    for (const auto& t : r.client_losses) {
        losses.push_back({{"task", t.task}, {"dom", t.dom}, {"align", t.align}, {"total", t.total}});
    }
    j["client_losses"] = losses;
    return j;
}

void write_metrics(const eval::MetricsReport& report, const std::string& stem,
                   const std::string& config_hash) {
    nlohmann::json j = report.to_json();
    j["config_hash"] = config_hash;
    j["code_version"] = kCodeVersion;
    std::ofstream(stem + ".json") << j.dump(2) << "\n";
    std::ofstream csv(stem + ".csv");
    csv << "# config_hash=" << config_hash << "\n" << report.to_csv();
}

}  // namespace

void run_experiment(const config::ExperimentConfig& raw_cfg) {
    Simulation sim = make_simulation(raw_cfg);
    const config::ExperimentConfig& cfg = sim.cfg;
    std::string hash = cfg.hash();

    fs::create_directories(cfg.out_dir);
    std::ofstream(fs::path(cfg.out_dir) / "config.json") << cfg.to_json().dump(2) << "\n";
    {
        nlohmann::json manifest;
        manifest["config_hash"] = hash;
        manifest["seed"] = cfg.seed;
        manifest["code_version"] = kCodeVersion;
        manifest["variant"] = config::variant_to_string(cfg.variant);
        std::ofstream(fs::path(cfg.out_dir) / "manifest.json") << manifest.dump(2) << "\n";
    }
    if (cfg.federation.kind == "synthetic") {
        data::write_manifest(sim.federation, cfg.seed, (fs::path(cfg.out_dir) / "dataset.json").string());
    }

    std::ofstream log(fs::path(cfg.out_dir) / "rounds.jsonl");
    for (int r = 0; r < cfg.rounds; ++r) {
        server::AggregationReport report = sim.step();
        log << report_to_json(report, hash).dump() << "\n";
        log.flush();
        if (cfg.checkpoint_every > 0 && report.round % cfg.checkpoint_every == 0) {
            sim.save_state((fs::path(cfg.out_dir) / "state_latest.ckpt").string());
            checkpoint::save_tensors(sim.server.global_encoder,
                                     (fs::path(cfg.out_dir) / "encoder_latest.ckpt").string(),
                                     {{"kind", "encoder"}, {"round", report.round},
                                      {"config_hash", hash}});
        }
    }
    sim.save_state((fs::path(cfg.out_dir) / "state_final.ckpt").string());
    checkpoint::save_tensors(sim.server.global_encoder,
                             (fs::path(cfg.out_dir) / "encoder_final.ckpt").string(),
                             {{"kind", "encoder"}, {"round", sim.server.round},
                              {"config_hash", hash}});

    write_metrics(evaluate_federation(sim, eval::Protocol::in_domain),
                  (fs::path(cfg.out_dir) / "metrics_in_domain").string(), hash);
    write_metrics(evaluate_federation(sim, eval::Protocol::probabilistic),
                  (fs::path(cfg.out_dir) / "metrics_probabilistic").string(), hash);
    if (!sim.federation.unseen_domain.empty()) {
        write_metrics(evaluate_federation(sim, eval::Protocol::zero_shot),
                      (fs::path(cfg.out_dir) / "metrics_zero_shot").string(), hash);
    }
}

eval::MetricsReport run_ablation(const config::ExperimentConfig& base, config::Variant variant) {
    Simulation sim = make_simulation(config::apply_variant(base, variant));
    for (int r = 0; r < sim.cfg.rounds; ++r) sim.step();
    return evaluate_federation(sim, sim.federation.unseen_domain.empty()
                                        ? eval::Protocol::in_domain
                                        : eval::Protocol::zero_shot);
}

namespace {

// Hash of the config fields that must agree for runs to be comparable: the
// variant knobs (variant name, loss weights, aggregation) are allowed to
// differ, everything else must match.
std::string family_hash(nlohmann::json cfg_json) {
    cfg_json.erase("variant");
    cfg_json.erase("out_dir");
    cfg_json.erase("workers");
    cfg_json.erase("checkpoint_every");
    cfg_json.erase("loss");
    cfg_json.erase("dag");
    std::string dump = cfg_json.dump();
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char ch : dump) {
        h ^= ch;
        h *= 0x100000001B3ULL;
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

}  // namespace

void compare(const std::vector<std::string>& run_dirs, std::ostream& out, bool force) {
    if (run_dirs.size() < 2) throw std::invalid_argument("compare: need at least 2 run directories");

    struct Run {
        std::string name;
        std::string variant;
        std::string fam_hash;
        std::set<std::string> grid;
        std::map<std::string, double> aggregate;  // from zero-shot if present, else in-domain
    };
    std::vector<Run> runs;
    for (const std::string& dir : run_dirs) {
        Run r;
        r.name = fs::path(dir).filename().string();
        nlohmann::json cfg_json;
        std::ifstream cfg_in(fs::path(dir) / "config.json");
        if (!cfg_in) throw std::runtime_error("compare: missing config.json in " + dir);
        cfg_in >> cfg_json;
        r.variant = cfg_json.value("variant", "?");
        r.fam_hash = family_hash(cfg_json);

        fs::path metrics = fs::path(dir) / "metrics_zero_shot.json";
        if (!fs::exists(metrics)) metrics = fs::path(dir) / "metrics_in_domain.json";
        std::ifstream met_in(metrics);
        if (!met_in) throw std::runtime_error("compare: missing metrics in " + dir);
        nlohmann::json mj;
        met_in >> mj;
        for (const auto& [key, _] : mj.at("entries").items()) r.grid.insert(key);
        for (const auto& [name, value] : mj.at("aggregate").items()) {
            r.aggregate[name] = value.get<double>();
        }
        runs.push_back(std::move(r));
    }

    for (std::size_t i = 1; i < runs.size(); ++i) {
        if (runs[i].fam_hash != runs[0].fam_hash && !force) {
            throw std::runtime_error("compare: config hash mismatch between " + runs[0].name + " and " +
                                     runs[i].name + " (use --force to override)");
        }
        if (runs[i].grid != runs[0].grid && !force) {
            std::string msg = "compare: eval grids differ between " + runs[0].name + " and " +
                              runs[i].name + ":";
            for (const auto& k : runs[i].grid) {
                if (!runs[0].grid.count(k)) msg += " +" + k;
            }
            for (const auto& k : runs[0].grid) {
                if (!runs[i].grid.count(k)) msg += " -" + k;
            }
            throw std::runtime_error(msg);
        }
    }

    std::set<std::string> metric_names;
    for (const auto& r : runs)
        for (const auto& [name, _] : r.aggregate) metric_names.insert(name);

    out << "| run | variant |";
    for (const auto& m : metric_names) out << " " << m << " | d" << m << "% |";
    out << "\n|---|---|";
    for (std::size_t i = 0; i < metric_names.size(); ++i) out << "---|---|";
    out << "\n";
    out << std::setprecision(6);
    for (const auto& r : runs) {
        out << "| " << r.name << " | " << r.variant << " |";
        for (const auto& m : metric_names) {
            auto it = r.aggregate.find(m);
            auto base = runs[0].aggregate.find(m);
            if (it == r.aggregate.end()) {
                out << " - | - |";
            } else {
                out << " " << it->second << " |";
                if (base != runs[0].aggregate.end() && base->second != 0.0) {
                    out << " " << 100.0 * (it->second - base->second) / base->second << " |";
                } else {
                    out << " - |";
                }
            }
        }
        out << "\n";
    }
}

}  // namespace fedtrl::experiment
