#include "fedtrl/config.hpp"

#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fedtrl::config {

Variant variant_from_string(const std::string& s) {
    if (s == "full") return Variant::full;
    if (s == "no_grl") return Variant::no_grl;
    if (s == "no_proto") return Variant::no_proto;
    if (s == "no_dag") return Variant::no_dag;
    if (s == "fedavg") return Variant::fedavg;
    throw std::invalid_argument("unknown variant '" + s + "' (full|no_grl|no_proto|no_dag|fedavg)");
}

std::string variant_to_string(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::no_grl: return "no_grl";
        case Variant::no_proto: return "no_proto";
        case Variant::no_dag: return "no_dag";
        case Variant::fedavg: return "fedavg";
    }
    return "full";
}

void ExperimentConfig::validate() const {
    auto require = [](bool ok, const std::string& field, const std::string& why) {
        if (!ok) throw std::invalid_argument("config error: " + field + " " + why);
    };
    require(rounds >= 1, "rounds", "must be >= 1");
    require(checkpoint_every >= 0, "checkpoint_every", "must be >= 0");
    require(workers >= 0, "workers", "must be >= 0");
    require(federation.kind == "synthetic" || federation.kind == "csv", "federation.kind",
            "must be 'synthetic' or 'csv'");
    if (federation.kind == "synthetic") {
        require(federation.clients >= 2, "federation.clients", "must be >= 2");
        require(federation.subdomains >= 1, "federation.subdomains", "must be >= 1");
        require(federation.train_windows >= 1, "federation.train_windows", "must be >= 1");
        require(federation.heldout_windows >= 1, "federation.heldout_windows", "must be >= 1");
    } else {
        require(federation.csv_paths.size() >= 2, "federation.csv_paths", "needs >= 2 files");
        require(!federation.csv_column.empty(), "federation.csv_column", "must be set");
        require(federation.csv_stride >= 1, "federation.csv_stride", "must be >= 1");
    }
    require(federation.context_len >= model.patch_len, "federation.context_len",
            "must be at least one patch long");
    require(federation.horizon >= 1, "federation.horizon", "must be >= 1");
    require(model.d_model >= 1 && model.d_model % model.n_heads == 0, "model.d_model",
            "must be a positive multiple of model.n_heads");
    require(model.enc_layers >= 1, "model.enc_layers", "must be >= 1");
    require(model.dec_layers >= 1, "model.dec_layers", "must be >= 1");
    require(model.patch_len >= 1, "model.patch_len", "must be >= 1");
    int ctx_patches = federation.context_len / model.patch_len;
    int gen_patches = (federation.horizon + model.patch_len - 1) / model.patch_len;
    require(model.max_patches >= ctx_patches + gen_patches, "model.max_patches",
            "must cover context plus generated patches (need " +
                std::to_string(ctx_patches + gen_patches) + ")");
    require(diffusion.steps >= 1, "diffusion.steps", "must be >= 1");
    diffusion::schedule_kind_from_string(diffusion.kind);
    require(loss.lambda_dom >= 0.0, "loss.lambda_dom", "must be >= 0");
    require(loss.lambda_align >= 0.0, "loss.lambda_align", "must be >= 0");
    require(loss.grl_lambda >= 0.0, "loss.grl_lambda", "must be >= 0");
    require(loss.nu > 2.0, "loss.nu", "must exceed 2");
    require(loss.warm_frac >= 0.0 && loss.warm_frac <= 1.0, "loss.warm_frac", "must lie in [0,1]");
    require(loss.anneal_frac > 0.0 && loss.anneal_frac <= 1.0, "loss.anneal_frac",
            "must lie in (0,1]");
    require(dag.alpha >= 0.0, "dag.alpha", "must be >= 0");
    require(dag.beta >= 0.0, "dag.beta", "must be >= 0");
    require(dag.tau > 0.0, "dag.tau", "must be positive");
    require(dag.history_rounds >= 1, "dag.history_rounds", "must be >= 1");
    require(dag.classifier_epochs >= 1, "dag.classifier_epochs", "must be >= 1");
    require(dag.classifier_lr > 0.0, "dag.classifier_lr", "must be positive");
    require(train.local_epochs >= 0, "train.local_epochs", "must be >= 0");
    require(train.batch_size >= 1, "train.batch_size", "must be >= 1");
    require(train.learning_rate > 0.0, "train.learning_rate", "must be positive");
    require(!eval.horizons.empty(), "eval.horizons", "must not be empty");
    for (int h : eval.horizons) {
        require(h >= 1 && h <= federation.horizon, "eval.horizons",
                "entries must lie in [1, federation.horizon]");
    }
    require(eval.sample_count >= 2, "eval.sample_count", "must be >= 2");
    require(eval.mase_season >= 1, "eval.mase_season", "must be >= 1");
}

nlohmann::json ExperimentConfig::to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["rounds"] = rounds;
    j["variant"] = variant_to_string(variant);
    j["out_dir"] = out_dir;
    j["workers"] = workers;
    j["checkpoint_every"] = checkpoint_every;
    j["federation"] = {{"kind", federation.kind},
                       {"clients", federation.clients},
                       {"subdomains", federation.subdomains},
                       {"train_windows", federation.train_windows},
                       {"heldout_windows", federation.heldout_windows},
                       {"unseen_windows", federation.unseen_windows},
                       {"context_len", federation.context_len},
                       {"horizon", federation.horizon},
                       {"csv_paths", federation.csv_paths},
                       {"csv_column", federation.csv_column},
                       {"csv_stride", federation.csv_stride}};
    j["model"] = {{"d_model", model.d_model},
                  {"n_heads", model.n_heads},
                  {"enc_layers", model.enc_layers},
                  {"dec_layers", model.dec_layers},
                  {"ffn_dim", model.ffn_dim},
                  {"patch_len", model.patch_len},
                  {"max_patches", model.max_patches},
                  {"classifier_hidden", model.classifier_hidden},
                  {"student_t_nu", model.student_t_nu},
                  {"sigma_floor", model.sigma_floor}};
    j["diffusion"] = {{"steps", diffusion.steps},
                      {"kind", diffusion.kind},
                      {"per_patch_timestep", diffusion.per_patch_timestep}};
    j["loss"] = {{"lambda_dom", loss.lambda_dom},   {"lambda_align", loss.lambda_align},
                 {"grl_lambda", loss.grl_lambda},   {"nu", loss.nu},
                 {"warm_frac", loss.warm_frac},     {"anneal_frac", loss.anneal_frac}};
    j["dag"] = {{"alpha", dag.alpha},
                {"beta", dag.beta},
                {"tau", dag.tau},
                {"invert_invariance", dag.invert_invariance},
                {"history_rounds", dag.history_rounds},
                {"classifier_epochs", dag.classifier_epochs},
                {"classifier_lr", dag.classifier_lr},
                {"classifier_hidden", dag.classifier_hidden},
                {"warm_start", dag.warm_start}};
    j["train"] = {{"local_epochs", train.local_epochs},
                  {"batch_size", train.batch_size},
                  {"learning_rate", train.learning_rate},
                  {"proto_samples", train.proto_samples}};
    j["eval"] = {{"horizons", eval.horizons},
                 {"sample_count", eval.sample_count},
                 {"mase_season", eval.mase_season},
                 {"seed", eval.seed}};
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    auto get = [](const nlohmann::json& obj, const char* key, auto& out) {
        if (obj.contains(key)) obj.at(key).get_to(out);
    };
    get(j, "seed", c.seed);
    get(j, "rounds", c.rounds);
    if (j.contains("variant")) c.variant = variant_from_string(j.at("variant").get<std::string>());
    get(j, "out_dir", c.out_dir);
    get(j, "workers", c.workers);
    get(j, "checkpoint_every", c.checkpoint_every);
    if (j.contains("federation")) {
        const auto& f = j.at("federation");
        get(f, "kind", c.federation.kind);
        get(f, "clients", c.federation.clients);
        get(f, "subdomains", c.federation.subdomains);
        get(f, "train_windows", c.federation.train_windows);
        get(f, "heldout_windows", c.federation.heldout_windows);
        get(f, "unseen_windows", c.federation.unseen_windows);
        get(f, "context_len", c.federation.context_len);
        get(f, "horizon", c.federation.horizon);
        get(f, "csv_paths", c.federation.csv_paths);
        get(f, "csv_column", c.federation.csv_column);
        get(f, "csv_stride", c.federation.csv_stride);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        get(m, "d_model", c.model.d_model);
        get(m, "n_heads", c.model.n_heads);
        get(m, "enc_layers", c.model.enc_layers);
        get(m, "dec_layers", c.model.dec_layers);
        get(m, "ffn_dim", c.model.ffn_dim);
        get(m, "patch_len", c.model.patch_len);
        get(m, "max_patches", c.model.max_patches);
        get(m, "classifier_hidden", c.model.classifier_hidden);
        get(m, "student_t_nu", c.model.student_t_nu);
        get(m, "sigma_floor", c.model.sigma_floor);
    }
    if (j.contains("diffusion")) {
        const auto& d = j.at("diffusion");
        get(d, "steps", c.diffusion.steps);
        get(d, "kind", c.diffusion.kind);
        get(d, "per_patch_timestep", c.diffusion.per_patch_timestep);
    }
    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        get(l, "lambda_dom", c.loss.lambda_dom);
        get(l, "lambda_align", c.loss.lambda_align);
        get(l, "grl_lambda", c.loss.grl_lambda);
        get(l, "nu", c.loss.nu);
        get(l, "warm_frac", c.loss.warm_frac);
        get(l, "anneal_frac", c.loss.anneal_frac);
    }
    if (j.contains("dag")) {
        const auto& d = j.at("dag");
        get(d, "alpha", c.dag.alpha);
        get(d, "beta", c.dag.beta);
        get(d, "tau", c.dag.tau);
        get(d, "invert_invariance", c.dag.invert_invariance);
        get(d, "history_rounds", c.dag.history_rounds);
        get(d, "classifier_epochs", c.dag.classifier_epochs);
        get(d, "classifier_lr", c.dag.classifier_lr);
        get(d, "classifier_hidden", c.dag.classifier_hidden);
        get(d, "warm_start", c.dag.warm_start);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        get(t, "local_epochs", c.train.local_epochs);
        get(t, "batch_size", c.train.batch_size);
        get(t, "learning_rate", c.train.learning_rate);
        get(t, "proto_samples", c.train.proto_samples);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        get(e, "horizons", c.eval.horizons);
        get(e, "sample_count", c.eval.sample_count);
        get(e, "mase_season", c.eval.mase_season);
        get(e, "seed", c.eval.seed);
    }
    return c;
}

std::string ExperimentConfig::hash() const {
    // out_dir and workers cannot change results, so they do not change identity.
    nlohmann::json j = to_json();
    j.erase("out_dir");
    j.erase("workers");
    std::string dump = j.dump();
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char ch : dump) {
        h ^= ch;
        h *= 0x100000001B3ULL;
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

nlohmann::json parse_toml_scalar(const std::string& raw, int line_no) {
    std::string v = trim(raw);
    if (v.empty()) throw std::invalid_argument("toml: empty value at line " + std::to_string(line_no));
    if (v.front() == '"') {
        if (v.size() < 2 || v.back() != '"') {
            throw std::invalid_argument("toml: unterminated string at line " + std::to_string(line_no));
        }
        return v.substr(1, v.size() - 2);
    }
    if (v == "true") return true;
    if (v == "false") return false;
    try {
        if (v.find_first_of(".eE") != std::string::npos &&
            v.find_first_not_of("+-0123456789.eE") == std::string::npos) {
            std::size_t pos;
            double d = std::stod(v, &pos);
            if (pos == v.size()) return d;
        }
        std::size_t pos;
        long long i = std::stoll(v, &pos);
        if (pos == v.size()) return i;
        double d = std::stod(v, &pos);
        if (pos == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw std::invalid_argument("toml: cannot parse value '" + v + "' at line " + std::to_string(line_no));
}

}  // namespace

nlohmann::json parse_toml(const std::string& text) {
    nlohmann::json root = nlohmann::json::object();
    nlohmann::json* section = &root;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::size_t hash_pos = std::string::npos;
        bool in_str = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') in_str = !in_str;
            if (line[i] == '#' && !in_str) {
                hash_pos = i;
                break;
            }
        }
        if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
        std::string s = trim(line);
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') throw std::invalid_argument("toml: bad section header at line " +
                                                             std::to_string(line_no));
            std::string name = trim(s.substr(1, s.size() - 2));
            section = &root[name];
            if (section->is_null()) *section = nlohmann::json::object();
            continue;
        }
        std::size_t eq = s.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("toml: expected key = value at line " + std::to_string(line_no));
        }
        std::string key = trim(s.substr(0, eq));
        std::string value = trim(s.substr(eq + 1));
        if (!value.empty() && value.front() == '[') {
            if (value.back() != ']') {
                throw std::invalid_argument("toml: arrays must be single-line, line " +
                                            std::to_string(line_no));
            }
            nlohmann::json arr = nlohmann::json::array();
            std::stringstream items(value.substr(1, value.size() - 2));
            std::string item;
            while (std::getline(items, item, ',')) {
                if (!trim(item).empty()) arr.push_back(parse_toml_scalar(item, line_no));
            }
            (*section)[key] = arr;
        } else {
            (*section)[key] = parse_toml_scalar(value, line_no);
        }
    }
    return root;
}

ExperimentConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    nlohmann::json j;
    if (path.size() >= 5 && path.substr(path.size() - 5) == ".json") {
        j = nlohmann::json::parse(buf.str());
    } else {
        j = parse_toml(buf.str());
    }
    ExperimentConfig cfg = ExperimentConfig::from_json(j);
    cfg.validate();
    return cfg;
}

void apply_override(nlohmann::json& j, const std::string& dotted) {
    std::size_t eq = dotted.find('=');
    if (eq == std::string::npos) {
        throw std::invalid_argument("override must look like section.key=value: " + dotted);
    }
    std::string path = dotted.substr(0, eq);
    std::string value = dotted.substr(eq + 1);
    nlohmann::json* node = &j;
    std::size_t start = 0;
    while (true) {
        std::size_t dot = path.find('.', start);
        std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (dot == std::string::npos) {
            std::string v = trim(value);
            if (!v.empty() && v.front() == '[' && v.back() == ']') {
                nlohmann::json arr = nlohmann::json::array();
                std::stringstream items(v.substr(1, v.size() - 2));
                std::string item;
                while (std::getline(items, item, ',')) {
                    if (!trim(item).empty()) arr.push_back(parse_toml_scalar(item, 0));
                }
                (*node)[key] = arr;
            } else {
                (*node)[key] = parse_toml_scalar(value, 0);
            }
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

losses::WarmupSchedule warmup_schedule(const ExperimentConfig& cfg) {
    losses::WarmupSchedule w;
    w.warm_rounds = static_cast<int>(cfg.loss.warm_frac * cfg.rounds);
    w.anneal_rounds = std::max(1, static_cast<int>(cfg.loss.anneal_frac * cfg.rounds));
    return w;
}

client::LocalTrainConfig local_train_config(const ExperimentConfig& cfg,
                                            const diffusion::NoiseSchedule& schedule) {
    client::LocalTrainConfig lc;
    lc.local_epochs = cfg.train.local_epochs;
    lc.batch_size = cfg.train.batch_size;
    lc.learning_rate = cfg.train.learning_rate;
    lc.weights.lambda_dom = cfg.loss.lambda_dom;
    lc.weights.lambda_align = cfg.loss.lambda_align;
    lc.weights.grl_lambda = cfg.loss.grl_lambda;
    lc.weights.nu = cfg.loss.nu;
    lc.warmup = warmup_schedule(cfg);
    lc.schedule = schedule;
    lc.per_patch_timestep = cfg.diffusion.per_patch_timestep;
    lc.proto_samples = cfg.train.proto_samples;
    return lc;
}

server::RoundConfig round_config(const ExperimentConfig& cfg,
                                 const diffusion::NoiseSchedule& schedule) {
    server::RoundConfig rc;
    rc.local = local_train_config(cfg, schedule);
    rc.dag = cfg.dag;
    rc.aggregation = (cfg.variant == Variant::no_dag || cfg.variant == Variant::fedavg)
                         ? server::Aggregation::fedavg
                         : server::Aggregation::dag;
    rc.seed = cfg.seed;
    rc.workers = cfg.workers;
    return rc;
}

ExperimentConfig apply_variant(ExperimentConfig cfg, Variant v) {
    cfg.variant = v;
    switch (v) {
        case Variant::full:
        case Variant::no_dag:
            break;  // no_dag only swaps the aggregation, handled in round_config
        case Variant::no_grl:
            cfg.loss.grl_lambda = 0.0;
            cfg.loss.lambda_dom = 0.0;
            break;
        case Variant::no_proto:
            cfg.loss.lambda_align = 0.0;
            break;
        case Variant::fedavg:
            cfg.loss.grl_lambda = 0.0;
            cfg.loss.lambda_dom = 0.0;
            cfg.loss.lambda_align = 0.0;
            break;
    }
    return cfg;
}

}  // namespace fedtrl::config
