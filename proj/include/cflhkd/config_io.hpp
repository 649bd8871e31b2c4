#pragma once

// Key-value run configuration files (schema version 1). Lines are
// `key = value`, `#` starts a comment, unknown keys are rejected. The same
// key table backs CLI overrides (`--set key=value` style usage).
//
// Drift events use a compact one-line form, repeatable:
//   drift = round:50 kind:subset_switch clients:0-49
//   drift = round:30 kind:label_permutation clients:1,4,7 perm:reverse
//   drift = round:20 kind:feature_shift clients:0-9 shift:1.5
// `perm` accepts identity, reverse, swap_halves, or an explicit comma list.
// `from`/`to` override the default half-swap of subset_switch.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cflhkd/sim.hpp"

namespace cflhkd {

inline constexpr int kConfigSchemaVersion = 1;

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double out = 0;
    try {
        out = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw config_error("config: bad number for " + key + ": " + v);
    }
    if (pos != v.size()) throw config_error("config: bad number for " + key + ": " + v);
    return out;
}

inline long long parse_int(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    long long out = 0;
    try {
        out = std::stoll(v, &pos);
    } catch (const std::exception&) {
        throw config_error("config: bad integer for " + key + ": " + v);
    }
    if (pos != v.size()) throw config_error("config: bad integer for " + key + ": " + v);
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw config_error("config: bad boolean for " + key + ": " + v);
}

// "0-49" or "1,4,7" or a single id
inline std::vector<int> parse_id_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, ',')) {
        const auto dash = part.find('-');
        if (dash != std::string::npos) {
            const int lo = static_cast<int>(parse_int(key, part.substr(0, dash)));
            const int hi = static_cast<int>(parse_int(key, part.substr(dash + 1)));
            if (hi < lo) throw config_error("config: bad range for " + key + ": " + part);
            for (int i = lo; i <= hi; ++i) out.push_back(i);
        } else {
            out.push_back(static_cast<int>(parse_int(key, part)));
        }
    }
    if (out.empty()) throw config_error("config: empty id list for " + key);
    return out;
}

inline DriftEvent parse_drift_value(const std::string& value, const ModelSpec& model) {
    DriftEvent e;
    bool have_kind = false;
    std::string perm_spec, from_spec, to_spec;
    std::stringstream ss(value);
    std::string tok;
    while (ss >> tok) {
        const auto colon = tok.find(':');
        if (colon == std::string::npos)
            throw config_error("config: drift token needs key:value, got " + tok);
        const std::string k = tok.substr(0, colon);
        const std::string v = tok.substr(colon + 1);
        if (k == "round") {
            e.round = static_cast<int>(parse_int("drift.round", v));
        } else if (k == "kind") {
            have_kind = true;
            if (v == "label_permutation") {
                e.kind = DriftKind::label_permutation;
            } else if (v == "subset_switch" || v == "label_subset_switch") {
                e.kind = DriftKind::label_subset_switch;
            } else if (v == "feature_shift") {
                e.kind = DriftKind::feature_shift;
            } else {
                throw config_error("config: unknown drift kind " + v);
            }
        } else if (k == "clients") {
            e.affected_clients = parse_id_list("drift.clients", v);
        } else if (k == "perm") {
            perm_spec = v;
        } else if (k == "from") {
            from_spec = v;
        } else if (k == "to") {
            to_spec = v;
        } else if (k == "shift") {
            e.feature_shift_scale = parse_double("drift.shift", v);
        } else {
            throw config_error("config: unknown drift key " + k);
        }
    }
    if (!have_kind) throw config_error("config: drift needs kind:...");
    const auto C = static_cast<std::int32_t>(model.num_classes);
    if (e.kind == DriftKind::label_permutation) {
        if (perm_spec.empty() || perm_spec == "identity") {
            for (std::int32_t c = 0; c < C; ++c) e.label_perm.push_back(c);
        } else if (perm_spec == "reverse") {
            for (std::int32_t c = C - 1; c >= 0; --c) e.label_perm.push_back(c);
        } else if (perm_spec == "swap_halves") {
            const auto m = make_subset_switch(e.round, {0}, model.num_classes)
                               .label_map(model.num_classes);
            e.label_perm = m;
        } else {
            for (int v : parse_id_list("drift.perm", perm_spec))
                e.label_perm.push_back(static_cast<std::int32_t>(v));
        }
    } else if (e.kind == DriftKind::label_subset_switch) {
        if (from_spec.empty() != to_spec.empty())
            throw config_error("config: drift from/to must be given together");
        if (from_spec.empty()) {
            const auto d = make_subset_switch(e.round, e.affected_clients, model.num_classes);
            e.from_subset = d.from_subset;
            e.to_subset = d.to_subset;
        } else {
            for (int v : parse_id_list("drift.from", from_spec))
                e.from_subset.push_back(static_cast<std::int32_t>(v));
            for (int v : parse_id_list("drift.to", to_spec))
                e.to_subset.push_back(static_cast<std::int32_t>(v));
        }
    }
    return e;
}

}  // namespace detail

// Apply one key-value pair to a config. Used for both files and overrides.
inline void apply_config_key(SimConfig& cfg, const std::string& key, const std::string& value,
                             bool* saw_version = nullptr) {
    using detail::parse_bool;
    using detail::parse_double;
    using detail::parse_int;
    if (key == "schema_version") {
        if (parse_int(key, value) != kConfigSchemaVersion)
            throw config_error("config: unsupported schema_version " + value);
        if (saw_version) *saw_version = true;
    } else if (key == "seed") {
        cfg.seed = static_cast<std::uint64_t>(parse_int(key, value));
    } else if (key == "rounds") {
        cfg.rounds = static_cast<int>(parse_int(key, value));
    } else if (key == "clients") {
        cfg.clients = static_cast<int>(parse_int(key, value));
    } else if (key == "initial_clusters") {
        cfg.initial_clusters = static_cast<int>(parse_int(key, value));
    } else if (key == "participation") {
        cfg.participation = parse_double(key, value);
    } else if (key == "method") {
        cfg.method = parse_method(value);
    } else if (key == "local_epochs") {
        cfg.local_epochs = static_cast<int>(parse_int(key, value));
    } else if (key == "batch_size") {
        cfg.batch_size = static_cast<std::size_t>(parse_int(key, value));
    } else if (key == "lr") {
        cfg.sgd.learning_rate = parse_double(key, value);
    } else if (key == "momentum") {
        cfg.sgd.momentum = parse_double(key, value);
    } else if (key == "weight_decay") {
        cfg.sgd.weight_decay = parse_double(key, value);
    } else if (key == "lr_decay") {
        cfg.sgd.lr_decay = parse_double(key, value);
    } else if (key == "decay_every") {
        cfg.sgd.decay_every = static_cast<int>(parse_int(key, value));
    } else if (key == "rho_lambda") {
        cfg.rho_lambda = parse_double(key, value);
    } else if (key == "lambda0") {
        cfg.refine.lambda0 = parse_double(key, value);
    } else if (key == "refine_lr") {
        cfg.refine.refine_lr = parse_double(key, value);
    } else if (key == "refine_steps") {
        cfg.refine.refine_steps = static_cast<int>(parse_int(key, value));
    } else if (key == "gamma") {
        cfg.fdc.gamma = parse_double(key, value);
    } else if (key == "delta") {
        cfg.fdc.delta = parse_double(key, value);
    } else if (key == "phi") {
        cfg.fdc.phi = parse_double(key, value);
    } else if (key == "recluster_every") {
        cfg.fdc.recluster_every = static_cast<int>(parse_int(key, value));
    } else if (key == "edge_every") {
        cfg.edge_every = static_cast<int>(parse_int(key, value));
    } else if (key == "cloud_every") {
        cfg.cloud_every = static_cast<int>(parse_int(key, value));
    } else if (key == "fedprox_mu") {
        cfg.fedprox_mu = parse_double(key, value);
    } else if (key == "input_dim") {
        cfg.model.input_dim = static_cast<std::size_t>(parse_int(key, value));
    } else if (key == "num_classes") {
        cfg.model.num_classes = static_cast<std::size_t>(parse_int(key, value));
    } else if (key == "hidden_dim") {
        cfg.model.hidden_dim = static_cast<std::size_t>(parse_int(key, value));
    } else if (key == "tasks") {
        cfg.data.tasks = static_cast<int>(parse_int(key, value));
    } else if (key == "separation") {
        cfg.data.separation = parse_double(key, value);
    } else if (key == "task_shift") {
        cfg.data.task_shift = parse_double(key, value);
    } else if (key == "class_radius") {
        cfg.data.class_radius = parse_double(key, value);
    } else if (key == "noise_sigma") {
        cfg.data.noise_sigma = parse_double(key, value);
    } else if (key == "samples_min") {
        cfg.data.samples_min = static_cast<std::size_t>(parse_int(key, value));
    } else if (key == "samples_max") {
        cfg.data.samples_max = static_cast<std::size_t>(parse_int(key, value));
    } else if (key == "validation_fraction") {
        cfg.data.validation_fraction = parse_double(key, value);
    } else if (key == "dirichlet_alpha") {
        cfg.data.dirichlet_alpha = parse_double(key, value);
    } else if (key == "label_noise") {
        cfg.data.label_noise = parse_double(key, value);
    } else if (key == "label_noise_tasks") {
        cfg.data.label_noise_tasks = static_cast<int>(parse_int(key, value));
    } else if (key == "target_accuracy") {
        cfg.target_accuracy = parse_double(key, value);
    } else if (key == "force_alpha_one") {
        cfg.force_alpha_one = parse_bool(key, value);
    } else if (key == "freeze_clusters") {
        cfg.freeze_clusters = parse_bool(key, value);
    } else if (key == "overwrite_clusters") {
        cfg.overwrite_clusters = parse_bool(key, value);
    } else if (key == "freeze_training_after") {
        cfg.freeze_training_after = static_cast<int>(parse_int(key, value));
    } else if (key == "drift") {
        cfg.drift.push_back(detail::parse_drift_value(value, cfg.model));
    } else {
        throw config_error("config: unknown key " + key);
    }
}

inline SimConfig parse_sim_config(std::istream& in) {
    SimConfig cfg;
    bool saw_version = false;
    std::string line;
    int lineno = 0;
    std::vector<std::string> drift_lines;  // parsed last; they need the final model shape
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error("config: line " + std::to_string(lineno) + " is not key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key == "drift") {
            drift_lines.push_back(value);
            continue;
        }
        apply_config_key(cfg, key, value, &saw_version);
    }
    if (!saw_version) throw config_error("config: missing schema_version");
    for (const auto& d : drift_lines) apply_config_key(cfg, "drift", d);
    cfg.validate();
    return cfg;
}

inline SimConfig load_sim_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw config_error("config: cannot open " + path);
    return parse_sim_config(f);
}

// Render a config back to the file format (drift events excluded; they are
// echoed into events.jsonl instead).
inline std::string write_sim_config(const SimConfig& cfg) {
    std::ostringstream out;
    out << "schema_version = " << kConfigSchemaVersion << '\n';
    out << "seed = " << cfg.seed << '\n';
    out << "rounds = " << cfg.rounds << '\n';
    out << "clients = " << cfg.clients << '\n';
    out << "initial_clusters = " << cfg.initial_clusters << '\n';
    out << "participation = " << format_double(cfg.participation) << '\n';
    out << "method = " << method_name(cfg.method) << '\n';
    out << "local_epochs = " << cfg.local_epochs << '\n';
    out << "batch_size = " << cfg.batch_size << '\n';
    out << "lr = " << format_double(cfg.sgd.learning_rate) << '\n';
    out << "momentum = " << format_double(cfg.sgd.momentum) << '\n';
    out << "weight_decay = " << format_double(cfg.sgd.weight_decay) << '\n';
    out << "lr_decay = " << format_double(cfg.sgd.lr_decay) << '\n';
    out << "decay_every = " << cfg.sgd.decay_every << '\n';
    out << "rho_lambda = " << format_double(cfg.rho_lambda) << '\n';
    out << "lambda0 = " << format_double(cfg.refine.lambda0) << '\n';
    out << "refine_lr = " << format_double(cfg.refine.refine_lr) << '\n';
    out << "refine_steps = " << cfg.refine.refine_steps << '\n';
    out << "gamma = " << format_double(cfg.fdc.gamma) << '\n';
    out << "delta = " << format_double(cfg.fdc.delta) << '\n';
    out << "phi = " << format_double(cfg.fdc.phi) << '\n';
    out << "recluster_every = " << cfg.fdc.recluster_every << '\n';
    out << "edge_every = " << cfg.edge_every << '\n';
    out << "cloud_every = " << cfg.cloud_every << '\n';
    out << "fedprox_mu = " << format_double(cfg.fedprox_mu) << '\n';
    out << "input_dim = " << cfg.model.input_dim << '\n';
    out << "num_classes = " << cfg.model.num_classes << '\n';
    out << "hidden_dim = " << cfg.model.hidden_dim << '\n';
    out << "tasks = " << cfg.data.tasks << '\n';
    out << "separation = " << format_double(cfg.data.separation) << '\n';
    out << "task_shift = " << format_double(cfg.data.task_shift) << '\n';
    out << "class_radius = " << format_double(cfg.data.class_radius) << '\n';
    out << "noise_sigma = " << format_double(cfg.data.noise_sigma) << '\n';
    out << "samples_min = " << cfg.data.samples_min << '\n';
    out << "samples_max = " << cfg.data.samples_max << '\n';
    out << "validation_fraction = " << format_double(cfg.data.validation_fraction) << '\n';
    out << "dirichlet_alpha = " << format_double(cfg.data.dirichlet_alpha) << '\n';
    out << "label_noise = " << format_double(cfg.data.label_noise) << '\n';
    out << "label_noise_tasks = " << cfg.data.label_noise_tasks << '\n';
    out << "target_accuracy = " << format_double(cfg.target_accuracy) << '\n';
    out << "force_alpha_one = " << (cfg.force_alpha_one ? "true" : "false") << '\n';
    out << "freeze_clusters = " << (cfg.freeze_clusters ? "true" : "false") << '\n';
    out << "overwrite_clusters = " << (cfg.overwrite_clusters ? "true" : "false") << '\n';
    out << "freeze_training_after = " << cfg.freeze_training_after << '\n';
    return out.str();
}

}  // namespace cflhkd
