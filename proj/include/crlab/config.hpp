#pragma once

// Flat key=value configuration, run manifests and content hashing.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crlab/checkpoint.hpp"
#include "crlab/data.hpp"
#include "crlab/errors.hpp"
#include "crlab/trainer.hpp"

namespace crlab {

/// Settings for the composite experiments.
struct ExperimentSettings {
    std::size_t seeds = 5;
    std::uint64_t first_seed = 0;
    std::vector<double> ood_factors = {0.0, 0.5, 1.0, 2.0};  // multiples of the unlabeled count
    OodPreset ood_preset = OodPreset::far;
    std::string axis = "loss_mode";
    std::vector<std::string> values;  // empty: axis defaults
    bool reference_arms = true;
    std::size_t jobs = 1;

    std::vector<std::uint64_t> seed_list() const {
        std::vector<std::uint64_t> out;
        for (std::size_t i = 0; i < seeds; ++i) out.push_back(first_seed + i);
        return out;
    }
};

struct LabConfig {
    TrainConfig train;
    DatasetSpec data;
    ExperimentSettings experiment;

    /// Model input/output sizes follow the dataset.
    TrainConfig resolved_train() const {
        TrainConfig t = train;
        t.model.input_dim = data.input_dim;
        t.model.num_classes = data.num_classes;
        return t;
    }
    DatasetSpec resolved_data() const {
        DatasetSpec d = data;
        d.seed = train.seed;
        return d;
    }
};

// ---------------------------------------------------------------------------
// Value parsing.

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) out.push_back(trim(cur));
    return out;
}

inline double to_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out = 0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size()) throw ConfigError("key '" + key + "': '" + v + "' is not a number");
    return out;
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
        throw ConfigError("key '" + key + "': '" + v + "' is not a non-negative integer");
    try {
        return std::stoull(v);
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': '" + v + "' is out of range");
    }
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("key '" + key + "': '" + v + "' is not a boolean");
}

inline std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace detail

inline OodPreset parse_ood_preset(const std::string& s) {
    if (s == "far") return OodPreset::far;
    if (s == "near") return OodPreset::near;
    throw ConfigError("unknown ood preset '" + s + "'");
}

inline const char* to_string(OodPreset p) { return p == OodPreset::far ? "far" : "near"; }

inline PseudoSource parse_pseudo_source(const std::string& s) {
    if (s == "weak") return PseudoSource::weak;
    if (s == "clean") return PseudoSource::clean;
    throw ConfigError("unknown pseudo_source '" + s + "'");
}

inline const char* to_string(PseudoSource p) { return p == PseudoSource::weak ? "weak" : "clean"; }

// ---------------------------------------------------------------------------
// Key table.

struct ConfigKey {
    const char* name;
    void (*set)(LabConfig&, const std::string& key, const std::string& value);
    std::string (*get)(const LabConfig&);
};

#define CRLAB_UINT_KEY(NAME, FIELD)                                                                    \
    ConfigKey {                                                                                        \
        NAME, [](LabConfig& c, const std::string& k, const std::string& v) {                           \
            c.FIELD = static_cast<decltype(c.FIELD)>(detail::to_uint(k, v));                           \
        },                                                                                             \
            [](const LabConfig& c) { return std::to_string(c.FIELD); }                                 \
    }
#define CRLAB_REAL_KEY(NAME, FIELD)                                                                    \
    ConfigKey {                                                                                        \
        NAME, [](LabConfig& c, const std::string& k, const std::string& v) { c.FIELD = detail::to_double(k, v); }, \
            [](const LabConfig& c) { return detail::fmt(c.FIELD); }                                    \
    }

inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        CRLAB_UINT_KEY("batch_size", train.batch_size),
        CRLAB_UINT_KEY("mu", train.mu),
        CRLAB_UINT_KEY("views", train.views),
        CRLAB_REAL_KEY("delta", train.delta),
        CRLAB_REAL_KEY("delta_cr", train.delta_cr),
        CRLAB_REAL_KEY("tau", train.tau),
        CRLAB_REAL_KEY("lambda_cs", train.lambda_cs),
        CRLAB_REAL_KEY("lambda_cr", train.lambda_cr),
        CRLAB_REAL_KEY("lr", train.lr),
        CRLAB_REAL_KEY("momentum", train.momentum),
        CRLAB_REAL_KEY("weight_decay", train.weight_decay),
        CRLAB_REAL_KEY("ema_momentum", train.ema_momentum),
        CRLAB_UINT_KEY("steps", train.steps),
        CRLAB_UINT_KEY("eval_interval", train.eval_interval),
        CRLAB_UINT_KEY("seed", train.seed),
        {"pseudo_source",
         [](LabConfig& c, const std::string&, const std::string& v) { c.train.pseudo_source = parse_pseudo_source(v); },
         [](const LabConfig& c) { return std::string(to_string(c.train.pseudo_source)); }},
        {"pseudo_from_ema",
         [](LabConfig& c, const std::string& k, const std::string& v) { c.train.pseudo_from_ema = detail::to_bool(k, v); },
         [](const LabConfig& c) { return std::string(c.train.pseudo_from_ema ? "true" : "false"); }},
        {"loss_mode",
         [](LabConfig& c, const std::string&, const std::string& v) { c.train.loss_mode = parse_loss_mode(v); },
         [](const LabConfig& c) { return std::string(to_string(c.train.loss_mode)); }},
        CRLAB_UINT_KEY("silhouette_samples", train.silhouette_samples),
        {"hidden",
         [](LabConfig& c, const std::string& k, const std::string& v) {
             c.train.model.hidden.clear();
             if (v == "none") return;
             for (const auto& part : detail::split(v, ','))
                 c.train.model.hidden.push_back(static_cast<std::size_t>(detail::to_uint(k, part)));
         },
         [](const LabConfig& c) {
             std::string s;
             for (std::size_t i = 0; i < c.train.model.hidden.size(); ++i)
                 s += (i ? "," : "") + std::to_string(c.train.model.hidden[i]);
             return s.empty() ? std::string("none") : s;
         }},
        CRLAB_UINT_KEY("feature_dim", train.model.feature_dim),
        CRLAB_UINT_KEY("proj_hidden", train.model.proj_hidden),
        CRLAB_UINT_KEY("proj_dim", train.model.proj_dim),
        {"activation",
         [](LabConfig& c, const std::string&, const std::string& v) { c.train.model.activation = parse_nonlinearity(v); },
         [](const LabConfig& c) { return to_string(c.train.model.activation); }},
        CRLAB_REAL_KEY("leaky_slope", train.model.leaky_slope),
        CRLAB_REAL_KEY("weak_noise", train.augment.weak_noise),
        CRLAB_REAL_KEY("strong_noise", train.augment.strong_noise),
        CRLAB_REAL_KEY("drop_prob", train.augment.drop_prob),
        CRLAB_REAL_KEY("scale_jitter", train.augment.scale_jitter),
        CRLAB_UINT_KEY("num_classes", data.num_classes),
        CRLAB_UINT_KEY("input_dim", data.input_dim),
        CRLAB_REAL_KEY("center_radius", data.center_radius),
        CRLAB_REAL_KEY("noise_scale", data.noise_scale),
        CRLAB_UINT_KEY("labels_per_class", data.labels_per_class),
        CRLAB_UINT_KEY("unlabeled_count", data.unlabeled_count),
        CRLAB_UINT_KEY("test_count", data.test_count),
        CRLAB_UINT_KEY("seeds", experiment.seeds),
        CRLAB_UINT_KEY("first_seed", experiment.first_seed),
        {"ood_factors",
         [](LabConfig& c, const std::string& k, const std::string& v) {
             c.experiment.ood_factors.clear();
             for (const auto& part : detail::split(v, ','))
                 c.experiment.ood_factors.push_back(detail::to_double(k, part));
         },
         [](const LabConfig& c) {
             std::string s;
             for (std::size_t i = 0; i < c.experiment.ood_factors.size(); ++i)
                 s += (i ? "," : "") + detail::fmt(c.experiment.ood_factors[i]);
             return s;
         }},
        {"ood_preset",
         [](LabConfig& c, const std::string&, const std::string& v) { c.experiment.ood_preset = parse_ood_preset(v); },
         [](const LabConfig& c) { return std::string(to_string(c.experiment.ood_preset)); }},
        {"axis", [](LabConfig& c, const std::string&, const std::string& v) { c.experiment.axis = v; },
         [](const LabConfig& c) { return c.experiment.axis; }},
        {"values",
         [](LabConfig& c, const std::string&, const std::string& v) { c.experiment.values = detail::split(v, ','); },
         [](const LabConfig& c) {
             std::string s;
             for (std::size_t i = 0; i < c.experiment.values.size(); ++i)
                 s += (i ? "," : "") + c.experiment.values[i];
             return s;
         }},
        {"reference_arms",
         [](LabConfig& c, const std::string& k, const std::string& v) {
             c.experiment.reference_arms = detail::to_bool(k, v);
         },
         [](const LabConfig& c) { return std::string(c.experiment.reference_arms ? "true" : "false"); }},
        CRLAB_UINT_KEY("jobs", experiment.jobs),
    };
    return keys;
}

#undef CRLAB_UINT_KEY
#undef CRLAB_REAL_KEY

inline const ConfigKey& find_key(const std::string& key) {
    for (const auto& k : config_keys())
        if (key == k.name) return k;
    throw ConfigError("unknown config key '" + key + "'");
}

/// An empty value counts as a missing key.
inline void apply_setting(LabConfig& cfg, const std::string& key, const std::string& value) {
    const auto& k = find_key(key);
    const std::string v = detail::trim(value);
    if (v.empty()) throw ConfigError("missing value for config key '" + key + "'");
    k.set(cfg, key, v);
}

using Settings = std::vector<std::pair<std::string, std::string>>;

/// Parses `key = value` lines; `#` starts a comment.
inline Settings parse_settings(std::istream& is, const std::string& origin = "config") {
    Settings out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
        out.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    return out;
}

inline Settings read_settings_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    return parse_settings(is, path);
}

/// Parses "key=value".
inline std::pair<std::string, std::string> parse_assignment(const std::string& s) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + s + "'");
    return {detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1))};
}

/// Defaults, then CRLAB_SEED, then the file, then flags.
inline LabConfig build_config(const Settings& file, const Settings& flags) {
    LabConfig cfg;
    if (const char* env = std::getenv("CRLAB_SEED"); env && *env) apply_setting(cfg, "seed", env);
    for (const auto& [k, v] : file) apply_setting(cfg, k, v);
    for (const auto& [k, v] : flags) apply_setting(cfg, k, v);
    cfg.resolved_train().validate();
    cfg.resolved_data().validate();
    return cfg;
}

inline std::map<std::string, std::string> config_snapshot(const LabConfig& cfg) {
    std::map<std::string, std::string> out;
    for (const auto& k : config_keys()) out[k.name] = k.get(cfg);
    return out;
}

/// Canonical `key=value` text, sorted by key. Empty lists are left out, which
/// reads back as their empty default.
inline std::string config_text(const LabConfig& cfg) {
    std::string s;
    for (const auto& [k, v] : config_snapshot(cfg))
        if (!v.empty()) s += k + "=" + v + "\n";
    return s;
}

// ---------------------------------------------------------------------------
// Manifest.

inline std::uint64_t fnv1a64(const std::string& data) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

struct RunManifest {
    std::string command;
    std::map<std::string, std::string> config;
    std::string config_hash;
    std::vector<std::string> outputs;  // relative to the output directory
    std::string started;
    std::string finished;  // empty until the command completes
    bool complete = false;

    nlohmann::json to_json() const {
        return {{"command", command},   {"config", config},   {"config_hash", config_hash},
                {"outputs", outputs},   {"started", started}, {"finished", finished},
                {"complete", complete}};
    }

    static RunManifest from_json(const nlohmann::json& j) {
        RunManifest m;
        m.command = j.at("command").get<std::string>();
        m.config = j.at("config").get<std::map<std::string, std::string>>();
        m.config_hash = j.at("config_hash").get<std::string>();
        m.outputs = j.at("outputs").get<std::vector<std::string>>();
        m.started = j.at("started").get<std::string>();
        m.finished = j.at("finished").get<std::string>();
        m.complete = j.at("complete").get<bool>();
        return m;
    }
};

inline std::string config_hash(const std::string& command, const LabConfig& cfg) {
    return hex64(fnv1a64(command + "\n" + config_text(cfg)));
}

inline RunManifest make_manifest(const std::string& command, const LabConfig& cfg) {
    RunManifest m;
    m.command = command;
    m.config = config_snapshot(cfg);
    m.config_hash = config_hash(command, cfg);
    m.started = utc_timestamp();
    return m;
}

}  // namespace crlab
