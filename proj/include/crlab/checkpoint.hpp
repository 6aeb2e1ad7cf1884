#pragma once

// Parameter checkpoints: a JSON document with a format tag, the model shape,
// and every tensor by name with its shape and row-major values.

#include <fstream>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "crlab/errors.hpp"
#include "crlab/model.hpp"

namespace crlab {

inline constexpr const char* kCheckpointFormat = "crlab-checkpoint/1";

inline std::string to_string(Nonlinearity n) {
    switch (n) {
        case Nonlinearity::identity: return "identity";
        case Nonlinearity::relu: return "relu";
        case Nonlinearity::leaky_relu: return "leaky_relu";
    }
    return "relu";
}

inline Nonlinearity parse_nonlinearity(const std::string& s) {
    if (s == "identity") return Nonlinearity::identity;
    if (s == "relu") return Nonlinearity::relu;
    if (s == "leaky_relu") return Nonlinearity::leaky_relu;
    throw ConfigError("unknown activation '" + s + "'");
}

inline nlohmann::json shape_json(const ModelShape& s) {
    return {{"input_dim", s.input_dim},     {"hidden", s.hidden},
            {"feature_dim", s.feature_dim}, {"num_classes", s.num_classes},
            {"proj_hidden", s.projection_hidden()}, {"proj_dim", s.proj_dim},
            {"activation", to_string(s.activation)}, {"leaky_slope", s.leaky_slope}};
}

inline ModelShape shape_from_json(const nlohmann::json& j) {
    ModelShape s;
    s.input_dim = j.at("input_dim").get<std::size_t>();
    s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    s.feature_dim = j.at("feature_dim").get<std::size_t>();
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.proj_hidden = j.at("proj_hidden").get<std::size_t>();
    s.proj_dim = j.at("proj_dim").get<std::size_t>();
    s.activation = parse_nonlinearity(j.at("activation").get<std::string>());
    s.leaky_slope = j.at("leaky_slope").get<double>();
    return s;
}

inline ModelShape shape_of(const ModelParams<double>& p) {
    ModelShape s;
    s.input_dim = p.input_dim();
    s.hidden.clear();
    for (std::size_t l = 0; l + 1 < p.encoder.size(); ++l) s.hidden.push_back(p.encoder[l].fan_out());
    s.feature_dim = p.feature_dim();
    s.num_classes = p.num_classes();
    s.proj_hidden = p.proj_hidden.fan_out();
    s.proj_dim = p.proj_dim();
    s.activation = p.encoder.front().act;
    s.leaky_slope = p.encoder.front().slope;
    return s;
}

inline nlohmann::json checkpoint_json(const ModelParams<double>& params) {
    nlohmann::json tensors = nlohmann::json::array();
    const_cast<ModelParams<double>&>(params).visit(
        [&](const std::string& name, std::size_t rows, std::size_t cols, std::span<double> data) {
            tensors.push_back({{"name", name},
                               {"shape", {rows, cols}},
                               {"data", std::vector<double>(data.begin(), data.end())}});
        });
    return {{"format", kCheckpointFormat}, {"shape", shape_json(shape_of(params))}, {"tensors", tensors}};
}

inline ModelParams<double> params_from_checkpoint(const nlohmann::json& j) {
    if (!j.contains("format") || j.at("format") != kCheckpointFormat)
        throw DataError(std::string("checkpoint: expected format ") + kCheckpointFormat);
    const ModelShape shape = shape_from_json(j.at("shape"));
    Rng scratch(0);
    ModelParams<double> p = init_params(shape, scratch);

    std::map<std::string, const nlohmann::json*> by_name;
    for (const auto& t : j.at("tensors")) by_name[t.at("name").get<std::string>()] = &t;
    p.visit([&](const std::string& name, std::size_t rows, std::size_t cols, std::span<double> data) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw DataError("checkpoint: missing tensor " + name);
        const auto& t = *it->second;
        const auto shp = t.at("shape").get<std::vector<std::size_t>>();
        if (shp.size() != 2 || shp[0] != rows || shp[1] != cols)
            throw DimensionError("checkpoint: tensor " + name + " has the wrong shape");
        const auto values = t.at("data").get<std::vector<double>>();
        if (values.size() != data.size()) throw DimensionError("checkpoint: tensor " + name + " size");
        std::copy(values.begin(), values.end(), data.begin());
        by_name.erase(it);
    });
    if (!by_name.empty()) throw DataError("checkpoint: unexpected tensor " + by_name.begin()->first);
    return p;
}

inline void save_checkpoint(const std::string& path, const ModelParams<double>& params) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path);
    os << checkpoint_json(params).dump() << '\n';
}

inline ModelParams<double> load_checkpoint(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint " + path + ": " + e.what());
    }
    return params_from_checkpoint(j);
}

}  // namespace crlab
