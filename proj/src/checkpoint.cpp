#include "memloc/checkpoint.hpp"

#include "memloc/config.hpp"
#include "memloc/io.hpp"

namespace memloc {

namespace {

Aggregation parse_aggregation(const std::string& s) {
    if (s == "sum_over_scales") {
        return Aggregation::sum_over_scales;
    }
    if (s == "last_token") {
        return Aggregation::last_token;
    }
    throw ConfigError("unknown aggregation '" + s + "'");
}

SelectionScope parse_scope(const std::string& s) {
    if (s == "global") {
        return SelectionScope::global;
    }
    if (s == "per_block") {
        return SelectionScope::per_block;
    }
    throw ConfigError("unknown selection scope '" + s + "'");
}

}  // namespace

nlohmann::json spec_to_json(const InterventionSpec& spec) {
    nlohmann::json neurons = nlohmann::json::array();
    for (const auto& id : spec.neuron_set.neurons) {
        neurons.push_back({id.block, id.neuron});
    }
    nlohmann::json j;
    j["mode"] = spec.mode == InterventionMode::zero ? "zero" : "scale";
    j["weight_factor"] = spec.weight_factor;
    j["bias_factor"] = spec.bias_factor ? nlohmann::json(*spec.bias_factor) : nlohmann::json(nullptr);
    j["rule"] = spec.neuron_set.rule;
    j["fraction"] = spec.neuron_set.fraction;
    j["aggregation"] = to_string(spec.neuron_set.aggregation);
    j["scope"] = to_string(spec.neuron_set.scope);
    j["neurons"] = std::move(neurons);
    return j;
}

InterventionSpec spec_from_json(const nlohmann::json& j) {
    InterventionSpec spec;
    try {
        const std::string mode = j.at("mode").get<std::string>();
        if (mode != "scale" && mode != "zero") {
            throw ConfigError("unknown intervention mode '" + mode + "'");
        }
        spec.mode = mode == "zero" ? InterventionMode::zero : InterventionMode::scale;
        spec.weight_factor = j.at("weight_factor").get<double>();
        if (!j.at("bias_factor").is_null()) {
            spec.bias_factor = j.at("bias_factor").get<double>();
        }
        spec.neuron_set.rule = j.at("rule").get<std::string>();
        spec.neuron_set.fraction = j.at("fraction").get<double>();
        spec.neuron_set.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
        spec.neuron_set.scope = parse_scope(j.at("scope").get<std::string>());
        for (const auto& n : j.at("neurons")) {
            spec.neuron_set.neurons.push_back({n.at(0).get<int>(), n.at(1).get<int>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed intervention spec: ") + e.what());
    }
    spec.validate();
    return spec;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path) {
    nlohmann::json header;
    header["model"] = checkpoint.model.config();
    header["num_params"] = checkpoint.model.params().size();
    header["intervention"] =
        checkpoint.intervention ? spec_to_json(*checkpoint.intervention) : nlohmann::json(nullptr);
    header["extra"] = checkpoint.extra;
    BinaryWriter out(path);
    out.write_magic(kCheckpointMagic);
    out.write_json(header);
    out.write_f32(checkpoint.model.params());
    out.close();
}

Checkpoint load_checkpoint(const std::string& path) {
    BinaryReader in(path);
    in.expect_magic(kCheckpointMagic);
    const nlohmann::json header = in.read_json();
    ModelConfig config;
    std::size_t n = 0;
    std::optional<InterventionSpec> spec;
    nlohmann::json extra;
    try {
        config = header.at("model").get<ModelConfig>();
        n = header.at("num_params").get<std::size_t>();
        if (!header.at("intervention").is_null()) {
            spec = spec_from_json(header.at("intervention"));
        }
        extra = header.value("extra", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": malformed checkpoint header: " + e.what());
    } catch (const ConfigError& e) {
        throw IoError(path + ": " + e.what());
    }
    config.validate();
    if (n != parameter_count(config)) {
        throw ConsistencyError(path + ": parameter count " + std::to_string(n) + " does not match the model config (" +
                               std::to_string(parameter_count(config)) + ")");
    }
    std::vector<double> params(n);
    in.read_f32(params);
    in.expect_end();
    return Checkpoint{Model(config, std::move(params)), std::move(spec), std::move(extra)};
}

}  // namespace memloc
