#include "memloc/config.hpp"

#include "memloc/io.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <string_view>

namespace memloc {

namespace {

// Rejects keys outside the allowed set so typos in run configs fail loudly.
void check_keys(const nlohmann::json& j, std::string_view section, std::initializer_list<std::string_view> allowed) {
    if (!j.is_object()) {
        throw ConfigError(std::string(section) + ": expected a JSON object");
    }
    for (const auto& [key, value] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw ConfigError(std::string(section) + ": unknown key '" + key + "'");
        }
    }
}

template <class T>
void read(const nlohmann::json& j, std::string_view section, const char* key, T& out) {
    if (!j.contains(key)) {
        return;
    }
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string(section) + "." + key + ": " + e.what());
    }
}

}  // namespace

void to_json(nlohmann::json& j, const DataConfig& c) {
    j = {{"seed", c.seed},     {"num_images", c.num_images}, {"num_classes", c.num_classes},
         {"height", c.height}, {"width", c.width},           {"noise", c.noise},
         {"noise_density", c.noise_density}};
}

void from_json(const nlohmann::json& j, DataConfig& c) {
    constexpr std::string_view s = "data";
    check_keys(j, s, {"seed", "num_images", "num_classes", "height", "width", "noise", "noise_density"});
    read(j, s, "seed", c.seed);
    read(j, s, "num_images", c.num_images);
    read(j, s, "num_classes", c.num_classes);
    read(j, s, "height", c.height);
    read(j, s, "width", c.width);
    read(j, s, "noise", c.noise);
    read(j, s, "noise_density", c.noise_density);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"variant", to_string(c.variant)},
         {"num_blocks", c.num_blocks},
         {"d_model", c.d_model},
         {"num_heads", c.num_heads},
         {"d_fc1", c.d_fc1},
         {"vocab_size", c.vocab_size},
         {"num_scales", c.num_scales},
         {"seq_len", c.seq_len},
         {"num_classes", c.num_classes},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    constexpr std::string_view s = "model";
    check_keys(j, s,
               {"variant", "num_blocks", "d_model", "num_heads", "d_fc1", "vocab_size", "num_scales", "seq_len",
                "num_classes", "seed"});
    if (j.contains("variant")) {
        c.variant = parse_variant(j.at("variant").get<std::string>());
    }
    read(j, s, "num_blocks", c.num_blocks);
    read(j, s, "d_model", c.d_model);
    read(j, s, "num_heads", c.num_heads);
    read(j, s, "d_fc1", c.d_fc1);
    read(j, s, "vocab_size", c.vocab_size);
    read(j, s, "num_scales", c.num_scales);
    read(j, s, "seq_len", c.seq_len);
    read(j, s, "num_classes", c.num_classes);
    read(j, s, "seed", c.seed);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"epochs", c.epochs},   {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
         {"beta1", c.beta1},     {"beta2", c.beta2},           {"epsilon", c.epsilon},
         {"augment", c.augment}, {"seed", c.seed},             {"permuted_order", c.permuted_order}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    constexpr std::string_view s = "train";
    check_keys(j, s,
               {"epochs", "batch_size", "learning_rate", "beta1", "beta2", "epsilon", "augment", "seed",
                "permuted_order"});
    read(j, s, "epochs", c.epochs);
    read(j, s, "batch_size", c.batch_size);
    read(j, s, "learning_rate", c.learning_rate);
    read(j, s, "beta1", c.beta1);
    read(j, s, "beta2", c.beta2);
    read(j, s, "epsilon", c.epsilon);
    read(j, s, "augment", c.augment);
    read(j, s, "seed", c.seed);
    read(j, s, "permuted_order", c.permuted_order);
}

void to_json(nlohmann::json& j, const UnitMemConfig& c) {
    j = {{"subset_fraction", c.subset_fraction},
         {"num_augmentations", c.num_augmentations},
         {"augment", c.augment},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, UnitMemConfig& c) {
    constexpr std::string_view s = "unitmem";
    check_keys(j, s, {"subset_fraction", "num_augmentations", "augment", "seed"});
    read(j, s, "subset_fraction", c.subset_fraction);
    read(j, s, "num_augmentations", c.num_augmentations);
    read(j, s, "augment", c.augment);
    read(j, s, "seed", c.seed);
}

namespace {

enum SeedTag : std::uint64_t {
    kDataSeed = 1,
    kCanarySeed,
    kModelSeed,
    kTrainSeed,
    kUnitMemSeed,
    kControlSeed,
    kSamplerSeed,
    kExtractorSeed,
};

void reject(const nlohmann::json& j, std::string_view section, std::initializer_list<std::string_view> keys,
            const char* hint) {
    for (auto k : keys) {
        if (j.contains(std::string(k))) {
            throw ConfigError(std::string(section) + "." + std::string(k) + " is not settable here; " + hint);
        }
    }
}

SelectionScope scope_from(const std::string& s) {
    if (s == "global") {
        return SelectionScope::global;
    }
    if (s == "per_block") {
        return SelectionScope::per_block;
    }
    throw ConfigError("intervention.scope must be 'global' or 'per_block', got '" + s + "'");
}

int log2_exact(int n) {
    int k = 0;
    while ((1 << k) < n) {
        ++k;
    }
    return (1 << k) == n ? k : -1;
}

}  // namespace

RunConfig::RunConfig() {
    data.noise = 0.5;
    data.noise_density = 0.5;
    train.batch_size = 2;
    train.augment = false;
    unitmem.subset_fraction = 0.25;
    derive_seeds();
}

void RunConfig::derive_seeds() {
    data.seed = hash_combine(seed, kDataSeed);
    model.seed = hash_combine(seed, kModelSeed);
    train.seed = hash_combine(seed, kTrainSeed);
    unitmem.seed = hash_combine(seed, kUnitMemSeed);
}

std::uint64_t RunConfig::canary_seed() const { return hash_combine(seed, kCanarySeed); }
std::uint64_t RunConfig::control_seed() const { return hash_combine(seed, kControlSeed); }
std::uint64_t RunConfig::sampler_seed() const { return hash_combine(seed, kSamplerSeed); }
std::uint64_t RunConfig::extractor_seed() const { return hash_combine(seed, kExtractorSeed); }

DataConfig RunConfig::data_config() const { return data; }

ModelConfig RunConfig::model_config(Variant v) const {
    ModelConfig c = model;
    c.variant = v;
    c.seed = hash_combine(model.seed, static_cast<std::uint64_t>(v));
    return c;
}

TrainConfig RunConfig::train_config(Variant v) const {
    TrainConfig c = train;
    c.seed = hash_combine(train.seed, static_cast<std::uint64_t>(v));
    c.permuted_order = v == Variant::rar && rar_permuted_order;
    return c;
}

void RunConfig::validate() const {
    data.validate();
    model.validate();
    train.validate();
    unitmem.validate();
    if (variants.empty()) {
        throw ConfigError("variants must not be empty");
    }
    if (canaries.count < 0 || canaries.count > data.num_images || (canaries.count > 0 && canaries.repeat_factor < 2)) {
        throw ConfigError("canaries.count must lie in [0, data.num_images] and canaries.repeat_factor must be >= 2");
    }
    if (model.num_classes != data.num_classes) {
        throw ConfigError("model.num_classes must equal data.num_classes");
    }
    if (data.height != data.width || log2_exact(data.height) < 0) {
        throw ConfigError("data.height and data.width must be equal powers of two");
    }
    if (model.num_scales != log2_exact(data.height) + 1) {
        throw ConfigError("model.num_scales must equal log2(data.height) + 1 = " +
                          std::to_string(log2_exact(data.height) + 1));
    }
    if (model.seq_len != data.height * data.width) {
        throw ConfigError("model.seq_len must equal data.height * data.width");
    }
    const auto in_unit = [](double f) { return f > 0.0 && f <= 1.0; };
    if (intervention.fractions.empty() || !std::all_of(intervention.fractions.begin(), intervention.fractions.end(), in_unit) ||
        !in_unit(intervention.fraction)) {
        throw ConfigError("intervention fractions must lie in (0, 1]");
    }
    const auto factor_ok = [](double f) { return f >= 0.0 && f <= 1.0; };
    if (intervention.factors.empty() || !std::all_of(intervention.factors.begin(), intervention.factors.end(), factor_ok) ||
        !factor_ok(intervention.factor) || (intervention.bias_factor && !factor_ok(*intervention.bias_factor))) {
        throw ConfigError("intervention factors must lie in [0, 1]");
    }
    if (extraction.top_n < 1) {
        throw ConfigError("extraction.top_n must be >= 1");
    }
    if (!(extraction.rar_prefix_ratio >= 0.0 && extraction.rar_prefix_ratio <= 1.0)) {
        throw ConfigError("extraction.rar_prefix_ratio must lie in [0, 1]");
    }
    if (extraction.var_prefix_scales < 0 || extraction.var_prefix_scales > model.num_scales) {
        throw ConfigError("extraction.var_prefix_scales must lie in [0, model.num_scales]");
    }
    if (!std::isfinite(extraction.threshold)) {
        throw ConfigError("extraction.threshold must be finite");
    }
    const int cells = (data.height / 4) * (data.width / 4);
    if (eval.feature_dim < 1 || cells < 1 || eval.feature_dim % cells != 0) {
        throw ConfigError("eval.feature_dim must be a positive multiple of (height/4)*(width/4)");
    }
    if (eval.num_samples < eval.feature_dim + 1) {
        throw ConfigError("eval.num_samples must be >= eval.feature_dim + 1");
    }
    if (!(eval.temperature >= 0.0) || !std::isfinite(eval.temperature)) {
        throw ConfigError("eval.temperature must be finite and >= 0");
    }
}

nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["variants"] = nlohmann::json::array();
    for (Variant v : c.variants) {
        j["variants"].push_back(to_string(v));
    }
    nlohmann::json data = c.data;
    data.erase("seed");
    j["data"] = data;
    j["canaries"] = {{"count", c.canaries.count}, {"repeat_factor", c.canaries.repeat_factor}};
    nlohmann::json model = c.model;
    model.erase("seed");
    model.erase("variant");
    j["model"] = model;
    nlohmann::json train = c.train;
    train.erase("seed");
    train.erase("permuted_order");
    train["rar_permuted_order"] = c.rar_permuted_order;
    j["train"] = train;
    nlohmann::json unitmem = c.unitmem;
    unitmem.erase("seed");
    j["unitmem"] = unitmem;
    j["intervention"] = {{"fractions", c.intervention.fractions},
                         {"factors", c.intervention.factors},
                         {"bias_factor", c.intervention.bias_factor ? nlohmann::json(*c.intervention.bias_factor)
                                                                    : nlohmann::json(nullptr)},
                         {"scope", to_string(c.intervention.scope)},
                         {"fraction", c.intervention.fraction},
                         {"factor", c.intervention.factor}};
    j["extraction"] = {{"top_n", c.extraction.top_n},
                       {"unique_content", c.extraction.unique_content},
                       {"rar_prefix_ratio", c.extraction.rar_prefix_ratio},
                       {"var_prefix_scales", c.extraction.var_prefix_scales},
                       {"threshold", c.extraction.threshold}};
    j["eval"] = {{"num_samples", c.eval.num_samples},
                 {"temperature", c.eval.temperature},
                 {"feature_dim", c.eval.feature_dim}};
    j["output_dir"] = c.output_dir;
    return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    check_keys(j, "config",
               {"seed", "variants", "data", "canaries", "model", "train", "unitmem", "intervention", "extraction",
                "eval", "output_dir"});
    read(j, "config", "seed", c.seed);
    read(j, "config", "output_dir", c.output_dir);
    if (j.contains("variants")) {
        if (!j.at("variants").is_array()) {
            throw ConfigError("variants must be an array of \"var\" / \"rar\"");
        }
        c.variants.clear();
        for (const auto& v : j.at("variants")) {
            if (!v.is_string()) {
                throw ConfigError("variants must be an array of \"var\" / \"rar\"");
            }
            c.variants.push_back(parse_variant(v.get<std::string>()));
        }
    }
    const char* seed_hint = "use the top-level seed";
    if (j.contains("data")) {
        reject(j.at("data"), "data", {"seed"}, seed_hint);
        from_json(j.at("data"), c.data);
    }
    if (j.contains("canaries")) {
        const auto& s = j.at("canaries");
        check_keys(s, "canaries", {"count", "repeat_factor"});
        read(s, "canaries", "count", c.canaries.count);
        read(s, "canaries", "repeat_factor", c.canaries.repeat_factor);
    }
    if (j.contains("model")) {
        reject(j.at("model"), "model", {"seed", "variant"}, "use the top-level seed and variants");
        from_json(j.at("model"), c.model);
    }
    if (j.contains("train")) {
        nlohmann::json t = j.at("train");
        reject(t, "train", {"seed", "permuted_order"}, "use the top-level seed and train.rar_permuted_order");
        if (t.is_object() && t.contains("rar_permuted_order")) {
            read(t, "train", "rar_permuted_order", c.rar_permuted_order);
            t.erase("rar_permuted_order");
        }
        from_json(t, c.train);
    }
    if (j.contains("unitmem")) {
        reject(j.at("unitmem"), "unitmem", {"seed"}, seed_hint);
        from_json(j.at("unitmem"), c.unitmem);
    }
    if (j.contains("intervention")) {
        const auto& s = j.at("intervention");
        constexpr std::string_view n = "intervention";
        check_keys(s, n, {"fractions", "factors", "bias_factor", "scope", "fraction", "factor"});
        read(s, n, "fractions", c.intervention.fractions);
        read(s, n, "factors", c.intervention.factors);
        if (s.contains("bias_factor") && !s.at("bias_factor").is_null()) {
            double b = 0.0;
            read(s, n, "bias_factor", b);
            c.intervention.bias_factor = b;
        }
        if (s.contains("scope")) {
            std::string scope;
            read(s, n, "scope", scope);
            c.intervention.scope = scope_from(scope);
        }
        read(s, n, "fraction", c.intervention.fraction);
        read(s, n, "factor", c.intervention.factor);
    }
    if (j.contains("extraction")) {
        const auto& s = j.at("extraction");
        constexpr std::string_view n = "extraction";
        check_keys(s, n, {"top_n", "unique_content", "rar_prefix_ratio", "var_prefix_scales", "threshold"});
        read(s, n, "top_n", c.extraction.top_n);
        read(s, n, "unique_content", c.extraction.unique_content);
        read(s, n, "rar_prefix_ratio", c.extraction.rar_prefix_ratio);
        read(s, n, "var_prefix_scales", c.extraction.var_prefix_scales);
        read(s, n, "threshold", c.extraction.threshold);
    }
    if (j.contains("eval")) {
        const auto& s = j.at("eval");
        constexpr std::string_view n = "eval";
        check_keys(s, n, {"num_samples", "temperature", "feature_dim"});
        read(s, n, "num_samples", c.eval.num_samples);
        read(s, n, "temperature", c.eval.temperature);
        read(s, n, "feature_dim", c.eval.feature_dim);
    }
    c.derive_seeds();
    c.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    const std::string text = read_text_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace memloc
