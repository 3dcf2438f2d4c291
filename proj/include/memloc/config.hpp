#pragma once

#include "memloc/model.hpp"
#include "memloc/toy_data.hpp"
#include "memloc/training.hpp"
#include "memloc/unitmem.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace memloc {

void to_json(nlohmann::json& j, const DataConfig& c);
void from_json(const nlohmann::json& j, DataConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const UnitMemConfig& c);
void from_json(const nlohmann::json& j, UnitMemConfig& c);

struct CanaryConfig {
    int count = 4;
    int repeat_factor = 8;
};

struct InterventionConfig {
    std::vector<double> fractions{0.01, 0.05, 0.10};
    std::vector<double> factors{0.5};
    std::optional<double> bias_factor;
    SelectionScope scope = SelectionScope::global;
    // Fraction used by the single-edit subcommand.
    double fraction = 0.10;
    double factor = 0.5;
};

struct ExtractionConfig {
    std::size_t top_n = 16;
    bool unique_content = true;
    double rar_prefix_ratio = 0.5;
    int var_prefix_scales = 3;
    double threshold = 0.75;
};

struct EvalConfig {
    int num_samples = 96;
    double temperature = 1.0;
    int feature_dim = 64;
};

// Every stage seed is derived from the global seed; sections carry no seeds.
struct RunConfig {
    std::uint64_t seed = 0;
    std::vector<Variant> variants{Variant::var, Variant::rar};
    DataConfig data;
    CanaryConfig canaries;
    ModelConfig model;
    TrainConfig train;
    // RAR only; VAR ignores it.
    bool rar_permuted_order = false;
    UnitMemConfig unitmem;
    InterventionConfig intervention;
    ExtractionConfig extraction;
    EvalConfig eval;
    std::string output_dir = "memloc_out";

    // Section defaults tuned for the desk-scale run (denser speckle, batch 2
    // without training augmentation, a quarter of the data as D'), with every
    // stage seed derived from `seed`.
    RunConfig();

    void validate() const;
    // Re-derives every section seed from `seed`.
    void derive_seeds();

    DataConfig data_config() const;
    ModelConfig model_config(Variant v) const;
    TrainConfig train_config(Variant v) const;
    std::uint64_t canary_seed() const;
    std::uint64_t control_seed() const;
    std::uint64_t sampler_seed() const;
    std::uint64_t extractor_seed() const;
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

}  // namespace memloc
