#pragma once

#include "memloc/config.hpp"
#include "memloc/eval.hpp"
#include "memloc/extraction.hpp"
#include "memloc/intervention.hpp"
#include "memloc/training.hpp"
#include "memloc/unitmem.hpp"

#include <functional>
#include <string>
#include <vector>

namespace memloc {

using Logger = std::function<void(const std::string&)>;

Dataset build_dataset(const RunConfig& config);
TrainResult train_variant(const RunConfig& config, Variant variant, const Dataset& dataset, const Logger& log = {});
UnitMemTable compute_unitmem(const RunConfig& config, const Model& model, const Dataset& dataset);
PrefixSpec prefix_of(const RunConfig& config);
FeatureExtractor extractor_of(const RunConfig& config);
SamplerConfig quality_sampler(const RunConfig& config);
double quality(const RunConfig& config, const Model& model, const Dataset& dataset,
               const FeatureExtractor& extractor);

// Mean aggregate score of neurons whose argmax sample (taken at the neuron's
// highest-scoring slot) is a canary, against the mean over all neurons.
struct CanaryLocalization {
    double canary_mean = 0.0;
    double population_mean = 0.0;
    std::size_t canary_neurons = 0;
};

CanaryLocalization canary_localization(const UnitMemTable& table);

struct VariantOutcome {
    Variant variant = Variant::var;
    TrainingLog log;
    UnitMemTable table;
    CanaryLocalization localization;
    std::size_t candidate_canaries = 0;
    ExtractionReport original;
    double quality_original = 0.0;
    // One per sweep fraction and factor, UnitMem selection then random control.
    std::vector<TradeoffInput> rows;
    // Scale-0 column total (VAR) of the block_by_scale heatmap.
    double scale0_total = 0.0;
    double table_total = 0.0;
};

struct ReproduceResult {
    std::vector<VariantOutcome> variants;
    std::vector<QualityReport> tradeoff;
    // Report files relative to the output directory, in write order.
    std::vector<std::string> report_files;
};

// train -> unitmem -> sweep with random controls -> extraction and quality
// -> trade-off report, for every configured variant. Writes all artifacts
// under out_dir.
ReproduceResult reproduce(const RunConfig& config, const std::string& out_dir, const Logger& log = {});

}  // namespace memloc
