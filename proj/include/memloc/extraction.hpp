#pragma once

#include "memloc/eval.hpp"
#include "memloc/model.hpp"
#include "memloc/toy_data.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace memloc {

struct Candidate {
    std::size_t index = 0;  // position in the dataset
    std::uint64_t sample_id = 0;
    double loss = 0.0;
    bool is_canary = false;
};

struct CandidateSet {
    std::vector<Candidate> candidates;  // ascending loss, ties by sample_id
};

// Teacher-forced loss on every training image (unaugmented); keeps the top_n
// lowest. With unique_content, only the lowest-loss copy of each base image
// is kept.
CandidateSet find_candidates(const Model& model, const Dataset& dataset, std::size_t top_n,
                             bool unique_content = false);

struct PrefixSpec {
    // RAR: the first floor(ratio * N) tokens are kept.
    double ratio = 0.5;
    // VAR: the first `scales` complete scales are kept.
    int scales = 3;

    void validate(const ModelConfig& config) const;
    int rar_tokens(int seq_len) const;
};

// Cosine similarity of per-vector mean-centred features.
double similarity(const Image& a, const Image& b, const FeatureExtractor& extractor = default_extractor());

struct ExtractOutcome {
    Image generated;
    Image reference;  // palette-quantised original
    double similarity = 0.0;
};

ExtractOutcome extract_one(const Model& model, const Image& candidate, const PrefixSpec& prefix,
                           const SamplerConfig& sampler, const FeatureExtractor& extractor = default_extractor());

struct ExtractionRow {
    std::uint64_t sample_id = 0;
    bool is_canary = false;
    double loss = 0.0;
    double similarity = 0.0;
    bool extracted = false;
};

struct ExtractionReport {
    std::vector<ExtractionRow> rows;
    std::size_t num_candidates = 0;
    std::size_t num_extracted = 0;
    double threshold = 0.75;
    PrefixSpec prefix;
    Variant variant = Variant::var;
    // "original" or an InterventionSpec description.
    std::string model_identity = "original";

    std::size_t extracted_canaries() const;
    // Columns: sample_id, is_canary, loss, similarity, extracted.
    std::string to_csv() const;
    nlohmann::json summary() const;
};

inline constexpr double kExtractionThreshold = 0.75;

// Greedy completion per candidate; extracted when similarity > threshold.
ExtractionReport run_attack(const Model& model, const Dataset& dataset, const CandidateSet& candidates,
                            const PrefixSpec& prefix, double threshold = kExtractionThreshold,
                            const std::string& model_identity = "original",
                            const FeatureExtractor& extractor = default_extractor());

}  // namespace memloc
