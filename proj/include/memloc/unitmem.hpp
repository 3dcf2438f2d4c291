#pragma once

#include "memloc/model.hpp"
#include "memloc/toy_data.hpp"

#include <compare>
#include <cstdint>
#include <string>
#include <vector>

namespace memloc {

struct UnitMemConfig {
    // Class-balanced share of the training set used as D'.
    double subset_fraction = 0.01;
    int num_augmentations = 10;
    // When false every pass sees the unaugmented image.
    bool augment = true;
    std::uint64_t seed = 0;

    void validate() const;
};

// Class-balanced subset, deterministic in config.seed. Canaries are sampled
// like any other image. Returned indices are sorted.
std::vector<std::size_t> select_subset_indices(const Dataset& dataset, const UnitMemConfig& config);
Dataset select_subset(const Dataset& dataset, const UnitMemConfig& config);

std::uint64_t augmentation_seed(std::uint64_t sample_id, int aug_index, std::uint64_t global_seed);

// Mean absolute fc1 activation per (data point, block, neuron, slot). A slot
// is a scale for VAR and the single last-token step for RAR.
struct ActivationStats {
    Variant variant = Variant::var;
    int num_blocks = 0;
    int d_fc1 = 0;
    int num_slots = 0;
    std::vector<std::uint64_t> sample_ids;
    std::vector<bool> is_canary;
    std::vector<double> values;

    ActivationStats() = default;
    ActivationStats(Variant v, int blocks, int neurons, int slots, std::size_t points);

    std::size_t num_points() const { return sample_ids.size(); }
    std::size_t index(std::size_t point, int block, int neuron, int slot) const {
        return ((point * static_cast<std::size_t>(num_blocks) + static_cast<std::size_t>(block)) *
                    static_cast<std::size_t>(d_fc1) +
                static_cast<std::size_t>(neuron)) *
                   static_cast<std::size_t>(num_slots) +
               static_cast<std::size_t>(slot);
    }
    double& at(std::size_t point, int block, int neuron, int slot) { return values[index(point, block, neuron, slot)]; }
    double at(std::size_t point, int block, int neuron, int slot) const {
        return values[index(point, block, neuron, slot)];
    }
};

// num_augmentations teacher-forced passes per point; |activation| averaged
// over passes, and for VAR over the positions of each scale.
ActivationStats collect_activations(const Model& model, const Dataset& subset, const UnitMemConfig& config);

struct UnitMemEntry {
    int block = 0;
    int neuron = 0;
    int slot = 0;
    double score = 0.0;
    double mu_max = 0.0;
    double mu_minus_max = 0.0;
    std::uint64_t argmax_sample_id = 0;
    bool argmax_is_canary = false;
};

struct UnitMemTable {
    Variant variant = Variant::var;
    int num_blocks = 0;
    int d_fc1 = 0;
    int num_slots = 0;
    // Ordered by block, then neuron, then slot.
    std::vector<UnitMemEntry> entries;

    std::size_t num_neurons() const { return static_cast<std::size_t>(num_blocks) * static_cast<std::size_t>(d_fc1); }
    const UnitMemEntry& at(int block, int neuron, int slot) const {
        return entries[(static_cast<std::size_t>(block) * static_cast<std::size_t>(d_fc1) +
                        static_cast<std::size_t>(neuron)) *
                           static_cast<std::size_t>(num_slots) +
                       static_cast<std::size_t>(slot)];
    }

    // Columns: block, neuron, scale ("last" for RAR), score, mu_max,
    // mu_minus_max, argmax_sample_id.
    std::string to_csv() const;
    static UnitMemTable from_csv(const std::string& text);
};

// Score (mu_max - mu_minus_max) / (mu_max + mu_minus_max); 0 for dead units.
// Argmax ties resolve to the lowest sample_id.
UnitMemTable unitmem_score(const ActivationStats& stats);

UnitMemTable unitmem_var(const Model& model, const Dataset& subset, const UnitMemConfig& config);
UnitMemTable unitmem_rar(const Model& model, const Dataset& subset, const UnitMemConfig& config);

enum class Aggregation { sum_over_scales, last_token };
enum class SelectionScope { global, per_block };

std::string to_string(Aggregation a);
std::string to_string(SelectionScope s);
Aggregation default_aggregation(Variant v);

struct NeuronId {
    int block = 0;
    int neuron = 0;
    auto operator<=>(const NeuronId&) const = default;
};

struct NeuronSet {
    std::vector<NeuronId> neurons;  // in selection (rank) order
    double fraction = 0.0;
    Aggregation aggregation = Aggregation::sum_over_scales;
    SelectionScope scope = SelectionScope::global;
    std::string rule = "unitmem";  // or "random"

    bool contains(NeuronId id) const;
    // Header lines "# key=value" then "block,neuron,rank".
    std::string to_csv() const;
    static NeuronSet from_csv(const std::string& text);
};

// Per-neuron aggregate, indexed block * d_fc1 + neuron.
std::vector<double> aggregate_scores(const UnitMemTable& table, Aggregation aggregation);

// Top ceil(fraction * neurons) by aggregate; ties go to the lower
// (block, neuron). per_block applies the quota inside every block.
NeuronSet top_k_neurons(const UnitMemTable& table, double fraction, Aggregation aggregation,
                        SelectionScope scope = SelectionScope::global);

// Uniformly random set of count neurons; the control for localization.
NeuronSet random_neurons(int num_blocks, int d_fc1, std::size_t count, std::uint64_t seed);

std::size_t selection_size(std::size_t total, double fraction);

}  // namespace memloc
