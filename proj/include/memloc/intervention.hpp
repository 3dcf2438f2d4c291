#pragma once

#include "memloc/model.hpp"
#include "memloc/unitmem.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace memloc {

enum class InterventionMode { scale, zero };

struct InterventionSpec {
    NeuronSet neuron_set;
    // Multiplies the fc1 row (incoming weights) of every selected neuron.
    double weight_factor = 0.5;
    // nullopt leaves the fc1 bias entries unchanged.
    std::optional<double> bias_factor;
    InterventionMode mode = InterventionMode::scale;

    // Zero mode requires weight_factor == 0 and vice versa.
    void validate() const;
    std::string describe() const;
};

InterventionSpec make_spec(NeuronSet set, double weight_factor, std::optional<double> bias_factor = std::nullopt);

// Returns an edited copy; the input model is untouched.
Model apply_intervention(const Model& model, const InterventionSpec& spec);

struct SweepEntry {
    InterventionSpec spec;
    Model model;
};

// fractions x factors in row-major order (fraction outer), each selecting
// its neurons with top_k_neurons.
std::vector<SweepEntry> sweep(const Model& model, const UnitMemTable& table, std::span<const double> fractions,
                              std::span<const double> factors, Aggregation aggregation,
                              SelectionScope scope = SelectionScope::global);

}  // namespace memloc
