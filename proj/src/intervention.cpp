#include "memloc/intervention.hpp"

#include "memloc/io.hpp"

#include <set>
#include <sstream>

namespace memloc {

void InterventionSpec::validate() const {
    if (!(weight_factor >= 0.0 && weight_factor <= 1.0)) {
        throw ArgumentError("weight_factor must lie in [0, 1]");
    }
    if (bias_factor && !(*bias_factor >= 0.0 && *bias_factor <= 1.0)) {
        throw ArgumentError("bias_factor must lie in [0, 1]");
    }
    if ((mode == InterventionMode::zero) != (weight_factor == 0.0)) {
        throw ArgumentError("zero mode is equivalent to weight_factor = 0");
    }
}

std::string InterventionSpec::describe() const {
    std::ostringstream os;
    os << (mode == InterventionMode::zero ? "zero" : "scale") << " " << neuron_set.rule << " neurons="
       << neuron_set.neurons.size() << " fraction=" << format_double(neuron_set.fraction)
       << " weight_factor=" << format_double(weight_factor)
       << " bias_factor=" << (bias_factor ? format_double(*bias_factor) : std::string("unchanged"));
    return os.str();
}

InterventionSpec make_spec(NeuronSet set, double weight_factor, std::optional<double> bias_factor) {
    InterventionSpec spec;
    spec.neuron_set = std::move(set);
    spec.weight_factor = weight_factor;
    spec.bias_factor = bias_factor;
    spec.mode = weight_factor == 0.0 ? InterventionMode::zero : InterventionMode::scale;
    return spec;
}

Model apply_intervention(const Model& model, const InterventionSpec& spec) {
    spec.validate();
    const auto& c = model.config();
    std::set<NeuronId> seen;
    for (const NeuronId& id : spec.neuron_set.neurons) {
        if (id.block < 0 || id.block >= c.num_blocks || id.neuron < 0 || id.neuron >= c.d_fc1) {
            throw ArgumentError("intervention: neuron (" + std::to_string(id.block) + ", " +
                                std::to_string(id.neuron) + ") outside a model with " +
                                std::to_string(c.num_blocks) + " blocks of " + std::to_string(c.d_fc1) + " units");
        }
        if (!seen.insert(id).second) {
            throw ArgumentError("intervention: duplicate neuron in set");
        }
    }
    Model edited = model;
    auto& p = edited.mutable_params();
    const std::size_t d = static_cast<std::size_t>(c.d_model);
    for (const NeuronId& id : spec.neuron_set.neurons) {
        const auto& blk = edited.layout().blocks[static_cast<std::size_t>(id.block)];
        const std::size_t row = blk.fc1_w + static_cast<std::size_t>(id.neuron) * d;
        for (std::size_t k = 0; k < d; ++k) {
            p[row + k] = spec.mode == InterventionMode::zero ? 0.0 : p[row + k] * spec.weight_factor;
        }
        if (spec.bias_factor) {
            p[blk.fc1_b + static_cast<std::size_t>(id.neuron)] *= *spec.bias_factor;
        }
    }
    return edited;
}

std::vector<SweepEntry> sweep(const Model& model, const UnitMemTable& table, std::span<const double> fractions,
                              std::span<const double> factors, Aggregation aggregation, SelectionScope scope) {
    if (fractions.empty() || factors.empty()) {
        throw ArgumentError("sweep: fractions and factors must be nonempty");
    }
    if (table.num_blocks != model.config().num_blocks || table.d_fc1 != model.config().d_fc1) {
        throw ConsistencyError("sweep: UnitMem table does not match model dimensions");
    }
    std::vector<SweepEntry> out;
    for (double fraction : fractions) {
        const NeuronSet set = top_k_neurons(table, fraction, aggregation, scope);
        for (double factor : factors) {
            InterventionSpec spec = make_spec(set, factor);
            Model edited = apply_intervention(model, spec);
            out.push_back(SweepEntry{std::move(spec), std::move(edited)});
        }
    }
    return out;
}

}  // namespace memloc
