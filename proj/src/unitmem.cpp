#include "memloc/unitmem.hpp"

#include "memloc/io.hpp"
#include "memloc/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

namespace memloc {

void UnitMemConfig::validate() const {
    if (!(subset_fraction > 0.0 && subset_fraction <= 1.0)) {
        throw ConfigError("unitmem.subset_fraction must lie in (0, 1]");
    }
    if (num_augmentations < 1) {
        throw ConfigError("unitmem.num_augmentations must be >= 1");
    }
}

std::vector<std::size_t> select_subset_indices(const Dataset& dataset, const UnitMemConfig& config) {
    config.validate();
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        by_class[dataset.images[i].class_id].push_back(i);
    }
    std::vector<std::size_t> chosen;
    for (auto& [cls, members] : by_class) {
        const auto want = static_cast<std::size_t>(
            std::llround(config.subset_fraction * static_cast<double>(members.size())));
        Rng rng(hash_combine(config.seed, 0x5b5e7000ULL + static_cast<std::uint64_t>(cls)));
        for (std::size_t i = 0; i < want; ++i) {
            const std::size_t j = i + rng.below(members.size() - i);
            std::swap(members[i], members[j]);
        }
        chosen.insert(chosen.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(want));
    }
    std::sort(chosen.begin(), chosen.end());
    if (chosen.size() < 2) {
        throw ArgumentError("select_subset: fraction " + format_double(config.subset_fraction) + " yields " +
                            std::to_string(chosen.size()) + " samples; UnitMem needs at least 2");
    }
    return chosen;
}

Dataset select_subset(const Dataset& dataset, const UnitMemConfig& config) {
    Dataset out;
    out.seed = dataset.seed;
    out.canary_repeat_factor = dataset.canary_repeat_factor;
    out.config = dataset.config;
    for (std::size_t i : select_subset_indices(dataset, config)) {
        out.images.push_back(dataset.images[i]);
    }
    return out;
}

std::uint64_t augmentation_seed(std::uint64_t sample_id, int aug_index, std::uint64_t global_seed) {
    return hash_combine(hash_combine(global_seed, sample_id), static_cast<std::uint64_t>(aug_index));
}

ActivationStats::ActivationStats(Variant v, int blocks, int neurons, int slots, std::size_t points)
    : variant(v),
      num_blocks(blocks),
      d_fc1(neurons),
      num_slots(slots),
      sample_ids(points, 0),
      is_canary(points, false),
      values(points * static_cast<std::size_t>(blocks) * static_cast<std::size_t>(neurons) *
                 static_cast<std::size_t>(slots),
             0.0) {}

ActivationStats collect_activations(const Model& model, const Dataset& subset, const UnitMemConfig& config) {
    config.validate();
    const auto& c = model.config();
    const Palette palette = Palette::for_vocab(c.vocab_size);
    const bool is_var = c.variant == Variant::var;
    const int slots = is_var ? c.num_scales : 1;
    ActivationStats stats(c.variant, c.num_blocks, c.d_fc1, slots, subset.size());
    const auto offsets = c.scale_offsets();
    const double inv_aug = 1.0 / static_cast<double>(config.num_augmentations);

    parallel_for(subset.size(), [&](std::size_t p) {
        const Image& src = subset.images[p];
        stats.sample_ids[p] = src.sample_id;
        stats.is_canary[p] = src.is_canary;
        for (int a = 0; a < config.num_augmentations; ++a) {
            const Image image =
                config.augment ? augment(src, augmentation_seed(src.sample_id, a, config.seed)) : src;
            if (is_var) {
                const ForwardResult fr =
                    forward_var_teacher_forced(model, tokenize_multiscale(image, palette), image.class_id);
                for (int b = 0; b < c.num_blocks; ++b) {
                    const RowMat& acts = fr.trace.fc1[static_cast<std::size_t>(b)];
                    for (int s = 0; s < slots; ++s) {
                        const int begin = offsets[static_cast<std::size_t>(s)];
                        const int count = offsets[static_cast<std::size_t>(s) + 1] - begin;
                        const RowVec mean_abs = acts.middleRows(begin, count).cwiseAbs().colwise().mean();
                        for (int n = 0; n < c.d_fc1; ++n) {
                            stats.at(p, b, n, s) += mean_abs(n) * inv_aug;
                        }
                    }
                }
            } else {
                const ForwardResult fr = forward_rar_teacher_forced(model, tokenize_flat(image, palette),
                                                                    image.class_id, TraceMode::last_step);
                for (int b = 0; b < c.num_blocks; ++b) {
                    const RowMat& acts = fr.trace.fc1[static_cast<std::size_t>(b)];
                    for (int n = 0; n < c.d_fc1; ++n) {
                        stats.at(p, b, n, 0) += std::abs(acts(0, n)) * inv_aug;
                    }
                }
            }
        }
    });
    return stats;
}

UnitMemTable unitmem_score(const ActivationStats& stats) {
    const std::size_t points = stats.num_points();
    if (points < 2) {
        throw ArgumentError("unitmem_score: need at least 2 data points, got " + std::to_string(points));
    }
    for (double v : stats.values) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw ConsistencyError("unitmem_score: activation statistics must be finite and non-negative");
        }
    }
    UnitMemTable table;
    table.variant = stats.variant;
    table.num_blocks = stats.num_blocks;
    table.d_fc1 = stats.d_fc1;
    table.num_slots = stats.num_slots;
    table.entries.reserve(static_cast<std::size_t>(stats.num_blocks) * static_cast<std::size_t>(stats.d_fc1) *
                          static_cast<std::size_t>(stats.num_slots));
    for (int b = 0; b < stats.num_blocks; ++b) {
        for (int n = 0; n < stats.d_fc1; ++n) {
            for (int s = 0; s < stats.num_slots; ++s) {
                std::size_t best = 0;
                for (std::size_t p = 0; p < points; ++p) {
                    const double v = stats.at(p, b, n, s);
                    const double bv = stats.at(best, b, n, s);
                    if (v > bv || (v == bv && stats.sample_ids[p] < stats.sample_ids[best])) {
                        best = p;
                    }
                }
                UnitMemEntry e;
                e.block = b;
                e.neuron = n;
                e.slot = s;
                e.mu_max = stats.at(best, b, n, s);
                // Averaging the gaps below mu_max keeps the score exactly 0
                // for flat units and exactly 1 for one-hot units.
                double gap = 0.0;
                double rest = 0.0;
                for (std::size_t p = 0; p < points; ++p) {
                    if (p != best) {
                        gap += e.mu_max - stats.at(p, b, n, s);
                        rest += stats.at(p, b, n, s);
                    }
                }
                gap /= static_cast<double>(points - 1);
                e.mu_minus_max = rest / static_cast<double>(points - 1);
                if (e.mu_max <= 0.0) {
                    e.score = 0.0;
                } else if (rest == 0.0) {
                    e.score = 1.0;
                } else {
                    e.score = std::clamp(gap / (2.0 * e.mu_max - gap), 0.0, 1.0);
                }
                e.argmax_sample_id = stats.sample_ids[best];
                e.argmax_is_canary = stats.is_canary[best];
                table.entries.push_back(e);
            }
        }
    }
    return table;
}

UnitMemTable unitmem_var(const Model& model, const Dataset& subset, const UnitMemConfig& config) {
    if (model.config().variant != Variant::var) {
        throw ArgumentError("unitmem_var: model variant is " + to_string(model.config().variant));
    }
    return unitmem_score(collect_activations(model, subset, config));
}

UnitMemTable unitmem_rar(const Model& model, const Dataset& subset, const UnitMemConfig& config) {
    if (model.config().variant != Variant::rar) {
        throw ArgumentError("unitmem_rar: model variant is " + to_string(model.config().variant));
    }
    return unitmem_score(collect_activations(model, subset, config));
}

std::string UnitMemTable::to_csv() const {
    std::ostringstream os;
    os << "block,neuron,scale,score,mu_max,mu_minus_max,argmax_sample_id\n";
    for (const auto& e : entries) {
        os << e.block << ',' << e.neuron << ',';
        if (variant == Variant::rar) {
            os << "last";
        } else {
            os << e.slot;
        }
        os << ',' << format_double(e.score) << ',' << format_double(e.mu_max) << ','
           << format_double(e.mu_minus_max) << ',' << e.argmax_sample_id << '\n';
    }
    return os.str();
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') {
        out.emplace_back();
    }
    return out;
}

}  // namespace

UnitMemTable UnitMemTable::from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "block,neuron,scale,score,mu_max,mu_minus_max,argmax_sample_id") {
        throw IoError("unitmem CSV: unexpected header");
    }
    UnitMemTable table;
    bool any_last = false;
    bool any_scale = false;
    int max_block = -1;
    int max_neuron = -1;
    int max_slot = -1;
    try {
        while (std::getline(in, line)) {
            if (line.empty()) {
                continue;
            }
            const auto cells = split_csv_line(line);
            if (cells.size() != 7) {
                throw IoError("unitmem CSV: expected 7 columns in '" + line + "'");
            }
            UnitMemEntry e;
            e.block = std::stoi(cells[0]);
            e.neuron = std::stoi(cells[1]);
            if (cells[2] == "last") {
                any_last = true;
                e.slot = 0;
            } else {
                any_scale = true;
                e.slot = std::stoi(cells[2]);
            }
            e.score = std::stod(cells[3]);
            e.mu_max = std::stod(cells[4]);
            e.mu_minus_max = std::stod(cells[5]);
            e.argmax_sample_id = std::stoull(cells[6]);
            max_block = std::max(max_block, e.block);
            max_neuron = std::max(max_neuron, e.neuron);
            max_slot = std::max(max_slot, e.slot);
            table.entries.push_back(e);
        }
    } catch (const std::logic_error& e) {
        throw IoError(std::string("unitmem CSV: malformed number: ") + e.what());
    }
    if (any_last && any_scale) {
        throw IoError("unitmem CSV: mixes per-scale and last-token rows");
    }
    if (table.entries.empty()) {
        throw IoError("unitmem CSV: no rows");
    }
    table.variant = any_last ? Variant::rar : Variant::var;
    table.num_blocks = max_block + 1;
    table.d_fc1 = max_neuron + 1;
    table.num_slots = max_slot + 1;
    if (table.entries.size() != table.num_neurons() * static_cast<std::size_t>(table.num_slots)) {
        throw IoError("unitmem CSV: row count does not match blocks x neurons x scales");
    }
    for (std::size_t i = 0; i < table.entries.size(); ++i) {
        const auto& e = table.entries[i];
        const std::size_t expect = (static_cast<std::size_t>(e.block) * static_cast<std::size_t>(table.d_fc1) +
                                    static_cast<std::size_t>(e.neuron)) *
                                       static_cast<std::size_t>(table.num_slots) +
                                   static_cast<std::size_t>(e.slot);
        if (expect != i) {
            throw IoError("unitmem CSV: rows are not ordered by block, neuron, scale");
        }
    }
    return table;
}

std::string to_string(Aggregation a) { return a == Aggregation::sum_over_scales ? "sum_over_scales" : "last_token"; }

std::string to_string(SelectionScope s) { return s == SelectionScope::global ? "global" : "per_block"; }

Aggregation default_aggregation(Variant v) {
    return v == Variant::var ? Aggregation::sum_over_scales : Aggregation::last_token;
}

bool NeuronSet::contains(NeuronId id) const { return std::find(neurons.begin(), neurons.end(), id) != neurons.end(); }

std::string NeuronSet::to_csv() const {
    std::ostringstream os;
    os << "# fraction=" << format_double(fraction) << '\n'
       << "# aggregation=" << to_string(aggregation) << '\n'
       << "# scope=" << to_string(scope) << '\n'
       << "# rule=" << rule << '\n'
       << "# tie_break=lower_block_then_lower_neuron\n"
       << "block,neuron,rank\n";
    for (std::size_t i = 0; i < neurons.size(); ++i) {
        os << neurons[i].block << ',' << neurons[i].neuron << ',' << i << '\n';
    }
    return os.str();
}

NeuronSet NeuronSet::from_csv(const std::string& text) {
    NeuronSet set;
    std::istringstream in(text);
    std::string line;
    bool header_seen = false;
    try {
        while (std::getline(in, line)) {
            if (line.empty()) {
                continue;
            }
            if (line.starts_with("# ")) {
                const auto eq = line.find('=');
                if (eq == std::string::npos) {
                    continue;
                }
                const std::string key = line.substr(2, eq - 2);
                const std::string value = line.substr(eq + 1);
                if (key == "fraction") {
                    set.fraction = std::stod(value);
                } else if (key == "aggregation") {
                    set.aggregation = value == "last_token" ? Aggregation::last_token : Aggregation::sum_over_scales;
                } else if (key == "scope") {
                    set.scope = value == "per_block" ? SelectionScope::per_block : SelectionScope::global;
                } else if (key == "rule") {
                    set.rule = value;
                }
                continue;
            }
            if (!header_seen) {
                if (line != "block,neuron,rank") {
                    throw IoError("neuron set CSV: unexpected header '" + line + "'");
                }
                header_seen = true;
                continue;
            }
            const auto cells = split_csv_line(line);
            if (cells.size() != 3) {
                throw IoError("neuron set CSV: expected 3 columns");
            }
            set.neurons.push_back(NeuronId{std::stoi(cells[0]), std::stoi(cells[1])});
        }
    } catch (const std::logic_error& e) {
        throw IoError(std::string("neuron set CSV: malformed number: ") + e.what());
    }
    if (!header_seen) {
        throw IoError("neuron set CSV: missing header");
    }
    return set;
}

std::vector<double> aggregate_scores(const UnitMemTable& table, Aggregation aggregation) {
    if (table.entries.empty()) {
        throw ArgumentError("aggregate_scores: empty table");
    }
    if (aggregation == Aggregation::last_token && table.num_slots != 1) {
        throw ArgumentError("aggregate_scores: last_token aggregation needs a last-token table");
    }
    std::vector<double> agg(table.num_neurons(), 0.0);
    for (const auto& e : table.entries) {
        agg[static_cast<std::size_t>(e.block) * static_cast<std::size_t>(table.d_fc1) +
            static_cast<std::size_t>(e.neuron)] += e.score;
    }
    return agg;
}

std::size_t selection_size(std::size_t total, double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0)) {
        throw ArgumentError("fraction must lie in (0, 1], got " + format_double(fraction));
    }
    // Slack absorbs float error in fraction * total (0.1 * 500 must stay 50).
    const double raw = fraction * static_cast<double>(total);
    return std::min(total, static_cast<std::size_t>(std::ceil(raw - 1e-9)));
}

NeuronSet top_k_neurons(const UnitMemTable& table, double fraction, Aggregation aggregation, SelectionScope scope) {
    const std::vector<double> agg = aggregate_scores(table, aggregation);
    const std::size_t d = static_cast<std::size_t>(table.d_fc1);
    std::vector<std::size_t> order(agg.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    // Flat index order equals (block, neuron) order, so the stable sort
    // realises the tie-break.
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return agg[a] > agg[b]; });

    NeuronSet set;
    set.fraction = fraction;
    set.aggregation = aggregation;
    set.scope = scope;
    if (scope == SelectionScope::global) {
        const std::size_t k = selection_size(agg.size(), fraction);
        for (std::size_t i = 0; i < k; ++i) {
            set.neurons.push_back(NeuronId{static_cast<int>(order[i] / d), static_cast<int>(order[i] % d)});
        }
    } else {
        const std::size_t quota = selection_size(d, fraction);
        std::vector<std::size_t> taken(static_cast<std::size_t>(table.num_blocks), 0);
        for (std::size_t idx : order) {
            const std::size_t b = idx / d;
            if (taken[b] < quota) {
                ++taken[b];
                set.neurons.push_back(NeuronId{static_cast<int>(b), static_cast<int>(idx % d)});
            }
        }
    }
    return set;
}

NeuronSet random_neurons(int num_blocks, int d_fc1, std::size_t count, std::uint64_t seed) {
    const std::size_t total = static_cast<std::size_t>(num_blocks) * static_cast<std::size_t>(d_fc1);
    if (count == 0 || count > total) {
        throw ArgumentError("random_neurons: count must lie in [1, " + std::to_string(total) + "]");
    }
    std::vector<std::size_t> all(total);
    std::iota(all.begin(), all.end(), std::size_t{0});
    Rng rng(hash_combine(seed, 0x7a4d0ULL));
    for (std::size_t i = 0; i < count; ++i) {
        std::swap(all[i], all[i + rng.below(total - i)]);
    }
    NeuronSet set;
    set.fraction = static_cast<double>(count) / static_cast<double>(total);
    set.rule = "random";
    const std::size_t d = static_cast<std::size_t>(d_fc1);
    for (std::size_t i = 0; i < count; ++i) {
        set.neurons.push_back(NeuronId{static_cast<int>(all[i] / d), static_cast<int>(all[i] % d)});
    }
    return set;
}

}  // namespace memloc
