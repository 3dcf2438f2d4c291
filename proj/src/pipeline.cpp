#include "memloc/pipeline.hpp"

#include "memloc/checkpoint.hpp"
#include "memloc/io.hpp"

#include <chrono>
#include <filesystem>
#include <sstream>

namespace memloc {

namespace fs = std::filesystem;

namespace {

void say(const Logger& log, const std::string& msg) {
    if (log) {
        log(msg);
    }
}

std::string fixed(double v, int digits) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(digits);
    os << v;
    return os.str();
}

void make_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) {
        throw IoError("cannot create " + p.string() + ": " + ec.message());
    }
}

nlohmann::json localization_json(const CanaryLocalization& c) {
    return {{"canary_argmax_mean", c.canary_mean},
            {"population_mean", c.population_mean},
            {"canary_argmax_neurons", c.canary_neurons}};
}

}  // namespace

Dataset build_dataset(const RunConfig& config) {
    Dataset ds = generate_dataset(config.data_config());
    if (config.canaries.count > 0) {
        ds = inject_canaries(ds, config.canaries.count, config.canaries.repeat_factor, config.canary_seed());
    }
    return ds;
}

TrainResult train_variant(const RunConfig& config, Variant variant, const Dataset& dataset, const Logger& log) {
    const ModelConfig mc = config.model_config(variant);
    const TrainConfig tc = config.train_config(variant);
    return train(init_model(mc), dataset, tc, [&](const EpochStats& e, const Model&) {
        say(log, "[" + to_string(variant) + "] epoch " + std::to_string(e.epoch) + "/" + std::to_string(tc.epochs) +
                     " loss " + fixed(e.mean_loss, 4) + " canary " + fixed(e.canary_loss, 4) + " (" +
                     fixed(e.seconds, 1) + "s)");
    });
}

UnitMemTable compute_unitmem(const RunConfig& config, const Model& model, const Dataset& dataset) {
    const Dataset subset = select_subset(dataset, config.unitmem);
    return model.config().variant == Variant::var ? unitmem_var(model, subset, config.unitmem)
                                                  : unitmem_rar(model, subset, config.unitmem);
}

PrefixSpec prefix_of(const RunConfig& config) {
    PrefixSpec p;
    p.ratio = config.extraction.rar_prefix_ratio;
    p.scales = config.extraction.var_prefix_scales;
    return p;
}

FeatureExtractor extractor_of(const RunConfig& config) {
    return FeatureExtractor(FeatureExtractor::kDefaultSeed, config.data.height, config.data.width,
                            config.eval.feature_dim);
}

SamplerConfig quality_sampler(const RunConfig& config) {
    SamplerConfig s;
    s.temperature = config.eval.temperature;
    s.seed = config.sampler_seed();
    return s;
}

double quality(const RunConfig& config, const Model& model, const Dataset& dataset,
               const FeatureExtractor& extractor) {
    return quality_of(model, dataset.images, config.eval.num_samples, quality_sampler(config), extractor);
}

CanaryLocalization canary_localization(const UnitMemTable& table) {
    const auto agg = aggregate_scores(table, default_aggregation(table.variant));
    CanaryLocalization out;
    double all = 0.0;
    double canary = 0.0;
    for (int b = 0; b < table.num_blocks; ++b) {
        for (int n = 0; n < table.d_fc1; ++n) {
            const double a = agg[static_cast<std::size_t>(b) * static_cast<std::size_t>(table.d_fc1) +
                                 static_cast<std::size_t>(n)];
            all += a;
            int best = 0;
            for (int s = 1; s < table.num_slots; ++s) {
                if (table.at(b, n, s).score > table.at(b, n, best).score) {
                    best = s;
                }
            }
            if (table.at(b, n, best).argmax_is_canary) {
                canary += a;
                ++out.canary_neurons;
            }
        }
    }
    out.population_mean = all / static_cast<double>(agg.size());
    out.canary_mean = out.canary_neurons > 0 ? canary / static_cast<double>(out.canary_neurons) : 0.0;
    return out;
}

ReproduceResult reproduce(const RunConfig& config, const std::string& out_dir, const Logger& log) {
    config.validate();
    const fs::path root(out_dir);
    make_dir(root);
    ReproduceResult result;
    auto report = [&](const fs::path& rel, const std::string& text) {
        write_text_file((root / rel).string(), text);
        result.report_files.push_back(rel.generic_string());
    };

    write_text_file((root / "config.json").string(), to_json(config).dump(2) + "\n");
    const Dataset dataset = build_dataset(config);
    save_dataset(dataset, (root / "dataset.bin").string());
    say(log, "dataset: " + std::to_string(dataset.size()) + " images (" + std::to_string(config.canaries.count) +
                 " canaries x" + std::to_string(config.canaries.repeat_factor) + ")");

    const FeatureExtractor extractor = extractor_of(config);
    const PrefixSpec prefix = prefix_of(config);
    std::vector<TradeoffInput> rows;
    nlohmann::json summary;
    summary["config"] = to_json(config);

    for (Variant v : config.variants) {
        const std::string vn = to_string(v);
        const fs::path vdir = root / vn;
        make_dir(vdir);
        VariantOutcome out;
        out.variant = v;

        TrainResult trained = train_variant(config, v, dataset, log);
        const Model& model = trained.model;
        out.log = trained.log;
        write_text_file((vdir / "train_log.csv").string(), out.log.to_csv());
        save_checkpoint(Checkpoint{model, std::nullopt, {{"run_config", to_json(config)}}},
                        (vdir / "model.ck").string());

        say(log, "[" + vn + "] unitmem");
        out.table = compute_unitmem(config, model, dataset);
        report(fs::path(vn) / "unitmem.csv", out.table.to_csv());
        for (HeatmapMode mode : {HeatmapMode::block_by_scale, HeatmapMode::block_total, HeatmapMode::neuron_by_block}) {
            export_heatmap(out.table, mode, (vdir / "heatmaps").string(), vn);
        }
        out.localization = canary_localization(out.table);
        const RowMat by_scale = heatmap_matrix(out.table, HeatmapMode::block_by_scale);
        out.scale0_total = by_scale.col(0).sum();
        out.table_total = table_total(out.table);

        say(log, "[" + vn + "] extraction on the original model");
        const CandidateSet candidates =
            find_candidates(model, dataset, config.extraction.top_n, config.extraction.unique_content);
        for (const auto& c : candidates.candidates) {
            out.candidate_canaries += c.is_canary ? 1 : 0;
        }
        out.original = run_attack(model, dataset, candidates, prefix, config.extraction.threshold, "original", extractor);
        report(fs::path(vn) / "extraction_original.csv", out.original.to_csv());
        out.quality_original = quality(config, model, dataset, extractor);

        TradeoffInput baseline;
        baseline.variant = vn;
        baseline.selection = "baseline";
        baseline.extracted_before = out.original.num_extracted;
        baseline.extracted_after = out.original.num_extracted;
        baseline.quality_before = out.quality_original;
        baseline.quality_after = out.quality_original;
        out.rows.push_back(baseline);

        const Aggregation agg = default_aggregation(v);
        for (double fraction : config.intervention.fractions) {
            const NeuronSet chosen = top_k_neurons(out.table, fraction, agg, config.intervention.scope);
            NeuronSet control = random_neurons(out.table.num_blocks, out.table.d_fc1, chosen.neurons.size(),
                                               hash_combine(config.control_seed(), static_cast<std::uint64_t>(v)));
            control.fraction = fraction;
            for (const NeuronSet* set : {&chosen, static_cast<const NeuronSet*>(&control)}) {
                const std::string tag = set->rule + "_f" + format_double(fraction);
                report(fs::path(vn) / ("neurons_" + tag + ".csv"), set->to_csv());
                for (double factor : config.intervention.factors) {
                    const InterventionSpec spec = make_spec(*set, factor, config.intervention.bias_factor);
                    const Model edited = apply_intervention(model, spec);
                    say(log, "[" + vn + "] " + spec.describe());
                    const ExtractionReport rep = run_attack(edited, dataset, candidates, prefix,
                                                            config.extraction.threshold, spec.describe(), extractor);
                    report(fs::path(vn) / ("extraction_" + tag + "_x" + format_double(factor) + ".csv"), rep.to_csv());
                    TradeoffInput row;
                    row.variant = vn;
                    row.selection = set->rule;
                    row.fraction = fraction;
                    row.factor = factor;
                    row.neurons = set->neurons.size();
                    row.extracted_before = out.original.num_extracted;
                    row.extracted_after = rep.num_extracted;
                    row.quality_before = out.quality_original;
                    row.quality_after = quality(config, edited, dataset, extractor);
                    out.rows.push_back(row);
                }
            }
        }
        rows.insert(rows.end(), out.rows.begin(), out.rows.end());

        nlohmann::json vs;
        vs["final_mean_loss"] = out.log.epochs.empty() ? 0.0 : out.log.epochs.back().mean_loss;
        vs["final_canary_loss"] = out.log.epochs.empty() ? 0.0 : out.log.epochs.back().canary_loss;
        vs["canary_localization"] = localization_json(out.localization);
        vs["unitmem_total"] = out.table_total;
        vs["scale0_total"] = out.scale0_total;
        vs["num_candidates"] = candidates.candidates.size();
        vs["candidate_canaries"] = out.candidate_canaries;
        vs["extraction_original"] = out.original.summary();
        vs["surrogate_fd_original"] = out.quality_original;
        summary["variants"][vn] = vs;
        result.variants.push_back(std::move(out));
    }

    result.tradeoff = tradeoff_report(rows);
    report("tradeoff.csv", tradeoff_csv(result.tradeoff));
    report("summary.json", summary.dump(2) + "\n");
    return result;
}

}  // namespace memloc
