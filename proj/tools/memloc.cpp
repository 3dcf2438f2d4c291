#include "memloc/checkpoint.hpp"
#include "memloc/config.hpp"
#include "memloc/io.hpp"
#include "memloc/parallel.hpp"
#include "memloc/pipeline.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>

using namespace memloc;
namespace fs = std::filesystem;

namespace {

struct Options {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    unsigned threads = 0;
    std::string out;
    std::string variant;
    std::optional<double> fraction;
    std::optional<double> factor;
    std::optional<double> prefix;
    std::optional<double> threshold;
    std::string checkpoint;
    std::string dataset;
    std::string unitmem;
    std::string output;
};

RunConfig load_config(const Options& o) {
    RunConfig c;
    if (!o.config_path.empty()) {
        c = load_run_config(o.config_path);
    }
    if (o.seed) {
        c.seed = *o.seed;
        c.derive_seeds();
    }
    if (o.fraction) {
        c.intervention.fraction = *o.fraction;
    }
    if (o.factor) {
        c.intervention.factor = *o.factor;
    }
    if (o.threshold) {
        c.extraction.threshold = *o.threshold;
    }
    if (o.prefix) {
        const double k = *o.prefix;
        if (k <= 1.0) {
            c.extraction.rar_prefix_ratio = k;
        }
        if (k >= 0.0 && k == std::floor(k)) {
            c.extraction.var_prefix_scales = static_cast<int>(k);
        } else {
            c.extraction.var_prefix_scales =
                static_cast<int>(std::lround(std::clamp(k, 0.0, 1.0) * c.model.num_scales));
        }
    }
    if (o.fraction && *o.fraction <= 0.0) {
        throw ConsistencyError("--fraction must be > 0; an empty neuron selection is not a valid intervention");
    }
    c.validate();
    return c;
}

std::string out_dir(const Options& o, const RunConfig& c) {
    if (!o.out.empty()) {
        return o.out;
    }
    if (const char* env = std::getenv("MEMLOC_OUT"); env && *env) {
        return env;
    }
    return c.output_dir;
}

Variant pick_variant(const Options& o, const RunConfig& c) {
    return o.variant.empty() ? c.variants.front() : parse_variant(o.variant);
}

std::string or_default(const std::string& given, const fs::path& fallback) {
    return given.empty() ? fallback.string() : given;
}

void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) {
        throw IoError("cannot create " + p.string() + ": " + ec.message());
    }
}

Checkpoint load_for(const Options& o, const RunConfig& c, const std::string& root) {
    const Variant v = pick_variant(o, c);
    Checkpoint ck = load_checkpoint(or_default(o.checkpoint, fs::path(root) / to_string(v) / "model.ck"));
    if (!o.variant.empty() && ck.model.config().variant != v) {
        throw ConsistencyError("checkpoint holds a " + to_string(ck.model.config().variant) + " model, --variant is " +
                               to_string(v));
    }
    return ck;
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

int cmd_train(const Options& o) {
    const RunConfig c = load_config(o);
    const std::string root = out_dir(o, c);
    const Variant v = pick_variant(o, c);
    const fs::path vdir = fs::path(root) / to_string(v);
    ensure_dir(vdir);
    const Dataset ds = build_dataset(c);
    save_dataset(ds, (fs::path(root) / "dataset.bin").string());
    const TrainResult r = train_variant(c, v, ds, log_line);
    save_checkpoint(Checkpoint{r.model, std::nullopt, {{"run_config", to_json(c)}}}, (vdir / "model.ck").string());
    write_text_file((vdir / "train_log.csv").string(), r.log.to_csv());
    std::cout << (vdir / "model.ck").string() << "\n";
    return 0;
}

int cmd_unitmem(const Options& o) {
    const RunConfig c = load_config(o);
    const std::string root = out_dir(o, c);
    const Checkpoint ck = load_for(o, c, root);
    const Dataset ds = load_dataset(or_default(o.dataset, fs::path(root) / "dataset.bin"));
    const std::string vn = to_string(ck.model.config().variant);
    const fs::path vdir = fs::path(root) / vn;
    ensure_dir(vdir);
    const UnitMemTable table = compute_unitmem(c, ck.model, ds);
    write_text_file((vdir / "unitmem.csv").string(), table.to_csv());
    for (HeatmapMode mode : {HeatmapMode::block_by_scale, HeatmapMode::block_total, HeatmapMode::neuron_by_block}) {
        export_heatmap(table, mode, (vdir / "heatmaps").string(), vn);
    }
    const CanaryLocalization loc = canary_localization(table);
    std::cout << "canary-argmax neurons " << loc.canary_neurons << ", mean aggregate " << format_double(loc.canary_mean)
              << " vs population " << format_double(loc.population_mean) << "\n";
    return 0;
}

int cmd_intervene(const Options& o) {
    const RunConfig c = load_config(o);
    const std::string root = out_dir(o, c);
    const Checkpoint ck = load_for(o, c, root);
    const std::string vn = to_string(ck.model.config().variant);
    const fs::path vdir = fs::path(root) / vn;
    const UnitMemTable table =
        UnitMemTable::from_csv(read_text_file(or_default(o.unitmem, vdir / "unitmem.csv")));
    const auto& mc = ck.model.config();
    if (table.variant != mc.variant || table.num_blocks != mc.num_blocks || table.d_fc1 != mc.d_fc1) {
        throw ConsistencyError("unitmem table (" + std::to_string(table.num_blocks) + " blocks x " +
                               std::to_string(table.d_fc1) + " units) does not match the checkpoint (" +
                               std::to_string(mc.num_blocks) + " x " + std::to_string(mc.d_fc1) + ")");
    }
    const NeuronSet set =
        top_k_neurons(table, c.intervention.fraction, default_aggregation(mc.variant), c.intervention.scope);
    const InterventionSpec spec = make_spec(set, c.intervention.factor, c.intervention.bias_factor);
    const Model edited = apply_intervention(ck.model, spec);
    const std::string tag = "f" + format_double(c.intervention.fraction) + "_x" + format_double(c.intervention.factor);
    const std::string path = or_default(o.output, vdir / ("model_" + tag + ".ck"));
    save_checkpoint(Checkpoint{edited, spec, ck.extra}, path);
    write_text_file((vdir / ("neurons_unitmem_" + tag + ".csv")).string(), set.to_csv());
    std::cout << path << "\n";
    return 0;
}

int cmd_extract(const Options& o) {
    const RunConfig c = load_config(o);
    const std::string root = out_dir(o, c);
    const Checkpoint ck = load_for(o, c, root);
    const Dataset ds = load_dataset(or_default(o.dataset, fs::path(root) / "dataset.bin"));
    const std::string vn = to_string(ck.model.config().variant);
    const fs::path vdir = fs::path(root) / vn;
    ensure_dir(vdir);
    const std::string identity = ck.intervention ? ck.intervention->describe() : "original";
    const CandidateSet cands = find_candidates(ck.model, ds, c.extraction.top_n, c.extraction.unique_content);
    const ExtractionReport rep =
        run_attack(ck.model, ds, cands, prefix_of(c), c.extraction.threshold, identity, extractor_of(c));
    const std::string stem = fs::path(or_default(o.checkpoint, vdir / "model.ck")).stem().string();
    write_text_file((vdir / ("extraction_" + stem + ".csv")).string(), rep.to_csv());
    nlohmann::json summary = rep.summary();
    summary["config"] = to_json(c);
    write_text_file((vdir / ("extraction_" + stem + ".json")).string(), summary.dump(2) + "\n");
    std::cout << "extracted " << rep.num_extracted << " of " << rep.num_candidates << " (" << rep.extracted_canaries()
              << " canaries)\n";
    return 0;
}

int cmd_quality(const Options& o) {
    const RunConfig c = load_config(o);
    const std::string root = out_dir(o, c);
    const Checkpoint ck = load_for(o, c, root);
    const Dataset ds = load_dataset(or_default(o.dataset, fs::path(root) / "dataset.bin"));
    const double fd = quality(c, ck.model, ds, extractor_of(c));
    const std::string vn = to_string(ck.model.config().variant);
    const fs::path vdir = fs::path(root) / vn;
    ensure_dir(vdir);
    const std::string stem = fs::path(or_default(o.checkpoint, vdir / "model.ck")).stem().string();
    nlohmann::json j = {{"surrogate_fd", fd},
                        {"num_samples", c.eval.num_samples},
                        {"temperature", c.eval.temperature},
                        {"model", ck.intervention ? ck.intervention->describe() : "original"}};
    write_text_file((vdir / ("quality_" + stem + ".json")).string(), j.dump(2) + "\n");
    std::cout << "surrogate-FD " << format_double(fd) << "\n";
    return 0;
}

int cmd_reproduce(const Options& o) {
    RunConfig c = load_config(o);
    if (!o.variant.empty()) {
        c.variants = {parse_variant(o.variant)};
    }
    if (o.fraction) {
        c.intervention.fractions = {*o.fraction};
    }
    if (o.factor) {
        c.intervention.factors = {*o.factor};
    }
    const std::string root = out_dir(o, c);
    const ReproduceResult r = reproduce(c, root, log_line);
    std::cout << tradeoff_csv(r.tradeoff);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"memloc: memorization localization lab for toy image autoregressive models"};
    app.require_subcommand(1);
    Options o;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config_path, "Run config JSON");
        sub->add_option("--seed", o.seed, "Global seed (overrides the config)");
        sub->add_option("--threads", o.threads, "Worker thread cap (0 = available parallelism)");
        sub->add_option("--out", o.out, "Output directory (falls back to $MEMLOC_OUT, then the config)");
        sub->add_option("--variant", o.variant, "var or rar");
        sub->add_option("--fraction", o.fraction, "Neuron fraction to edit");
        sub->add_option("--factor", o.factor, "fc1 weight factor");
        sub->add_option("--prefix", o.prefix, "RAR prefix ratio; VAR prefix scale count (or ratio of scales)");
        sub->add_option("--threshold", o.threshold, "Extraction similarity threshold");
        sub->add_option("--checkpoint", o.checkpoint, "Checkpoint path (default <out>/<variant>/model.ck)");
        sub->add_option("--dataset", o.dataset, "Dataset path (default <out>/dataset.bin)");
    };

    auto* train = app.add_subcommand("train", "Generate the dataset and train one variant");
    auto* unitmem = app.add_subcommand("unitmem", "Score fc1 neurons and export heatmaps");
    auto* intervene = app.add_subcommand("intervene", "Scale the top UnitMem neurons of a checkpoint");
    auto* extract = app.add_subcommand("extract", "Run the prefix extraction attack");
    auto* qual = app.add_subcommand("quality", "Surrogate-FD of generated samples against the training set");
    auto* repro = app.add_subcommand("reproduce", "Full pipeline and trade-off report");
    for (auto* sub : {train, unitmem, intervene, extract, qual, repro}) {
        add_common(sub);
    }
    intervene->add_option("--unitmem", o.unitmem, "UnitMem CSV (default <out>/<variant>/unitmem.csv)");
    intervene->add_option("--output", o.output, "Edited checkpoint path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        set_max_threads(o.threads);
        if (*train) {
            return cmd_train(o);
        }
        if (*unitmem) {
            return cmd_unitmem(o);
        }
        if (*intervene) {
            return cmd_intervene(o);
        }
        if (*extract) {
            return cmd_extract(o);
        }
        if (*qual) {
            return cmd_quality(o);
        }
        return cmd_reproduce(o);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const ConsistencyError& e) {
        std::cerr << "consistency error: " << e.what() << "\n";
        return 4;
    } catch (const ArgumentError& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return 4;
    }
}
