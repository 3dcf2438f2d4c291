#include "memloc/checkpoint.hpp"
#include "memloc/eval.hpp"
#include "memloc/io.hpp"
#include "memloc/pipeline.hpp"
#include "memloc/training.hpp"
#include "memloc/unitmem.hpp"

#include "oracle.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>

using namespace memloc;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = true;
    std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const Verdict& v) {
    std::printf("criterion %2d %-28s %s  %s\n", id, name.c_str(), v.pass ? "PASS" : "FAIL", v.detail.c_str());
    std::fflush(stdout);
    failures += v.pass ? 0 : 1;
}

// Suite-level assertions that sit alongside the numbered criteria.
void check(const std::string& name, const Verdict& v) {
    std::printf("check        %-28s %s  %s\n", name.c_str(), v.pass ? "PASS" : "FAIL", v.detail.c_str());
    std::fflush(stdout);
    failures += v.pass ? 0 : 1;
}

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

ActivationStats column(const std::vector<double>& col) {
    ActivationStats s(Variant::rar, 1, 1, 1, col.size());
    for (std::size_t k = 0; k < col.size(); ++k) {
        s.sample_ids[k] = 10 + k;
        s.at(k, 0, 0, 0) = col[k];
    }
    return s;
}

double score_of(const std::vector<double>& col) { return unitmem_score(column(col)).at(0, 0, 0).score; }

Verdict unitmem_oracle() {
    Verdict v;
    std::ostringstream os;
    for (Variant var : {Variant::var, Variant::rar}) {
        ModelConfig mc;
        mc.variant = var;
        mc.num_blocks = 2;
        mc.seed = 5;
        const Model m = init_model(mc);
        UnitMemConfig cfg;
        cfg.subset_fraction = 0.125;
        cfg.seed = 21;
        const Dataset subset = select_subset(generate_dataset(DataConfig{}), cfg);
        const UnitMemTable t = var == Variant::var ? unitmem_var(m, subset, cfg) : unitmem_rar(m, subset, cfg);
        const auto ref = oracle::unitmem(m, subset, cfg);
        double worst = 0.0;
        int argmax_mismatch = 0;
        for (const auto& e : t.entries) {
            const auto& o = ref[e.block][e.neuron][e.slot];
            worst = std::max({worst, std::abs(e.score - o.score), std::abs(e.mu_max - o.mu_max),
                              std::abs(e.mu_minus_max - o.mu_minus_max)});
            argmax_mismatch += e.argmax_sample_id != o.argmax;
        }
        v.pass = v.pass && subset.size() == 8 && worst < 1e-6 && argmax_mismatch == 0;
        os << to_string(var) << " |D'|=" << subset.size() << " slots=" << t.num_slots << " max_err=" << worst
           << " argmax_mismatch=" << argmax_mismatch << "; ";
    }
    v.detail = os.str() + "tol 1e-6";
    return v;
}

Verdict unitmem_properties() {
    Verdict v;
    const double fixed = score_of({4, 1, 1});
    v.pass = std::abs(fixed - 0.6) < 1e-12;
    Rng rng(77);
    int bad = 0;
    const int trials = 500;
    for (int trial = 0; trial < trials; ++trial) {
        const std::size_t n = 2 + rng.below(14);
        std::vector<double> col(n);
        for (double& x : col) {
            x = rng.uniform() < 0.2 ? 0.0 : rng.uniform() * 5.0;
        }
        const double s = score_of(col);
        const double c = 0.01 + rng.uniform() * 100.0;
        std::vector<double> scaled = col;
        for (double& x : scaled) {
            x *= c;
        }
        std::vector<double> perm = col;
        for (std::size_t i = n; i > 1; --i) {
            std::swap(perm[i - 1], perm[rng.below(i)]);
        }
        std::vector<double> hot(n, 0.0);
        hot[rng.below(n)] = c;
        const bool ok = s >= 0.0 && s <= 1.0 && std::abs(score_of(scaled) - s) < 1e-12 &&
                        std::abs(score_of(perm) - s) < 1e-12 && score_of(std::vector<double>(n, c)) == 0.0 &&
                        score_of(hot) == 1.0;
        bad += ok ? 0 : 1;
    }
    v.pass = v.pass && bad == 0;
    v.detail = "[4,1,1]=" + fmt("%.12f", fixed) + "; " + std::to_string(trials) + " random trials, " +
               std::to_string(bad) + " violations (range, [c..c]=0, one-hot=1, scaling, permutation)";
    return v;
}

Verdict gradients() {
    Verdict v;
    std::ostringstream os;
    for (Variant var : {Variant::var, Variant::rar}) {
        ModelConfig mc;
        mc.variant = var;
        mc.num_blocks = 2;
        mc.d_model = 16;
        mc.num_heads = 2;
        mc.d_fc1 = 24;
        mc.num_scales = 3;
        mc.seq_len = 16;
        mc.num_classes = 3;
        mc.seed = 11;
        DataConfig dc;
        dc.num_images = 6;
        dc.num_classes = 3;
        dc.height = 4;
        dc.width = 4;
        const Dataset ds = generate_dataset(dc);
        const Model m = init_model(mc);
        const SequenceInput in = make_training_input(m, Palette::for_vocab(mc.vocab_size), ds.images[1]);
        std::vector<double> grad(m.layout().total, 0.0);
        loss_and_gradient(m, in, grad);
        std::map<ParamClass, std::vector<std::size_t>> pool;
        for (const auto& t : m.layout().tensors) {
            for (std::size_t k = 0; k < t.size(); ++k) {
                if (grad[t.offset + k] != 0.0) {
                    pool[t.param_class].push_back(t.offset + k);
                }
            }
        }
        Rng rng(17);
        const double h = 1e-3;
        double worst = 0.0;
        int total = 0;
        for (const auto& [cls, idx] : pool) {
            for (int k = 0; k < 40; ++k) {
                const std::size_t i = idx[rng.below(idx.size())];
                Model plus = m;
                Model minus = m;
                plus.mutable_params()[i] += h;
                minus.mutable_params()[i] -= h;
                const double fd = (sample_loss(plus, in) - sample_loss(minus, in)) / (2 * h);
                worst = std::max(worst, std::abs(fd - grad[i]) / std::max(1e-8, std::abs(fd) + std::abs(grad[i])));
                ++total;
            }
        }
        v.pass = v.pass && total >= 200 && pool.size() == 6 && worst < 1e-3;
        os << to_string(var) << " params=" << total << " classes=" << pool.size() << " max_rel=" << worst << "; ";
    }
    v.detail = os.str() + "step 1e-3, tol 1e-3";
    return v;
}

Verdict frechet() {
    auto gaussian = [](int n, int f, std::uint64_t seed, double spread) {
        Rng rng(seed);
        RowMat m(n, f);
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = rng.normal() * spread;
        }
        return m;
    };
    const RowMat a = gaussian(200, 8, 5, 1.0);
    const RowMat b = gaussian(150, 8, 6, 1.7);
    RowVec delta(8);
    delta << 0.5, -1.0, 0.25, 2.0, 0.0, -0.3, 1.1, 0.7;
    const RowMat shifted = a.rowwise() + delta;
    const double self = frechet_distance(a, a);
    const double shift_err = std::abs(frechet_distance(a, shifted) - delta.squaredNorm());
    const double asym = std::abs(frechet_distance(a, b) - frechet_distance(b, a));
    Verdict v;
    v.pass = std::abs(self) < 1e-6 && shift_err < 1e-5 && asym < 1e-6;
    v.detail = "identity=" + fmt("%.2e", self) + " mean_shift_err=" + fmt("%.2e", shift_err) +
               " asymmetry=" + fmt("%.2e", asym);
    return v;
}

const VariantOutcome* find(const ReproduceResult& r, Variant v) {
    for (const auto& o : r.variants) {
        if (o.variant == v) {
            return &o;
        }
    }
    return nullptr;
}

const TradeoffInput* row_of(const VariantOutcome& o, const std::string& selection, double fraction, double factor) {
    for (const auto& r : o.rows) {
        if (r.selection == selection && std::abs(r.fraction - fraction) < 1e-12 && r.factor == factor) {
            return &r;
        }
    }
    return nullptr;
}

Verdict localization(const ReproduceResult& r) {
    Verdict v;
    std::ostringstream os;
    for (Variant var : {Variant::var, Variant::rar}) {
        const VariantOutcome* o = find(r, var);
        if (!o) {
            v.pass = false;
            os << to_string(var) << " not run; ";
            continue;
        }
        const auto& l = o->localization;
        v.pass = v.pass && l.canary_neurons > 0 && l.canary_mean > l.population_mean;
        os << to_string(var) << " canary_mean=" << fmt("%.4f", l.canary_mean)
           << " population_mean=" << fmt("%.4f", l.population_mean) << " (n=" << l.canary_neurons << "); ";
    }
    v.detail = os.str();
    return v;
}

Verdict efficacy(const ReproduceResult& r, bool control) {
    Verdict v;
    std::ostringstream os;
    for (Variant var : {Variant::var, Variant::rar}) {
        const VariantOutcome* o = find(r, var);
        const TradeoffInput* u = o ? row_of(*o, "unitmem", 0.10, 0.5) : nullptr;
        const TradeoffInput* rnd = o ? row_of(*o, "random", 0.10, 0.5) : nullptr;
        if (!u || !rnd) {
            v.pass = false;
            os << to_string(var) << " has no 10% x0.5 rows; ";
            continue;
        }
        const double ru = reduction_percent(u->extracted_before, u->extracted_after);
        const double rr = reduction_percent(rnd->extracted_before, rnd->extracted_after);
        if (control) {
            v.pass = v.pass && rr < ru;
            os << to_string(var) << " unitmem " << fmt("%.1f%%", ru) << " vs random " << fmt("%.1f%%", rr) << "; ";
        } else {
            v.pass = v.pass && ru >= 50.0;
            os << to_string(var) << " extracted " << u->extracted_before << "->" << u->extracted_after << " ("
               << fmt("%.1f%%", ru) << ", canaries " << o->original.extracted_canaries() << "/"
               << o->candidate_canaries << " candidates); ";
        }
    }
    v.detail = os.str() + (control ? "random set of equal size" : "need >= 50% at threshold 0.75");
    return v;
}

Verdict canaries_extracted(const ReproduceResult& r) {
    Verdict v;
    std::ostringstream os;
    for (const auto& o : r.variants) {
        v.pass = v.pass && o.original.extracted_canaries() >= 1;
        os << to_string(o.variant) << " " << o.original.extracted_canaries() << " of " << o.candidate_canaries
           << " candidate canaries extracted (" << o.original.num_extracted << " of " << o.original.num_candidates
           << " candidates); ";
    }
    v.detail = os.str() + "need >= 1";
    return v;
}

Verdict prefix_monotonicity(const RunConfig& c, const fs::path& dir) {
    Verdict v;
    std::ostringstream os;
    const Dataset ds = load_dataset((dir / "dataset.bin").string());
    const FeatureExtractor extractor = extractor_of(c);
    PrefixSpec full;
    full.ratio = 1.0;
    full.scales = c.model.num_scales;
    for (Variant var : c.variants) {
        const Checkpoint ck = load_checkpoint((dir / to_string(var) / "model.ck").string());
        int checked = 0;
        int violations = 0;
        double worst = 1.0;
        std::set<std::uint64_t> seen;
        for (const auto& im : ds.images) {
            if (!im.is_canary || !seen.insert(im.base_id).second) {
                continue;
            }
            const double at_full = extract_one(ck.model, im, full, SamplerConfig{}, extractor).similarity;
            const double at_default = extract_one(ck.model, im, prefix_of(c), SamplerConfig{}, extractor).similarity;
            ++checked;
            violations += at_full >= at_default ? 0 : 1;
            worst = std::min(worst, at_full - at_default);
        }
        v.pass = v.pass && violations == 0;
        os << to_string(var) << " " << checked << " canaries, " << violations << " violations, min margin "
           << fmt("%.4f", worst) << "; ";
    }
    v.detail = os.str() + "similarity(full prefix) >= similarity(default prefix)";
    return v;
}

Verdict tradeoff_shape(const ReproduceResult& r) {
    Verdict v;
    std::ostringstream os;
    for (Variant var : {Variant::var, Variant::rar}) {
        const VariantOutcome* o = find(r, var);
        if (!o) {
            v.pass = false;
            continue;
        }
        std::size_t last_extracted = o->original.num_extracted;
        double last_fd = -1.0;
        os << to_string(var);
        for (double f : {0.01, 0.05, 0.10}) {
            const TradeoffInput* u = row_of(*o, "unitmem", f, 0.5);
            if (!u) {
                v.pass = false;
                continue;
            }
            v.pass = v.pass && u->extracted_after <= last_extracted && u->quality_after >= last_fd;
            last_extracted = u->extracted_after;
            last_fd = u->quality_after;
            os << " " << fmt("%.0f%%:", f * 100) << u->extracted_after << "/" << fmt("%.3f", u->quality_after);
        }
        os << "; ";
    }
    v.detail = os.str() + "extracted/surrogate-FD by fraction";
    return v;
}

Verdict patterns(const ReproduceResult& r) {
    Verdict v;
    std::ostringstream os;
    for (const auto& o : r.variants) {
        const UnitMemTable& t = o.table;
        const RowMat m = heatmap_matrix(t, HeatmapMode::block_by_scale);
        const int cols = o.variant == Variant::var ? t.num_slots : 1;
        bool exact = m.rows() == t.num_blocks && m.cols() == cols;
        double entries = 0.0;
        for (int b = 0; exact && b < t.num_blocks; ++b) {
            for (int s = 0; s < cols; ++s) {
                double cell = 0.0;
                for (int n = 0; n < t.d_fc1; ++n) {
                    cell += t.at(b, n, s).score;
                }
                exact = exact && cell == m(b, s);
            }
        }
        for (const auto& e : t.entries) {
            entries += e.score;
        }
        const bool total_ok = std::abs(entries - o.table_total) <= 1e-12 * std::max(1.0, std::abs(entries));
        v.pass = v.pass && exact && total_ok;
        os << to_string(o.variant) << " " << m.rows() << "x" << m.cols() << (exact ? " cells exact" : " cells differ")
           << " total=" << fmt("%.6f", o.table_total);
        if (o.variant == Variant::var) {
            os << " scale0=" << fmt("%.6f", o.scale0_total) << " ("
               << fmt("%.1f%%", 100.0 * o.scale0_total / std::max(1e-300, o.table_total)) << ")";
        }
        os << "; ";
    }
    v.detail = os.str();
    return v;
}

Verdict determinism(const ReproduceResult& a, const fs::path& da, const ReproduceResult& b, const fs::path& db) {
    Verdict v;
    std::size_t differ = 0;
    std::string first;
    v.pass = a.report_files == b.report_files && !a.report_files.empty();
    for (const auto& f : a.report_files) {
        if (read_text_file((da / f).string()) != read_text_file((db / f).string())) {
            ++differ;
            if (first.empty()) {
                first = f;
            }
        }
    }
    v.pass = v.pass && differ == 0;
    v.detail = std::to_string(a.report_files.size()) + " report files compared, " + std::to_string(differ) +
               " differ" + (first.empty() ? "" : " (first: " + first + ")");
    return v;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"memloc acceptance suite"};
    std::string config_path;
    std::string out = (fs::temp_directory_path() / "memloc_acceptance").string();
    bool skip_pipeline = false;
    app.add_option("--config", config_path, "Run config JSON (default: built-in defaults)");
    app.add_option("--out", out, "Scratch directory for the two reproduce runs");
    app.add_flag("--skip-pipeline", skip_pipeline, "Only run criteria that do not need trained models");
    CLI11_PARSE(app, argc, argv);

    const RunConfig config = config_path.empty() ? RunConfig{} : load_run_config(config_path);

    report(1, "unitmem-oracle", unitmem_oracle());
    report(2, "unitmem-range-extremes", unitmem_properties());
    report(3, "gradient-check", gradients());
    report(8, "frechet-surrogate", frechet());
    if (skip_pipeline) {
        std::printf("pipeline criteria skipped\n");
        return failures == 0 ? 0 : 1;
    }

    const fs::path da = fs::path(out) / "run_a";
    const fs::path db = fs::path(out) / "run_b";
    fs::remove_all(da);
    fs::remove_all(db);
    const auto t0 = std::chrono::steady_clock::now();
    const ReproduceResult a = reproduce(config, da.string());
    const auto t1 = std::chrono::steady_clock::now();
    std::printf("reproduce run A: %.0f s\n", std::chrono::duration<double>(t1 - t0).count());

    report(4, "canary-localization", localization(a));
    report(5, "intervention-efficacy", efficacy(a, false));
    report(6, "localization-specificity", efficacy(a, true));
    report(7, "tradeoff-shape", tradeoff_shape(a));
    report(9, "structural-pattern-export", patterns(a));
    check("canary-extracted", canaries_extracted(a));
    check("prefix-monotonicity", prefix_monotonicity(config, da));

    const ReproduceResult b = reproduce(config, db.string());
    std::printf("reproduce run B: %.0f s\n",
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count());
    report(10, "determinism", determinism(a, da, b, db));

    std::printf("%d failed\n", failures);
    return failures == 0 ? 0 : 1;
}
