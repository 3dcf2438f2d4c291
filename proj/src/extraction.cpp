#include "memloc/extraction.hpp"

#include "memloc/io.hpp"
#include "memloc/parallel.hpp"
#include "memloc/training.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace memloc {

CandidateSet find_candidates(const Model& model, const Dataset& dataset, std::size_t top_n, bool unique_content) {
    if (top_n == 0 || top_n > dataset.images.size()) {
        throw ArgumentError("find_candidates: top_n must be in [1, " + std::to_string(dataset.images.size()) +
                            "], got " + std::to_string(top_n));
    }
    const Palette palette = Palette::for_vocab(model.config().vocab_size);
    std::vector<Candidate> all(dataset.images.size());
    parallel_for(all.size(), [&](std::size_t i) {
        const Image& im = dataset.images[i];
        all[i] = Candidate{i, im.sample_id, sample_loss(model, make_training_input(model, palette, im)), im.is_canary};
    });
    std::sort(all.begin(), all.end(), [](const Candidate& a, const Candidate& b) {
        if (a.loss != b.loss) {
            return a.loss < b.loss;
        }
        return a.sample_id < b.sample_id;
    });
    CandidateSet out;
    std::set<std::uint64_t> seen;
    for (const auto& c : all) {
        if (out.candidates.size() == top_n) {
            break;
        }
        if (unique_content && !seen.insert(dataset.images[c.index].base_id).second) {
            continue;
        }
        out.candidates.push_back(c);
    }
    return out;
}

void PrefixSpec::validate(const ModelConfig& config) const {
    if (config.variant == Variant::rar) {
        if (!(ratio >= 0.0 && ratio <= 1.0)) {
            throw ArgumentError("prefix ratio must be in [0, 1]");
        }
    } else if (scales < 0 || scales > config.num_scales) {
        throw ArgumentError("prefix scales must be in [0, " + std::to_string(config.num_scales) + "]");
    }
}

int PrefixSpec::rar_tokens(int seq_len) const {
    return static_cast<int>(std::floor(ratio * seq_len + 1e-9));
}

double similarity(const Image& a, const Image& b, const FeatureExtractor& extractor) {
    Vec fa = extractor.features(a);
    Vec fb = extractor.features(b);
    fa.array() -= fa.mean();
    fb.array() -= fb.mean();
    const double na = fa.norm();
    const double nb = fb.norm();
    if (na == 0.0 || nb == 0.0) {
        return (na == 0.0 && nb == 0.0) ? 1.0 : 0.0;
    }
    return fa.dot(fb) / (na * nb);
}

ExtractOutcome extract_one(const Model& model, const Image& candidate, const PrefixSpec& prefix,
                           const SamplerConfig& sampler, const FeatureExtractor& extractor) {
    const auto& c = model.config();
    prefix.validate(c);
    const Palette palette = Palette::for_vocab(c.vocab_size);
    ExtractOutcome out;
    out.reference = quantized(candidate, palette);
    if (c.variant == Variant::rar) {
        const TokenSeq full = tokenize_flat(candidate, palette);
        const int k = prefix.rar_tokens(static_cast<int>(full.tokens.size()));
        const std::span<const int> head(full.tokens.data(), static_cast<std::size_t>(k));
        out.generated = detokenize(generate_rar(model, head, candidate.class_id, sampler), palette);
    } else {
        ScaleTokens head = tokenize_multiscale(candidate, palette);
        head.per_scale.resize(static_cast<std::size_t>(prefix.scales));
        out.generated = detokenize_multiscale(generate_var(model, head, candidate.class_id, sampler), palette);
    }
    out.generated.class_id = candidate.class_id;
    out.generated.sample_id = candidate.sample_id;
    out.generated.base_id = candidate.base_id;
    out.similarity = similarity(out.generated, out.reference, extractor);
    return out;
}

std::size_t ExtractionReport::extracted_canaries() const {
    return static_cast<std::size_t>(
        std::count_if(rows.begin(), rows.end(), [](const ExtractionRow& r) { return r.extracted && r.is_canary; }));
}

std::string ExtractionReport::to_csv() const {
    std::ostringstream os;
    os << "sample_id,is_canary,loss,similarity,extracted\n";
    for (const auto& r : rows) {
        os << r.sample_id << ',' << (r.is_canary ? 1 : 0) << ',' << format_double(r.loss) << ','
           << format_double(r.similarity) << ',' << (r.extracted ? 1 : 0) << '\n';
    }
    return os.str();
}

nlohmann::json ExtractionReport::summary() const {
    nlohmann::json j;
    j["variant"] = to_string(variant);
    j["model"] = model_identity;
    j["threshold"] = threshold;
    if (variant == Variant::rar) {
        j["prefix"] = {{"ratio", prefix.ratio}};
    } else {
        j["prefix"] = {{"scales", prefix.scales}};
    }
    j["num_candidates"] = num_candidates;
    j["num_extracted"] = num_extracted;
    j["num_extracted_canaries"] = extracted_canaries();
    return j;
}

ExtractionReport run_attack(const Model& model, const Dataset& dataset, const CandidateSet& candidates,
                            const PrefixSpec& prefix, double threshold, const std::string& model_identity,
                            const FeatureExtractor& extractor) {
    if (std::isnan(threshold)) {
        throw ArgumentError("run_attack: threshold is NaN");
    }
    prefix.validate(model.config());
    ExtractionReport report;
    report.threshold = threshold;
    report.prefix = prefix;
    report.variant = model.config().variant;
    report.model_identity = model_identity;
    report.num_candidates = candidates.candidates.size();
    report.rows.resize(candidates.candidates.size());
    parallel_for(report.rows.size(), [&](std::size_t i) {
        const Candidate& c = candidates.candidates[i];
        if (c.index >= dataset.images.size()) {
            throw ArgumentError("run_attack: candidate index out of range");
        }
        const ExtractOutcome o = extract_one(model, dataset.images[c.index], prefix, SamplerConfig{}, extractor);
        report.rows[i] = ExtractionRow{c.sample_id, c.is_canary, c.loss, o.similarity, o.similarity > threshold};
    });
    report.num_extracted = static_cast<std::size_t>(
        std::count_if(report.rows.begin(), report.rows.end(), [](const ExtractionRow& r) { return r.extracted; }));
    return report;
}

}  // namespace memloc
