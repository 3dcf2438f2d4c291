#include "memloc/eval.hpp"

#include "memloc/io.hpp"
#include "memloc/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

namespace memloc {

FeatureExtractor::FeatureExtractor(std::uint64_t seed, int height, int width, int feature_dim, int channels1)
    : seed_(seed), height_(height), width_(width), feature_dim_(feature_dim), channels1_(channels1) {
    if (height < 4 || width < 4 || height % 4 != 0 || width % 4 != 0) {
        throw ArgumentError("FeatureExtractor: image sides must be positive multiples of 4");
    }
    const int cells = (height / 4) * (width / 4);
    if (feature_dim < 1 || feature_dim % cells != 0 || channels1 < 1) {
        throw ArgumentError("FeatureExtractor: feature_dim must be a multiple of (height/4)*(width/4)");
    }
    channels2_ = feature_dim / cells;
    Rng rng(hash_combine(seed, 0xfea7ULL));
    auto fill = [&](std::vector<double>& w, std::size_t n, int fan_in) {
        const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
        w.resize(n);
        for (double& v : w) {
            v = sd * rng.normal();
        }
    };
    fill(w1_, static_cast<std::size_t>(channels1_) * 27, 27);
    fill(b1_, static_cast<std::size_t>(channels1_), 27);
    fill(w2_, static_cast<std::size_t>(channels2_) * channels1_ * 9, channels1_ * 9);
    fill(b2_, static_cast<std::size_t>(channels2_), channels1_ * 9);
}

namespace {

// 3x3, stride 2, padding 1 convolution with GELU. Input and output are
// channel-last (h, w, c).
std::vector<double> conv_gelu(const std::vector<double>& in, int h, int w, int cin, const std::vector<double>& weight,
                              const std::vector<double>& bias, int cout) {
    const int oh = h / 2;
    const int ow = w / 2;
    std::vector<double> out(static_cast<std::size_t>(oh) * ow * cout);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            for (int o = 0; o < cout; ++o) {
                double acc = bias[static_cast<std::size_t>(o)];
                for (int ky = 0; ky < 3; ++ky) {
                    const int iy = 2 * y + ky - 1;
                    if (iy < 0 || iy >= h) {
                        continue;
                    }
                    for (int kx = 0; kx < 3; ++kx) {
                        const int ix = 2 * x + kx - 1;
                        if (ix < 0 || ix >= w) {
                            continue;
                        }
                        for (int c = 0; c < cin; ++c) {
                            acc += weight[((static_cast<std::size_t>(o) * cin + c) * 3 + ky) * 3 + kx] *
                                   in[(static_cast<std::size_t>(iy) * w + ix) * cin + c];
                        }
                    }
                }
                out[(static_cast<std::size_t>(y) * ow + x) * cout + o] = gelu(acc);
            }
        }
    }
    return out;
}

}  // namespace

Vec FeatureExtractor::features(const Image& image) const {
    if (image.height != height_ || image.width != width_) {
        throw ArgumentError("FeatureExtractor: expected " + std::to_string(height_) + "x" + std::to_string(width_) +
                            " image, got " + std::to_string(image.height) + "x" + std::to_string(image.width));
    }
    std::vector<double> x(image.pixels.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = 2.0 * image.pixels[i] - 1.0;
    }
    const auto h1 = conv_gelu(x, height_, width_, 3, w1_, b1_, channels1_);
    const auto h2 = conv_gelu(h1, height_ / 2, width_ / 2, channels1_, w2_, b2_, channels2_);
    return Eigen::Map<const Vec>(h2.data(), static_cast<Eigen::Index>(h2.size()));
}

const FeatureExtractor& default_extractor() {
    static const FeatureExtractor extractor;
    return extractor;
}

RowMat extract_features(std::span<const Image> images, const FeatureExtractor& extractor) {
    RowMat out(static_cast<Eigen::Index>(images.size()), extractor.dim());
    parallel_for(images.size(), [&](std::size_t i) {
        out.row(static_cast<Eigen::Index>(i)) = extractor.features(images[i]).transpose();
    });
    return out;
}

namespace {

Eigen::MatrixXd covariance(const RowMat& x, const Vec& mean) {
    const RowMat centered = x.rowwise() - mean.transpose();
    return (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
    const Vec roots = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return eig.eigenvectors() * roots.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const RowMat& feats_a, const RowMat& feats_b, double eps) {
    if (feats_a.cols() != feats_b.cols()) {
        throw ArgumentError("frechet_distance: feature dimensions differ");
    }
    const Eigen::Index f = feats_a.cols();
    if (feats_a.rows() < f + 1 || feats_b.rows() < f + 1) {
        throw ArgumentError("frechet_distance: need at least " + std::to_string(f + 1) + " samples per side, got " +
                            std::to_string(feats_a.rows()) + " and " + std::to_string(feats_b.rows()));
    }
    const Vec mu_a = feats_a.colwise().mean().transpose();
    const Vec mu_b = feats_b.colwise().mean().transpose();
    const Eigen::MatrixXd reg = eps * Eigen::MatrixXd::Identity(f, f);
    const Eigen::MatrixXd cov_a = covariance(feats_a, mu_a) + reg;
    const Eigen::MatrixXd cov_b = covariance(feats_b, mu_b) + reg;

    // Tr((S_a S_b)^(1/2)) = Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)); the inner
    // product is symmetric PSD up to rounding, so it is symmetrised and its
    // negative eigenvalues clamped.
    const Eigen::MatrixXd root_a = psd_sqrt(cov_a);
    Eigen::MatrixXd inner = root_a * cov_b * root_a;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(inner, Eigen::EigenvaluesOnly);
    const double trace_sqrt = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    const double value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt;
    return std::max(0.0, value);
}

std::vector<Image> generate_samples(const Model& model, int n_samples, const SamplerConfig& sampler) {
    if (n_samples < 1) {
        throw ArgumentError("generate_samples: n_samples must be positive");
    }
    const auto& c = model.config();
    const Palette palette = Palette::for_vocab(c.vocab_size);
    std::vector<Image> out(static_cast<std::size_t>(n_samples));
    parallel_for(out.size(), [&](std::size_t i) {
        const int cls = static_cast<int>(i % static_cast<std::size_t>(c.num_classes));
        SamplerConfig s = sampler;
        s.seed = hash_combine(sampler.seed, static_cast<std::uint64_t>(i));
        Image im;
        if (c.variant == Variant::var) {
            im = detokenize_multiscale(generate_var(model, ScaleTokens{}, cls, s), palette);
        } else {
            im = detokenize(generate_rar(model, {}, cls, s), palette);
        }
        im.class_id = cls;
        im.sample_id = static_cast<std::uint64_t>(i);
        im.base_id = im.sample_id;
        out[i] = std::move(im);
    });
    return out;
}

double quality_of(const Model& model, std::span<const Image> reference, int n_samples, const SamplerConfig& sampler,
                  const FeatureExtractor& extractor) {
    if (n_samples < extractor.dim() + 1) {
        throw ArgumentError("quality_of: n_samples must be >= feature dim + 1 (" +
                            std::to_string(extractor.dim() + 1) + ")");
    }
    const std::vector<Image> generated = generate_samples(model, n_samples, sampler);
    return frechet_distance(extract_features(generated, extractor), extract_features(reference, extractor));
}

HeatmapMode parse_heatmap_mode(const std::string& s) {
    if (s == "block_by_scale") {
        return HeatmapMode::block_by_scale;
    }
    if (s == "block_total") {
        return HeatmapMode::block_total;
    }
    if (s == "neuron_by_block") {
        return HeatmapMode::neuron_by_block;
    }
    throw ArgumentError("unknown heatmap mode '" + s + "'");
}

std::string to_string(HeatmapMode m) {
    switch (m) {
        case HeatmapMode::block_by_scale:
            return "block_by_scale";
        case HeatmapMode::block_total:
            return "block_total";
        case HeatmapMode::neuron_by_block:
            return "neuron_by_block";
    }
    return "?";
}

RowMat heatmap_matrix(const UnitMemTable& table, HeatmapMode mode, int slot) {
    if (table.entries.empty()) {
        throw ArgumentError("heatmap: empty table");
    }
    switch (mode) {
        case HeatmapMode::block_by_scale: {
            RowMat m = RowMat::Zero(table.num_blocks, table.num_slots);
            for (int b = 0; b < table.num_blocks; ++b) {
                for (int s = 0; s < table.num_slots; ++s) {
                    for (int n = 0; n < table.d_fc1; ++n) {
                        m(b, s) += table.at(b, n, s).score;
                    }
                }
            }
            return m;
        }
        case HeatmapMode::block_total: {
            const RowMat per_scale = heatmap_matrix(table, HeatmapMode::block_by_scale);
            RowMat m = RowMat::Zero(table.num_blocks, 1);
            for (int b = 0; b < table.num_blocks; ++b) {
                for (int s = 0; s < table.num_slots; ++s) {
                    m(b, 0) += per_scale(b, s);
                }
            }
            return m;
        }
        case HeatmapMode::neuron_by_block: {
            if (slot < 0 || slot >= table.num_slots) {
                throw ArgumentError("heatmap: slot out of range");
            }
            RowMat m(table.num_blocks, table.d_fc1);
            for (int b = 0; b < table.num_blocks; ++b) {
                for (int n = 0; n < table.d_fc1; ++n) {
                    m(b, n) = table.at(b, n, slot).score;
                }
            }
            return m;
        }
    }
    throw ArgumentError("heatmap: unknown mode");
}

double table_total(const UnitMemTable& table) {
    const RowMat m = heatmap_matrix(table, HeatmapMode::block_by_scale);
    double total = 0.0;
    for (Eigen::Index b = 0; b < m.rows(); ++b) {
        for (Eigen::Index s = 0; s < m.cols(); ++s) {
            total += m(b, s);
        }
    }
    return total;
}

std::string matrix_csv(const RowMat& m, const std::string& row_label, const std::string& col_prefix) {
    std::ostringstream os;
    os << row_label;
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
        os << ',' << col_prefix << c;
    }
    os << '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        os << r;
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            os << ',' << format_double(m(r, c));
        }
        os << '\n';
    }
    return os.str();
}

std::string matrix_pgm(const RowMat& m) {
    std::string out = "P5\n" + std::to_string(m.cols()) + " " + std::to_string(m.rows()) + "\n255\n";
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const double row_max = m.row(r).maxCoeff();
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            long v = 0;
            if (row_max > 0.0) {
                v = std::lround(255.0 * std::max(0.0, m(r, c)) / row_max);
            }
            out.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(v, 0L, 255L))));
        }
    }
    return out;
}

std::string score_histogram_csv(const UnitMemTable& table, int bins) {
    if (bins < 1) {
        throw ArgumentError("histogram: bins must be positive");
    }
    std::vector<std::size_t> counts(static_cast<std::size_t>(bins), 0);
    for (const auto& e : table.entries) {
        const int b = std::min(bins - 1, static_cast<int>(std::floor(e.score * bins)));
        ++counts[static_cast<std::size_t>(std::max(0, b))];
    }
    std::ostringstream os;
    os << "bin_lo,bin_hi,count\n";
    for (int b = 0; b < bins; ++b) {
        os << format_double(static_cast<double>(b) / bins) << ',' << format_double(static_cast<double>(b + 1) / bins)
           << ',' << counts[static_cast<std::size_t>(b)] << '\n';
    }
    return os.str();
}

std::vector<std::string> export_heatmap(const UnitMemTable& table, HeatmapMode mode, const std::string& out_dir,
                                        const std::string& stem) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) {
        throw IoError("cannot create " + out_dir + ": " + ec.message());
    }
    std::vector<std::string> paths;
    auto emit = [&](const RowMat& m, const std::string& name, const std::string& col_prefix) {
        const std::string base = (fs::path(out_dir) / (stem + "_" + name)).string();
        write_text_file(base + ".csv", matrix_csv(m, "block", col_prefix));
        write_text_file(base + ".pgm", matrix_pgm(m));
        paths.push_back(base + ".csv");
        paths.push_back(base + ".pgm");
    };
    const std::string slot_prefix = table.variant == Variant::var ? "scale_" : "last_";
    switch (mode) {
        case HeatmapMode::block_by_scale:
            emit(heatmap_matrix(table, mode), "block_by_scale", slot_prefix);
            break;
        case HeatmapMode::block_total:
            emit(heatmap_matrix(table, mode), "block_total", "total_");
            break;
        case HeatmapMode::neuron_by_block:
            for (int s = 0; s < table.num_slots; ++s) {
                const std::string name = table.variant == Variant::var ? "neuron_by_block_scale" + std::to_string(s)
                                                                       : "neuron_by_block_last";
                emit(heatmap_matrix(table, mode, s), name, "neuron_");
            }
            break;
    }
    const std::string hist = (fs::path(out_dir) / (stem + "_histogram.csv")).string();
    write_text_file(hist, score_histogram_csv(table));
    paths.push_back(hist);
    return paths;
}

double reduction_percent(std::size_t before, std::size_t after) {
    if (before == 0) {
        return 0.0;
    }
    return 100.0 * (1.0 - static_cast<double>(after) / static_cast<double>(before));
}

namespace {

int selection_rank(const std::string& s) {
    if (s == "baseline") {
        return 0;
    }
    if (s == "unitmem") {
        return 1;
    }
    return 2;
}

}  // namespace

std::vector<QualityReport> tradeoff_report(std::span<const TradeoffInput> rows) {
    std::vector<QualityReport> out;
    out.reserve(rows.size());
    for (const auto& r : rows) {
        QualityReport q;
        q.variant = r.variant;
        q.selection = r.selection;
        q.fraction = r.fraction;
        q.factor = r.factor;
        q.neurons = r.neurons;
        q.frechet_before = r.quality_before;
        q.frechet_after = r.quality_after;
        q.num_extracted_before = r.extracted_before;
        q.num_extracted_after = r.extracted_after;
        q.reduction_percent = reduction_percent(r.extracted_before, r.extracted_after);
        out.push_back(q);
    }
    std::stable_sort(out.begin(), out.end(), [](const QualityReport& a, const QualityReport& b) {
        if (a.variant != b.variant) {
            return a.variant < b.variant;
        }
        if (a.fraction != b.fraction) {
            return a.fraction < b.fraction;
        }
        return selection_rank(a.selection) < selection_rank(b.selection);
    });
    return out;
}

std::string tradeoff_csv(std::span<const QualityReport> reports) {
    std::ostringstream os;
    os << "variant,selection,fraction,factor,neurons,extracted_before,extracted_after,reduction_percent,"
          "surrogate_fd_before,surrogate_fd_after,surrogate_fd_delta\n";
    for (const auto& r : reports) {
        os << r.variant << ',' << r.selection << ',' << format_double(r.fraction) << ',' << format_double(r.factor)
           << ',' << r.neurons << ',' << r.num_extracted_before << ',' << r.num_extracted_after << ','
           << format_double(r.reduction_percent) << ',' << format_double(r.frechet_before) << ','
           << format_double(r.frechet_after) << ',' << format_double(r.frechet_after - r.frechet_before) << '\n';
    }
    return os.str();
}

}  // namespace memloc
