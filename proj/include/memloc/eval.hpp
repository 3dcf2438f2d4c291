#pragma once

#include "memloc/intervention.hpp"
#include "memloc/model.hpp"
#include "memloc/toy_data.hpp"
#include "memloc/unitmem.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace memloc {

// Fixed random two-layer convolutional stack (3x3 kernels, stride 2,
// padding 1, GELU after each layer), flattened. Never trained.
// Pixels are mapped to [-1, 1] before the first layer.
class FeatureExtractor {
  public:
    static constexpr std::uint64_t kDefaultSeed = 0x5eed5ccdULL;

    // feature_dim must equal channels2 * (height / 4) * (width / 4).
    FeatureExtractor(std::uint64_t seed = kDefaultSeed, int height = 16, int width = 16, int feature_dim = 64,
                     int channels1 = 16);

    int dim() const { return feature_dim_; }
    int height() const { return height_; }
    int width() const { return width_; }
    std::uint64_t seed() const { return seed_; }
    Vec features(const Image& image) const;

  private:
    std::uint64_t seed_;
    int height_;
    int width_;
    int feature_dim_;
    int channels1_;
    int channels2_;
    std::vector<double> w1_;  // [c1][3][3][3]
    std::vector<double> b1_;
    std::vector<double> w2_;  // [c2][c1][3][3]
    std::vector<double> b2_;
};

const FeatureExtractor& default_extractor();

// One row per image.
RowMat extract_features(std::span<const Image> images, const FeatureExtractor& extractor);

// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)) with S + eps I.
// Each side needs at least dim + 1 rows.
double frechet_distance(const RowMat& feats_a, const RowMat& feats_b, double eps = 1e-6);

// Class-conditional samples (class i mod C), generated from an empty prefix.
std::vector<Image> generate_samples(const Model& model, int n_samples, const SamplerConfig& sampler);

// Surrogate-FD between generated samples and the reference set.
double quality_of(const Model& model, std::span<const Image> reference, int n_samples, const SamplerConfig& sampler,
                  const FeatureExtractor& extractor);

enum class HeatmapMode { block_by_scale, block_total, neuron_by_block };

HeatmapMode parse_heatmap_mode(const std::string& s);
std::string to_string(HeatmapMode m);

// block_by_scale: blocks x slots of per-cell neuron sums.
// block_total: blocks x 1.
// neuron_by_block: blocks x d_fc1 for one slot.
RowMat heatmap_matrix(const UnitMemTable& table, HeatmapMode mode, int slot = 0);

// Sum of all scores in block, slot, neuron order; the order heatmap cells use.
double table_total(const UnitMemTable& table);

std::string matrix_csv(const RowMat& m, const std::string& row_label, const std::string& col_prefix);
// Binary P5, maxval 255, value round(255 * v / row_max); row_max <= 0 maps to 0.
std::string matrix_pgm(const RowMat& m);
// Columns bin_lo, bin_hi, count over [0, 1]; the last bin is closed.
std::string score_histogram_csv(const UnitMemTable& table, int bins = 20);

// Writes CSV + PGM per matrix (one per slot for neuron_by_block) and the
// score histogram into out_dir; returns the paths in write order.
std::vector<std::string> export_heatmap(const UnitMemTable& table, HeatmapMode mode, const std::string& out_dir,
                                        const std::string& stem);

struct TradeoffInput {
    std::string variant;
    std::string selection;  // "baseline", "unitmem" or "random"
    double fraction = 0.0;
    double factor = 1.0;
    std::size_t neurons = 0;
    std::size_t extracted_before = 0;
    std::size_t extracted_after = 0;
    double quality_before = 0.0;
    double quality_after = 0.0;
};

struct QualityReport {
    std::string variant;
    std::string selection;
    double fraction = 0.0;
    double factor = 1.0;
    std::size_t neurons = 0;
    double frechet_before = 0.0;
    double frechet_after = 0.0;
    std::size_t num_extracted_before = 0;
    std::size_t num_extracted_after = 0;
    double reduction_percent = 0.0;
};

double reduction_percent(std::size_t before, std::size_t after);

// Sorted by fraction, then baseline < unitmem < random.
std::vector<QualityReport> tradeoff_report(std::span<const TradeoffInput> rows);
std::string tradeoff_csv(std::span<const QualityReport> reports);

}  // namespace memloc
