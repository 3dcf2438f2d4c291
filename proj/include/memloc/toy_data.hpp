#pragma once

#include "memloc/common.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace memloc {

// H x W x 3 raster, channel-last, row-major, intensities in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;
    int class_id = 0;
    bool is_canary = false;
    std::uint64_t sample_id = 0;
    // Canary copies share base_id with the image they were duplicated from;
    // repeat_index counts copies (0 for the original).
    std::uint64_t base_id = 0;
    int repeat_index = 0;

    Image() = default;
    Image(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0.0f) {}

    float& at(int row, int col, int ch) { return pixels[(static_cast<std::size_t>(row) * width + col) * 3 + ch]; }
    float at(int row, int col, int ch) const { return pixels[(static_cast<std::size_t>(row) * width + col) * 3 + ch]; }

    bool same_pixels(const Image& other) const {
        return height == other.height && width == other.width && pixels == other.pixels;
    }
};

struct DataConfig {
    std::uint64_t seed = 7;
    int num_images = 64;
    int num_classes = 8;
    int height = 16;
    int width = 16;
    // Amplitude of the per-pixel speckle that gives each image unique detail.
    double noise = 0.35;
    // Fraction of pixels that receive speckle.
    double noise_density = 0.3;

    void validate() const;
};

struct Dataset {
    std::vector<Image> images;
    std::uint64_t seed = 0;
    int canary_repeat_factor = 1;
    DataConfig config;

    std::size_t size() const { return images.size(); }
    std::size_t canary_count() const;
};

Dataset generate_dataset(const DataConfig& config);

// Duplicates canary_count images (chosen deterministically from seed) so each
// appears repeat_factor times in total. Copies are appended in order.
Dataset inject_canaries(const Dataset& dataset, int canary_count, int repeat_factor, std::uint64_t seed);

struct AugmentParams {
    bool flip = false;
    // Pixels cropped from each edge before nearest-neighbour resize back.
    int crop_top = 0;
    int crop_bottom = 0;
    int crop_left = 0;
    int crop_right = 0;
    // In hundredths, range [-10, 10].
    int brightness_centi = 0;

    bool is_identity() const {
        return !flip && crop_top == 0 && crop_bottom == 0 && crop_left == 0 && crop_right == 0 &&
               brightness_centi == 0;
    }
};

inline constexpr int kMaxCropJitter = 2;
inline constexpr int kMaxBrightnessCenti = 10;

AugmentParams draw_augment(std::uint64_t aug_seed);
Image apply_augment(const Image& image, const AugmentParams& params);
Image augment(const Image& image, std::uint64_t aug_seed);

// Fixed RGB lattice palette. Index order is r-major: ((r * levels_g) + g) * levels_b + b,
// with level i of a channel at intensity i / (levels - 1).
class Palette {
  public:
    Palette(int levels_r, int levels_g, int levels_b);
    // Most balanced factorisation of vocab_size into three factors >= 2,
    // giving green the largest share.
    static Palette for_vocab(int vocab_size);

    int size() const { return levels_[0] * levels_[1] * levels_[2]; }
    int levels(int channel) const { return levels_[channel]; }
    double step(int channel) const { return 1.0 / (levels_[channel] - 1); }
    std::array<float, 3> color(int index) const;
    int quantize(float r, float g, float b) const;

  private:
    std::array<int, 3> levels_;
};

struct TokenSeq {
    int height = 0;
    int width = 0;
    std::vector<int> tokens;

    std::size_t size() const { return tokens.size(); }
    bool operator==(const TokenSeq&) const = default;
};

// Scale s holds a (2^s x 2^s) grid, row-major.
struct ScaleTokens {
    std::vector<std::vector<int>> per_scale;

    int num_scales() const { return static_cast<int>(per_scale.size()); }
    static int side(int scale) { return 1 << scale; }
    bool operator==(const ScaleTokens&) const = default;
};

TokenSeq tokenize_flat(const Image& image, const Palette& palette);
ScaleTokens tokenize_multiscale(const Image& image, const Palette& palette);
Image detokenize(const TokenSeq& tokens, const Palette& palette);
Image detokenize_multiscale(const ScaleTokens& tokens, const Palette& palette);
// Palette-quantised copy of an image (tokenize then detokenize), keeping metadata.
Image quantized(const Image& image, const Palette& palette);

// Dataset file: "MEMLOC-DS1\n", u64 JSON length, JSON header, then float32
// little-endian pixels in sample-major, row-major, channel-last order.
void save_dataset(const Dataset& dataset, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace memloc
