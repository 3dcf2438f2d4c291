#include "memloc/toy_data.hpp"

#include "memloc/config.hpp"
#include "memloc/io.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <tuple>

namespace memloc {

void DataConfig::validate() const {
    if (num_classes < 1) {
        throw ConfigError("data.num_classes must be >= 1");
    }
    if (num_images < num_classes) {
        throw ConfigError("data.num_images must be >= data.num_classes");
    }
    if (height < 1 || width < 1) {
        throw ConfigError("data.height and data.width must be positive");
    }
    if (noise < 0.0 || noise > 1.0 || noise_density < 0.0 || noise_density > 1.0) {
        throw ConfigError("data.noise and data.noise_density must lie in [0, 1]");
    }
}

std::size_t Dataset::canary_count() const {
    return static_cast<std::size_t>(
        std::count_if(images.begin(), images.end(), [](const Image& im) { return im.is_canary; }));
}

namespace {

std::array<float, 3> random_color(Rng& rng) {
    return {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform())};
}

bool inside_shape(int shape, double dx, double dy, double r) {
    const double dist = std::sqrt(dx * dx + dy * dy);
    switch (shape) {
        case 0:  // disk
            return dist <= r;
        case 1:  // ring
            return std::abs(dist - r) <= 1.0;
        case 2:  // square
            return std::abs(dx) <= r && std::abs(dy) <= r;
        case 3:  // horizontal bar
            return std::abs(dy) <= std::max(1.0, r / 3.0) && std::abs(dx) <= r + 2.0;
        case 4:  // vertical bar
            return std::abs(dx) <= std::max(1.0, r / 3.0) && std::abs(dy) <= r + 2.0;
        case 5:  // diagonal
            return std::abs(dx - dy) <= 1.0 && std::abs(dx) <= r && std::abs(dy) <= r;
        case 6:  // cross
            return (std::abs(dx) <= 1.0 || std::abs(dy) <= 1.0) && std::abs(dx) <= r && std::abs(dy) <= r;
        default:  // triangle
            return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2.0;
    }
}

Image draw_image(const DataConfig& config, int index) {
    Rng rng(hash_combine(config.seed, static_cast<std::uint64_t>(index)));
    Image image(config.height, config.width);
    image.class_id = index % config.num_classes;
    image.sample_id = static_cast<std::uint64_t>(index);
    image.base_id = image.sample_id;

    const auto background = random_color(rng);
    auto foreground = random_color(rng);
    // Resample until the shape is visibly distinct from the background.
    for (int tries = 0; tries < 64; ++tries) {
        double contrast = 0.0;
        for (int c = 0; c < 3; ++c) {
            contrast += std::abs(foreground[c] - background[c]);
        }
        if (contrast >= 0.9) {
            break;
        }
        foreground = random_color(rng);
    }

    const int shape = image.class_id % 8;
    const double span = std::min(config.height, config.width);
    const double radius = rng.uniform(0.18, 0.36) * span;
    const double cy = rng.uniform(0.3, 0.7) * config.height;
    const double cx = rng.uniform(0.3, 0.7) * config.width;

    for (int y = 0; y < config.height; ++y) {
        for (int x = 0; x < config.width; ++x) {
            const bool fg = inside_shape(shape, x + 0.5 - cx, y + 0.5 - cy, radius);
            const auto& color = fg ? foreground : background;
            for (int c = 0; c < 3; ++c) {
                image.at(y, x, c) = color[c];
            }
        }
    }
    for (int y = 0; y < config.height; ++y) {
        for (int x = 0; x < config.width; ++x) {
            if (rng.uniform() >= config.noise_density) {
                continue;
            }
            for (int c = 0; c < 3; ++c) {
                const double v = image.at(y, x, c) + config.noise * rng.uniform(-1.0, 1.0);
                image.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    return image;
}

}  // namespace

Dataset generate_dataset(const DataConfig& config) {
    config.validate();
    Dataset dataset;
    dataset.seed = config.seed;
    dataset.config = config;
    dataset.images.reserve(static_cast<std::size_t>(config.num_images));
    for (int i = 0; i < config.num_images; ++i) {
        dataset.images.push_back(draw_image(config, i));
    }
    return dataset;
}

Dataset inject_canaries(const Dataset& dataset, int canary_count, int repeat_factor, std::uint64_t seed) {
    if (canary_count < 1) {
        throw ArgumentError("inject_canaries: canary_count must be >= 1");
    }
    if (repeat_factor < 2) {
        throw ArgumentError("inject_canaries: repeat_factor must be >= 2");
    }
    if (static_cast<std::size_t>(canary_count) > dataset.size()) {
        throw ArgumentError("inject_canaries: canary_count exceeds dataset size");
    }

    // Partial Fisher-Yates picks the canaries.
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    Rng rng(hash_combine(seed, 0xca9a7ULL));
    for (std::size_t i = 0; i < static_cast<std::size_t>(canary_count); ++i) {
        const std::size_t j = i + rng.below(order.size() - i);
        std::swap(order[i], order[j]);
    }
    std::vector<std::size_t> chosen(order.begin(), order.begin() + canary_count);
    std::sort(chosen.begin(), chosen.end());

    Dataset out = dataset;
    out.canary_repeat_factor = repeat_factor;
    std::uint64_t next_id = 0;
    for (const auto& im : out.images) {
        next_id = std::max(next_id, im.sample_id + 1);
    }
    for (std::size_t idx : chosen) {
        out.images[idx].is_canary = true;
    }
    for (std::size_t idx : chosen) {
        for (int r = 1; r < repeat_factor; ++r) {
            Image copy = out.images[idx];
            copy.sample_id = next_id++;
            copy.repeat_index = r;
            out.images.push_back(std::move(copy));
        }
    }
    return out;
}

AugmentParams draw_augment(std::uint64_t aug_seed) {
    Rng rng(hash_combine(aug_seed, 0xa06ULL));
    AugmentParams p;
    p.flip = rng.below(2) == 1;
    p.crop_top = static_cast<int>(rng.below(kMaxCropJitter + 1));
    p.crop_bottom = static_cast<int>(rng.below(kMaxCropJitter + 1));
    p.crop_left = static_cast<int>(rng.below(kMaxCropJitter + 1));
    p.crop_right = static_cast<int>(rng.below(kMaxCropJitter + 1));
    p.brightness_centi = static_cast<int>(rng.below(2 * kMaxBrightnessCenti + 1)) - kMaxBrightnessCenti;
    return p;
}

Image apply_augment(const Image& image, const AugmentParams& params) {
    Image out = image;
    const int h = image.height;
    const int w = image.width;
    const int crop_h = std::max(1, h - params.crop_top - params.crop_bottom);
    const int crop_w = std::max(1, w - params.crop_left - params.crop_right);
    const float delta = static_cast<float>(params.brightness_centi) / 100.0f;
    for (int y = 0; y < h; ++y) {
        const int sy = params.crop_top + (y * crop_h) / h;
        for (int x = 0; x < w; ++x) {
            const int xx = params.flip ? (w - 1 - x) : x;
            const int sx = params.crop_left + (xx * crop_w) / w;
            for (int c = 0; c < 3; ++c) {
                out.at(y, x, c) = std::clamp(image.at(sy, sx, c) + delta, 0.0f, 1.0f);
            }
        }
    }
    return out;
}

Image augment(const Image& image, std::uint64_t aug_seed) { return apply_augment(image, draw_augment(aug_seed)); }

Palette::Palette(int levels_r, int levels_g, int levels_b) : levels_{levels_r, levels_g, levels_b} {
    for (int l : levels_) {
        if (l < 2) {
            throw ConfigError("palette levels must be >= 2 per channel");
        }
    }
}

Palette Palette::for_vocab(int vocab_size) {
    // Ranked by (spread, -green, -red); smallest wins.
    std::optional<std::array<int, 3>> best;
    auto key = [](const std::array<int, 3>& l) {
        return std::tuple(std::max({l[0], l[1], l[2]}) - std::min({l[0], l[1], l[2]}), -l[1], -l[0]);
    };
    for (int r = 2; r <= vocab_size; ++r) {
        for (int g = 2; r * g <= vocab_size; ++g) {
            if (vocab_size % (r * g) != 0 || vocab_size / (r * g) < 2) {
                continue;
            }
            const std::array<int, 3> levels{r, g, vocab_size / (r * g)};
            if (!best || key(levels) < key(*best)) {
                best = levels;
            }
        }
    }
    if (!best) {
        throw ConfigError("vocab_size " + std::to_string(vocab_size) + " is not a product of three factors >= 2");
    }
    return Palette((*best)[0], (*best)[1], (*best)[2]);
}

std::array<float, 3> Palette::color(int index) const {
    if (index < 0 || index >= size()) {
        throw ArgumentError("palette index " + std::to_string(index) + " out of range");
    }
    const int b = index % levels_[2];
    const int g = (index / levels_[2]) % levels_[1];
    const int r = index / (levels_[2] * levels_[1]);
    return {static_cast<float>(r) / static_cast<float>(levels_[0] - 1),
            static_cast<float>(g) / static_cast<float>(levels_[1] - 1),
            static_cast<float>(b) / static_cast<float>(levels_[2] - 1)};
}

int Palette::quantize(float r, float g, float b) const {
    const float rgb[3] = {r, g, b};
    int level[3];
    for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(rgb[c], 0.0f, 1.0f) * static_cast<float>(levels_[c] - 1);
        level[c] = std::clamp(static_cast<int>(std::lround(v)), 0, levels_[c] - 1);
    }
    return (level[0] * levels_[1] + level[1]) * levels_[2] + level[2];
}

TokenSeq tokenize_flat(const Image& image, const Palette& palette) {
    TokenSeq seq;
    seq.height = image.height;
    seq.width = image.width;
    seq.tokens.resize(static_cast<std::size_t>(image.height) * image.width);
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            seq.tokens[static_cast<std::size_t>(y) * image.width + x] =
                palette.quantize(image.at(y, x, 0), image.at(y, x, 1), image.at(y, x, 2));
        }
    }
    return seq;
}

ScaleTokens tokenize_multiscale(const Image& image, const Palette& palette) {
    if (image.height != image.width || image.height < 1 || (image.height & (image.height - 1)) != 0) {
        throw ArgumentError("tokenize_multiscale: image side must be a power of two");
    }
    int num_scales = 1;
    while ((1 << (num_scales - 1)) < image.height) {
        ++num_scales;
    }
    ScaleTokens out;
    out.per_scale.resize(static_cast<std::size_t>(num_scales));
    for (int s = 0; s < num_scales; ++s) {
        const int side = ScaleTokens::side(s);
        const int cell = image.height / side;
        const double inv_area = 1.0 / (static_cast<double>(cell) * cell);
        auto& grid = out.per_scale[static_cast<std::size_t>(s)];
        grid.resize(static_cast<std::size_t>(side) * side);
        for (int gy = 0; gy < side; ++gy) {
            for (int gx = 0; gx < side; ++gx) {
                double sum[3] = {0.0, 0.0, 0.0};
                for (int y = gy * cell; y < (gy + 1) * cell; ++y) {
                    for (int x = gx * cell; x < (gx + 1) * cell; ++x) {
                        for (int c = 0; c < 3; ++c) {
                            sum[c] += image.at(y, x, c);
                        }
                    }
                }
                grid[static_cast<std::size_t>(gy) * side + gx] =
                    palette.quantize(static_cast<float>(sum[0] * inv_area), static_cast<float>(sum[1] * inv_area),
                                     static_cast<float>(sum[2] * inv_area));
            }
        }
    }
    return out;
}

Image detokenize(const TokenSeq& tokens, const Palette& palette) {
    if (tokens.tokens.size() != static_cast<std::size_t>(tokens.height) * tokens.width) {
        throw ArgumentError("detokenize: token count does not match height x width");
    }
    Image image(tokens.height, tokens.width);
    for (std::size_t i = 0; i < tokens.tokens.size(); ++i) {
        const int t = tokens.tokens[i];
        if (t < 0 || t >= palette.size()) {
            throw ArgumentError("detokenize: token " + std::to_string(t) + " >= vocabulary size");
        }
        const auto color = palette.color(t);
        for (int c = 0; c < 3; ++c) {
            image.pixels[i * 3 + c] = color[c];
        }
    }
    return image;
}

Image detokenize_multiscale(const ScaleTokens& tokens, const Palette& palette) {
    if (tokens.per_scale.empty()) {
        throw ArgumentError("detokenize_multiscale: no scales");
    }
    const int side = ScaleTokens::side(tokens.num_scales() - 1);
    return detokenize(TokenSeq{side, side, tokens.per_scale.back()}, palette);
}

Image quantized(const Image& image, const Palette& palette) {
    Image q = detokenize(tokenize_flat(image, palette), palette);
    q.class_id = image.class_id;
    q.is_canary = image.is_canary;
    q.sample_id = image.sample_id;
    q.base_id = image.base_id;
    q.repeat_index = image.repeat_index;
    return q;
}

namespace {
constexpr std::string_view kDatasetMagic = "MEMLOC-DS1\n";
}

void save_dataset(const Dataset& dataset, const std::string& path) {
    nlohmann::json header;
    header["config"] = dataset.config;
    header["seed"] = dataset.seed;
    header["canary_repeat_factor"] = dataset.canary_repeat_factor;
    header["num_images"] = dataset.size();
    auto& meta = header["images"];
    meta = nlohmann::json::array();
    for (const auto& im : dataset.images) {
        meta.push_back({{"sample_id", im.sample_id},
                        {"base_id", im.base_id},
                        {"repeat_index", im.repeat_index},
                        {"class_id", im.class_id},
                        {"is_canary", im.is_canary},
                        {"height", im.height},
                        {"width", im.width}});
    }
    BinaryWriter out(path);
    out.write_magic(kDatasetMagic);
    out.write_json(header);
    for (const auto& im : dataset.images) {
        out.write_f32(im.pixels);
    }
    out.close();
}

Dataset load_dataset(const std::string& path) {
    BinaryReader in(path);
    in.expect_magic(kDatasetMagic);
    const nlohmann::json header = in.read_json();
    Dataset dataset;
    try {
        dataset.config = header.at("config").get<DataConfig>();
        dataset.seed = header.at("seed").get<std::uint64_t>();
        dataset.canary_repeat_factor = header.at("canary_repeat_factor").get<int>();
        for (const auto& m : header.at("images")) {
            Image im(m.at("height").get<int>(), m.at("width").get<int>());
            im.sample_id = m.at("sample_id").get<std::uint64_t>();
            im.base_id = m.at("base_id").get<std::uint64_t>();
            im.repeat_index = m.at("repeat_index").get<int>();
            im.class_id = m.at("class_id").get<int>();
            im.is_canary = m.at("is_canary").get<bool>();
            dataset.images.push_back(std::move(im));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": malformed dataset header: " + e.what());
    }
    for (auto& im : dataset.images) {
        in.read_f32(im.pixels);
    }
    in.expect_end();
    return dataset;
}

}  // namespace memloc
