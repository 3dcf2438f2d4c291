#include "memloc/toy_data.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

using namespace memloc;

namespace {

bool in_unit_range(const Image& im) {
    return std::all_of(im.pixels.begin(), im.pixels.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
}

Image constant_image(int h, int w, float r, float g, float b) {
    Image im(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            im.at(y, x, 0) = r;
            im.at(y, x, 1) = g;
            im.at(y, x, 2) = b;
        }
    }
    return im;
}

}  // namespace

TEST_CASE("default dataset is balanced, in range and uniquely numbered") {
    const Dataset ds = generate_dataset(DataConfig{});
    REQUIRE(ds.size() == 64);
    std::map<int, int> per_class;
    std::set<std::uint64_t> ids;
    for (const auto& im : ds.images) {
        ++per_class[im.class_id];
        ids.insert(im.sample_id);
        CHECK(in_unit_range(im));
        CHECK(im.height == 16);
        CHECK(im.width == 16);
        CHECK_FALSE(im.is_canary);
    }
    CHECK(per_class.size() == 8);
    for (const auto& [cls, n] : per_class) {
        CHECK(n == 8);
    }
    CHECK(ids.size() == 64);
}

TEST_CASE("class balance within one image for uneven counts") {
    DataConfig c;
    c.num_images = 29;
    c.num_classes = 8;
    const Dataset ds = generate_dataset(c);
    std::map<int, int> per_class;
    for (const auto& im : ds.images) {
        ++per_class[im.class_id];
    }
    int lo = 1 << 30;
    int hi = 0;
    for (const auto& [cls, n] : per_class) {
        lo = std::min(lo, n);
        hi = std::max(hi, n);
    }
    CHECK(hi - lo <= 1);
}

TEST_CASE("generation is deterministic and seed sensitive") {
    DataConfig a;
    const Dataset d1 = generate_dataset(a);
    const Dataset d2 = generate_dataset(a);
    for (std::size_t i = 0; i < d1.size(); ++i) {
        CHECK(d1.images[i].same_pixels(d2.images[i]));
    }
    DataConfig b = a;
    b.seed = 8;
    const Dataset d3 = generate_dataset(b);
    bool differs = false;
    for (std::size_t i = 0; i < d1.size(); ++i) {
        differs = differs || !d1.images[i].same_pixels(d3.images[i]);
    }
    CHECK(differs);
}

TEST_CASE("invalid data configs are rejected") {
    DataConfig c;
    c.num_images = 4;
    CHECK_THROWS_AS(generate_dataset(c), ConfigError);
    c = DataConfig{};
    c.height = 0;
    CHECK_THROWS_AS(generate_dataset(c), ConfigError);
    c = DataConfig{};
    c.noise = 1.5;
    CHECK_THROWS_AS(generate_dataset(c), ConfigError);
}

TEST_CASE("canary injection grows the set and copies pixels exactly") {
    const Dataset base = generate_dataset(DataConfig{});
    const Dataset ds = inject_canaries(base, 4, 8, 11);
    REQUIRE(ds.size() == 92);
    CHECK(ds.canary_repeat_factor == 8);
    std::map<std::uint64_t, std::vector<const Image*>> by_base;
    std::set<std::uint64_t> ids;
    for (const auto& im : ds.images) {
        ids.insert(im.sample_id);
        if (im.is_canary) {
            by_base[im.base_id].push_back(&im);
        }
    }
    CHECK(ids.size() == 92);
    REQUIRE(by_base.size() == 4);
    for (const auto& [bid, copies] : by_base) {
        REQUIRE(copies.size() == 8);
        std::set<int> repeats;
        for (const Image* c : copies) {
            CHECK(c->same_pixels(base.images[bid]));
            CHECK(c->class_id == base.images[bid].class_id);
            repeats.insert(c->repeat_index);
        }
        CHECK(repeats.size() == 8);
    }
}

TEST_CASE("canary injection is deterministic and validates its arguments") {
    const Dataset base = generate_dataset(DataConfig{});
    const Dataset a = inject_canaries(inject_canaries(base, 2, 2, 5), 1, 2, 6);
    const Dataset b = inject_canaries(inject_canaries(base, 2, 2, 5), 1, 2, 6);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a.images[i].same_pixels(b.images[i]));
        CHECK(a.images[i].sample_id == b.images[i].sample_id);
        CHECK(a.images[i].is_canary == b.images[i].is_canary);
    }
    CHECK_THROWS_AS(inject_canaries(base, 65, 2, 1), ArgumentError);
    CHECK_THROWS_AS(inject_canaries(base, 0, 2, 1), ArgumentError);
    CHECK_THROWS_AS(inject_canaries(base, 1, 1, 1), ArgumentError);
}

TEST_CASE("augmentation: identity, closure and determinism") {
    const Dataset ds = generate_dataset(DataConfig{});
    const Image& im = ds.images[3];
    CHECK(apply_augment(im, AugmentParams{}).same_pixels(im));

    for (std::uint64_t seed = 0; seed < 400; ++seed) {
        const AugmentParams p = draw_augment(seed);
        CHECK(p.crop_top >= 0);
        CHECK(p.crop_top <= kMaxCropJitter);
        CHECK(std::abs(p.brightness_centi) <= kMaxBrightnessCenti);
        const Image out = augment(im, seed);
        CHECK(in_unit_range(out));
        CHECK(out.height == im.height);
        CHECK(out.sample_id == im.sample_id);
        CHECK(out.same_pixels(augment(im, seed)));
        if (p.is_identity()) {
            CHECK(out.same_pixels(im));
        }
    }
}

TEST_CASE("a seed that draws the identity augmentation leaves the image unchanged") {
    const Dataset ds = generate_dataset(DataConfig{});
    std::uint64_t seed = 0;
    while (!draw_augment(seed).is_identity()) {
        ++seed;
        REQUIRE(seed < 10000000);
    }
    CHECK(augment(ds.images[5], seed).same_pixels(ds.images[5]));
}

TEST_CASE("horizontal flip mirrors columns") {
    Image im(4, 4);
    im.at(1, 0, 0) = 1.0f;
    AugmentParams p;
    p.flip = true;
    const Image out = apply_augment(im, p);
    CHECK(out.at(1, 3, 0) == doctest::Approx(1.0));
    CHECK(out.at(1, 0, 0) == doctest::Approx(0.0));
}

TEST_CASE("palette for V=16 is a 2x4x2 lattice in r-major order") {
    const Palette pal = Palette::for_vocab(16);
    CHECK(pal.levels(0) == 2);
    CHECK(pal.levels(1) == 4);
    CHECK(pal.levels(2) == 2);
    CHECK(pal.size() == 16);
    const auto c = pal.color(((1 * 4) + 2) * 2 + 0);
    CHECK(c[0] == doctest::Approx(1.0));
    CHECK(c[1] == doctest::Approx(2.0 / 3.0));
    CHECK(c[2] == doctest::Approx(0.0));
    CHECK_THROWS_AS(pal.color(16), ArgumentError);
}

TEST_CASE("quantizer: black image, idempotence and bounded error") {
    const Palette pal = Palette::for_vocab(16);
    const TokenSeq black = tokenize_flat(constant_image(16, 16, 0, 0, 0), pal);
    CHECK(black.size() == 256);
    CHECK(std::all_of(black.tokens.begin(), black.tokens.end(), [](int t) { return t == 0; }));

    // Every palette colour is a fixed point of quantisation.
    TokenSeq all;
    all.height = 1;
    all.width = 16;
    for (int t = 0; t < 16; ++t) {
        all.tokens.push_back(t);
    }
    CHECK(tokenize_flat(detokenize(all, pal), pal) == all);

    const Dataset ds = generate_dataset(DataConfig{});
    for (const auto& im : ds.images) {
        const Image q = quantized(im, pal);
        for (std::size_t i = 0; i < im.pixels.size(); ++i) {
            const int ch = static_cast<int>(i % 3);
            CHECK(std::abs(q.pixels[i] - im.pixels[i]) <= pal.step(ch) / 2 + 1e-6);
        }
    }
}

TEST_CASE("detokenize rejects out-of-vocabulary tokens; zeros give palette colour 0") {
    const Palette pal = Palette::for_vocab(16);
    TokenSeq t;
    t.height = 2;
    t.width = 2;
    t.tokens = {0, 0, 0, 0};
    const Image im = detokenize(t, pal);
    const auto c0 = pal.color(0);
    for (int y = 0; y < 2; ++y) {
        for (int x = 0; x < 2; ++x) {
            for (int ch = 0; ch < 3; ++ch) {
                CHECK(im.at(y, x, ch) == doctest::Approx(c0[static_cast<std::size_t>(ch)]));
            }
        }
    }
    t.tokens[2] = 16;
    CHECK_THROWS_AS(detokenize(t, pal), ArgumentError);
}

TEST_CASE("multiscale tokenizer shapes and consistency") {
    const Palette pal = Palette::for_vocab(16);
    const Dataset ds = generate_dataset(DataConfig{});
    const ScaleTokens st = tokenize_multiscale(ds.images[0], pal);
    REQUIRE(st.num_scales() == 5);
    const std::size_t sizes[] = {1, 4, 16, 64, 256};
    for (int s = 0; s < 5; ++s) {
        CHECK(st.per_scale[static_cast<std::size_t>(s)].size() == sizes[s]);
    }
    CHECK(st.per_scale[4] == tokenize_flat(ds.images[0], pal).tokens);

    const ScaleTokens flat = tokenize_multiscale(constant_image(16, 16, 0.9f, 0.4f, 0.1f), pal);
    const int t0 = flat.per_scale[0][0];
    for (const auto& grid : flat.per_scale) {
        CHECK(std::all_of(grid.begin(), grid.end(), [&](int t) { return t == t0; }));
    }
    CHECK_THROWS_AS(tokenize_multiscale(constant_image(12, 12, 0, 0, 0), pal), ArgumentError);
}

TEST_CASE("dataset round-trips through its file format") {
    const Dataset ds = inject_canaries(generate_dataset(DataConfig{}), 2, 3, 4);
    const auto path = (std::filesystem::temp_directory_path() / "memloc_test_ds.bin").string();
    save_dataset(ds, path);
    const Dataset back = load_dataset(path);
    REQUIRE(back.size() == ds.size());
    CHECK(back.canary_repeat_factor == 3);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        CHECK(back.images[i].same_pixels(ds.images[i]));
        CHECK(back.images[i].sample_id == ds.images[i].sample_id);
        CHECK(back.images[i].base_id == ds.images[i].base_id);
        CHECK(back.images[i].is_canary == ds.images[i].is_canary);
        CHECK(back.images[i].class_id == ds.images[i].class_id);
    }
    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_dataset(path), IoError);
}
