#include "memloc/extraction.hpp"

#include <doctest.h>

#include <algorithm>
#include <set>

using namespace memloc;

namespace {

ModelConfig small(Variant v) {
    ModelConfig c;
    c.variant = v;
    c.num_blocks = 2;
    c.d_model = 32;
    c.num_heads = 2;
    c.d_fc1 = 32;
    c.seed = 3;
    return c;
}

Image square_image() {
    Image x(16, 16);
    for (int y = 5; y < 11; ++y) {
        for (int c = 5; c < 11; ++c) {
            for (int ch = 0; ch < 3; ++ch) {
                x.at(y, c, ch) = 1.0f;
            }
        }
    }
    return x;
}

Dataset canary_dataset() {
    return inject_canaries(generate_dataset(DataConfig{}), 2, 3, 5);
}

}  // namespace

TEST_CASE("similarity: identity, symmetry and an inverted image") {
    const Dataset ds = generate_dataset(DataConfig{});
    const Image& a = ds.images[4];
    const Image& b = ds.images[19];
    CHECK(similarity(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(similarity(a, b) == similarity(b, a));
    CHECK(similarity(a, b) <= 1.0);
    CHECK(similarity(a, b) >= -1.0);

    const Image x = square_image();
    Image inv = x;
    for (float& v : inv.pixels) {
        v = 1.0f - v;
    }
    const double s = similarity(x, inv);
    CHECK(s < 0.0);
    CHECK(s == doctest::Approx(-0.520339493332).epsilon(1e-9));

    CHECK_THROWS_AS(similarity(a, Image(8, 8)), ArgumentError);
}

TEST_CASE("candidates are sorted by loss and respect unique_content") {
    const Model m = init_model(small(Variant::rar));
    const Dataset ds = canary_dataset();
    const CandidateSet all = find_candidates(m, ds, ds.size());
    REQUIRE(all.candidates.size() == ds.size());
    CHECK(std::is_sorted(all.candidates.begin(), all.candidates.end(), [](const Candidate& a, const Candidate& b) {
        return a.loss < b.loss || (a.loss == b.loss && a.sample_id < b.sample_id);
    }));
    for (const auto& c : all.candidates) {
        CHECK(ds.images[c.index].sample_id == c.sample_id);
        CHECK(ds.images[c.index].is_canary == c.is_canary);
    }

    const CandidateSet uniq = find_candidates(m, ds, ds.size(), true);
    std::set<std::uint64_t> bases;
    for (const auto& c : uniq.candidates) {
        bases.insert(ds.images[c.index].base_id);
    }
    CHECK(bases.size() == uniq.candidates.size());
    CHECK(uniq.candidates.size() == 64);

    const CandidateSet again = find_candidates(m, ds, 10);
    const CandidateSet again2 = find_candidates(m, ds, 10);
    REQUIRE(again.candidates.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(again.candidates[i].sample_id == again2.candidates[i].sample_id);
        CHECK(again.candidates[i].loss == again2.candidates[i].loss);
    }
    CHECK_THROWS_AS(find_candidates(m, ds, 0), ArgumentError);
    CHECK_THROWS_AS(find_candidates(m, ds, ds.size() + 1), ArgumentError);
}

TEST_CASE("prefix spec validation and token counts") {
    PrefixSpec p;
    CHECK(p.rar_tokens(256) == 128);
    p.ratio = 0.3;
    CHECK(p.rar_tokens(256) == 76);
    p.ratio = 1.0;
    CHECK(p.rar_tokens(256) == 256);
    p.ratio = 1.5;
    CHECK_THROWS_AS(p.validate(small(Variant::rar)), ArgumentError);
    CHECK_NOTHROW(p.validate(small(Variant::var)));
    p = PrefixSpec{};
    p.scales = 6;
    CHECK_THROWS_AS(p.validate(small(Variant::var)), ArgumentError);
    p.scales = -1;
    CHECK_THROWS_AS(p.validate(small(Variant::var)), ArgumentError);
}

TEST_CASE("a full prefix reproduces the quantised original") {
    const Dataset ds = generate_dataset(DataConfig{});
    PrefixSpec full;
    full.ratio = 1.0;
    full.scales = 5;
    for (Variant v : {Variant::var, Variant::rar}) {
        const Model m = init_model(small(v));
        const ExtractOutcome o = extract_one(m, ds.images[12], full, SamplerConfig{});
        CHECK(o.similarity == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(o.generated.same_pixels(o.reference));
    }
}

TEST_CASE("an empty prefix on a random model stays far below the threshold") {
    const Dataset ds = generate_dataset(DataConfig{});
    PrefixSpec none;
    none.ratio = 0.0;
    none.scales = 0;
    double total = 0.0;
    for (Variant v : {Variant::var, Variant::rar}) {
        const Model m = init_model(small(v));
        for (int i : {0, 9, 30}) {
            const ExtractOutcome a = extract_one(m, ds.images[static_cast<std::size_t>(i)], none, SamplerConfig{});
            const ExtractOutcome b = extract_one(m, ds.images[static_cast<std::size_t>(i)], none, SamplerConfig{});
            CHECK(a.similarity < kExtractionThreshold - 0.15);
            CHECK(a.similarity == b.similarity);
            CHECK(a.generated.same_pixels(b.generated));
            total += a.similarity;
        }
    }
    // Recorded mean over the six runs is 0.216.
    CHECK(total / 6 < 0.3);
}

TEST_CASE("attack thresholds: out-of-range values and monotonicity") {
    const Model m = init_model(small(Variant::var));
    const Dataset ds = canary_dataset();
    const CandidateSet cs = find_candidates(m, ds, 6);
    const ExtractionReport none = run_attack(m, ds, cs, PrefixSpec{}, 1.1);
    const ExtractionReport all = run_attack(m, ds, cs, PrefixSpec{}, -1.1);
    CHECK(none.num_extracted == 0);
    CHECK(all.num_extracted == 6);
    CHECK(none.num_candidates == 6);

    const ExtractionReport base = run_attack(m, ds, cs, PrefixSpec{}, 0.0);
    std::vector<double> sims;
    for (const auto& r : base.rows) {
        sims.push_back(r.similarity);
    }
    std::size_t last = cs.candidates.size();
    for (double t : {-1.0, -0.5, 0.0, 0.25, 0.5, 0.75, 0.9, 1.0}) {
        const auto n = static_cast<std::size_t>(std::count_if(sims.begin(), sims.end(), [&](double s) { return s > t; }));
        CHECK(n <= last);
        last = n;
    }
    CHECK_THROWS_AS(run_attack(m, ds, cs, PrefixSpec{}, std::nan("")), ArgumentError);
}

TEST_CASE("report CSV and summary") {
    const Model m = init_model(small(Variant::rar));
    const Dataset ds = canary_dataset();
    const CandidateSet cs = find_candidates(m, ds, 3);
    const ExtractionReport r = run_attack(m, ds, cs, PrefixSpec{}, -1.1, "unit test");
    const std::string csv = r.to_csv();
    CHECK(csv.rfind("sample_id,is_canary,loss,similarity,extracted\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    const auto j = r.summary();
    CHECK(j["variant"] == "rar");
    CHECK(j["model"] == "unit test");
    CHECK(j["num_candidates"] == 3);
    CHECK(j["num_extracted"] == 3);
    CHECK(j["prefix"]["ratio"] == 0.5);
    CHECK(r.extracted_canaries() ==
          static_cast<std::size_t>(std::count_if(r.rows.begin(), r.rows.end(), [](const auto& x) { return x.is_canary; })));
    CHECK(run_attack(m, ds, cs, PrefixSpec{}, -1.1, "unit test").to_csv() == csv);
}
