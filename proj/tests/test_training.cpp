#include "memloc/training.hpp"

#include <doctest.h>

#include <cmath>
#include <map>

using namespace memloc;

namespace {

ModelConfig tiny(Variant v) {
    ModelConfig c;
    c.variant = v;
    c.num_blocks = 2;
    c.d_model = 16;
    c.num_heads = 2;
    c.d_fc1 = 24;
    c.vocab_size = 16;
    c.num_scales = 3;
    c.seq_len = 16;
    c.num_classes = 3;
    c.seed = 11;
    return c;
}

Dataset tiny_dataset() {
    DataConfig d;
    d.num_images = 6;
    d.num_classes = 3;
    d.height = 4;
    d.width = 4;
    return inject_canaries(generate_dataset(d), 1, 3, 2);
}

// Explicit softmax written out per row.
double brute_force_ce(const RowMat& logits, const std::vector<int>& targets) {
    double total = 0.0;
    int n = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const int t = targets[static_cast<std::size_t>(i)];
        if (t < 0) {
            continue;
        }
        double z = 0.0;
        for (Eigen::Index j = 0; j < logits.cols(); ++j) {
            z += std::exp(logits(i, j));
        }
        total += -std::log(std::exp(logits(i, t)) / z);
        ++n;
    }
    return total / n;
}

struct GradCheck {
    std::map<ParamClass, int> checked;
    double worst = 0.0;
    int total = 0;
};

GradCheck gradient_check(Variant v, int per_class, std::uint64_t seed) {
    const Model m = init_model(tiny(v));
    const Dataset ds = tiny_dataset();
    const Palette pal = Palette::for_vocab(16);
    const SequenceInput in = make_training_input(m, pal, ds.images[1]);
    std::vector<double> grad(m.layout().total, 0.0);
    loss_and_gradient(m, in, grad);

    GradCheck out;
    Rng rng(seed);
    std::map<ParamClass, std::vector<std::size_t>> pool;
    for (const auto& t : m.layout().tensors) {
        for (std::size_t k = 0; k < t.size(); ++k) {
            if (grad[t.offset + k] != 0.0) {
                pool[t.param_class].push_back(t.offset + k);
            }
        }
    }
    const double h = 1e-3;
    for (auto& [cls, idx] : pool) {
        for (int k = 0; k < per_class; ++k) {
            const std::size_t i = idx[rng.below(idx.size())];
            Model plus = m;
            Model minus = m;
            plus.mutable_params()[i] += h;
            minus.mutable_params()[i] -= h;
            const double fd = (sample_loss(plus, in) - sample_loss(minus, in)) / (2 * h);
            const double rel = std::abs(fd - grad[i]) / std::max(1e-8, std::abs(fd) + std::abs(grad[i]));
            out.worst = std::max(out.worst, rel);
            ++out.checked[cls];
            ++out.total;
        }
    }
    return out;
}

}  // namespace

TEST_CASE("cross-entropy: uniform logits, confident logits and brute force") {
    const RowMat uniform = RowMat::Zero(5, 16);
    const std::vector<int> targets{0, 3, 15, 7, -1};
    CHECK(cross_entropy(uniform, targets) == doctest::Approx(std::log(16.0)).epsilon(1e-12));
    CHECK(std::abs(std::log(16.0) - 2.7726) < 1e-4);

    RowMat confident = RowMat::Zero(2, 16);
    confident(0, 4) = 60.0;
    confident(1, 9) = 60.0;
    CHECK(cross_entropy(confident, std::vector<int>{4, 9}) < 1e-20);

    Rng rng(4);
    RowMat r(7, 16);
    for (Eigen::Index i = 0; i < r.size(); ++i) {
        r.data()[i] = rng.normal() * 2.0;
    }
    const std::vector<int> t{1, 0, 15, -1, 8, 8, 3};
    CHECK(cross_entropy(r, t) == doctest::Approx(brute_force_ce(r, t)).epsilon(1e-6));

    RowMat dl;
    CHECK(cross_entropy_with_grad(r, t, 1.0, dl) == doctest::Approx(cross_entropy(r, t)));
    CHECK(dl.row(3).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS_AS(cross_entropy(r, std::vector<int>{1, 0, 16, -1, 8, 8, 3}), ArgumentError);
}

TEST_CASE("analytic gradients match central finite differences for both variants") {
    for (Variant v : {Variant::var, Variant::rar}) {
        CAPTURE(to_string(v));
        const GradCheck g = gradient_check(v, 40, 17);
        CHECK(g.total >= 200);
        CHECK(g.checked.size() == 6);
        for (const auto& [cls, n] : g.checked) {
            CHECK(n >= 20);
        }
        CHECK(g.worst < 1e-3);
    }
}

TEST_CASE("unused class embeddings get exactly zero gradient") {
    const Model m = init_model(tiny(Variant::var));
    const Dataset ds = tiny_dataset();
    const Palette pal = Palette::for_vocab(16);
    const Image& im = ds.images[0];
    const SequenceInput in = make_training_input(m, pal, im);
    std::vector<double> grad(m.layout().total, 0.0);
    loss_and_gradient(m, in, grad);
    const auto& l = m.layout();
    for (int cls = 0; cls < 3; ++cls) {
        double norm = 0.0;
        for (int k = 0; k < 16; ++k) {
            norm += std::abs(grad[l.cls_emb + static_cast<std::size_t>(cls) * 16 + static_cast<std::size_t>(k)]);
        }
        if (cls == im.class_id) {
            CHECK(norm > 0.0);
        } else {
            CHECK(norm == 0.0);
        }
    }
}

TEST_CASE("backward rejects an empty batch and averages per-sample gradients") {
    const Model m = init_model(tiny(Variant::rar));
    CHECK_THROWS_AS(backward(m, std::span<const SequenceInput>{}), ArgumentError);
    const Dataset ds = tiny_dataset();
    const Palette pal = Palette::for_vocab(16);
    std::vector<SequenceInput> batch{make_training_input(m, pal, ds.images[0]),
                                     make_training_input(m, pal, ds.images[2])};
    const BatchGradient bg = backward(m, batch);
    CHECK(bg.loss == doctest::Approx((sample_loss(m, batch[0]) + sample_loss(m, batch[1])) / 2));
    std::vector<double> g0(m.layout().total, 0.0);
    std::vector<double> g1(m.layout().total, 0.0);
    loss_and_gradient(m, batch[0], g0);
    loss_and_gradient(m, batch[1], g1);
    double worst = 0.0;
    for (std::size_t i = 0; i < g0.size(); ++i) {
        worst = std::max(worst, std::abs(bg.grad[i] - (g0[i] + g1[i]) / 2));
    }
    CHECK(worst < 1e-12);
}

TEST_CASE("learning rate zero leaves the weights unchanged") {
    const Model m = init_model(tiny(Variant::var));
    TrainConfig tc;
    tc.epochs = 2;
    tc.learning_rate = 0.0;
    const TrainResult r = train(m, tiny_dataset(), tc);
    CHECK(r.model == m);
    CHECK(r.log.epochs.size() == 2);
}

TEST_CASE("training is deterministic and reduces the loss") {
    TrainConfig tc;
    tc.epochs = 6;
    tc.batch_size = 2;
    tc.seed = 9;
    for (Variant v : {Variant::var, Variant::rar}) {
        const Model m = init_model(tiny(v));
        const TrainResult a = train(m, tiny_dataset(), tc);
        const TrainResult b = train(m, tiny_dataset(), tc);
        CHECK(a.log.same_losses(b.log));
        CHECK(a.model == b.model);
        CHECK(a.log.epochs.back().mean_loss < a.log.epochs.front().mean_loss);
        for (const auto& e : a.log.epochs) {
            CHECK(std::isfinite(e.mean_loss));
            CHECK(e.mean_loss >= 0.0);
        }
        for (double p : a.model.params()) {
            CHECK(static_cast<double>(static_cast<float>(p)) == p);
        }
    }
}

TEST_CASE("permuted-order RAR training runs and differs from raster order") {
    TrainConfig tc;
    tc.epochs = 3;
    tc.seed = 1;
    const Model m = init_model(tiny(Variant::rar));
    const TrainResult raster = train(m, tiny_dataset(), tc);
    tc.permuted_order = true;
    const TrainResult permuted = train(m, tiny_dataset(), tc);
    CHECK_FALSE(raster.model == permuted.model);
}

TEST_CASE("divergence is reported as a numeric error") {
    TrainConfig tc;
    tc.epochs = 1;
    Model m = init_model(tiny(Variant::var));
    m.mutable_params()[m.layout().head] = std::nan("");
    CHECK_THROWS_AS(train(m, tiny_dataset(), tc), NumericError);
}

TEST_CASE("training log CSV has the documented columns") {
    TrainingLog log;
    log.epochs.push_back({1, 2.5, 1.5, 0.25});
    CHECK(log.to_csv() == "epoch,mean_loss,canary_loss,seconds\n1,2.5,1.5,0.25\n");
}

TEST_CASE("invalid training configs are rejected") {
    TrainConfig tc;
    tc.batch_size = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = TrainConfig{};
    tc.learning_rate = -1.0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
}
