#include "memloc/training.hpp"

#include "memloc/detail/transformer.hpp"
#include "memloc/io.hpp"
#include "memloc/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace memloc {

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("train.learning_rate must be finite and >= 0");
    }
    if (batch_size < 1) {
        throw ConfigError("train.batch_size must be >= 1");
    }
    if (epochs < 0) {
        throw ConfigError("train.epochs must be >= 0");
    }
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0 || epsilon <= 0.0) {
        throw ConfigError("train: beta1, beta2 must lie in [0, 1) and epsilon must be positive");
    }
}

bool TrainingLog::same_losses(const TrainingLog& other) const {
    if (epochs.size() != other.epochs.size()) {
        return false;
    }
    for (std::size_t i = 0; i < epochs.size(); ++i) {
        if (epochs[i].epoch != other.epochs[i].epoch || epochs[i].mean_loss != other.epochs[i].mean_loss ||
            epochs[i].canary_loss != other.epochs[i].canary_loss) {
            return false;
        }
    }
    return true;
}

std::string TrainingLog::to_csv() const {
    std::ostringstream os;
    os << "epoch,mean_loss,canary_loss,seconds\n";
    for (const auto& e : epochs) {
        os << e.epoch << ',' << format_double(e.mean_loss) << ',' << format_double(e.canary_loss) << ','
           << format_double(e.seconds) << '\n';
    }
    return os.str();
}

namespace {

double cross_entropy_impl(const RowMat& logits, std::span<const int> targets, double weight, RowMat* dlogits) {
    if (targets.size() != static_cast<std::size_t>(logits.rows())) {
        throw ArgumentError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                            std::to_string(logits.rows()) + " rows");
    }
    const Eigen::Index v = logits.cols();
    std::size_t counted = 0;
    for (int t : targets) {
        if (t >= v) {
            throw ArgumentError("cross_entropy: target token " + std::to_string(t) + " >= vocabulary size");
        }
        if (t >= 0) {
            ++counted;
        }
    }
    if (counted == 0) {
        throw ArgumentError("cross_entropy: no targets");
    }
    if (dlogits != nullptr) {
        dlogits->setZero(logits.rows(), v);
    }
    const double inv = 1.0 / static_cast<double>(counted);
    double total = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const int t = targets[static_cast<std::size_t>(i)];
        if (t < 0) {
            continue;
        }
        const double mx = logits.row(i).maxCoeff();
        const RowVec e = (logits.row(i).array() - mx).exp();
        const double z = e.sum();
        total += std::log(z) + mx - logits(i, t);
        if (dlogits != nullptr) {
            dlogits->row(i) = e * (weight * inv / z);
            (*dlogits)(i, t) -= weight * inv;
        }
    }
    return total * inv;
}

// Backward through a row-wise layer norm given d(out)/d(xhat) already
// multiplied by the gain.
RowMat layer_norm_backward(const RowMat& dxhat, const RowMat& xhat, const Vec& inv_std) {
    const double d = static_cast<double>(xhat.cols());
    RowMat dx(xhat.rows(), xhat.cols());
    for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
        const double mean_dxhat = dxhat.row(i).sum() / d;
        const double mean_dxhat_xhat = dxhat.row(i).dot(xhat.row(i)) / d;
        dx.row(i) = inv_std(i) * (dxhat.row(i).array() - mean_dxhat - xhat.row(i).array() * mean_dxhat_xhat).matrix();
    }
    return dx;
}

}  // namespace

double cross_entropy(const RowMat& logits, std::span<const int> targets) {
    return cross_entropy_impl(logits, targets, 1.0, nullptr);
}

double cross_entropy_with_grad(const RowMat& logits, std::span<const int> targets, double weight, RowMat& dlogits) {
    return cross_entropy_impl(logits, targets, weight, &dlogits);
}

std::vector<int> targets_of(const SequenceInput& input) {
    std::vector<int> targets;
    targets.reserve(input.rows.size());
    for (const auto& r : input.rows) {
        targets.push_back(r.target);
    }
    return targets;
}

SequenceInput make_training_input(const Model& model, const Palette& palette, const Image& image,
                                  std::span<const int> order) {
    const auto& c = model.config();
    if (c.variant == Variant::var) {
        return build_var_input(c, tokenize_multiscale(image, palette), image.class_id);
    }
    return build_rar_input(c, tokenize_flat(image, palette), image.class_id, order);
}

double loss_and_gradient(const Model& model, const SequenceInput& input, std::span<double> grad, double weight) {
    const auto& c = model.config();
    const auto& l = model.layout();
    if (grad.size() != l.total) {
        throw ArgumentError("loss_and_gradient: gradient buffer has wrong size");
    }
    const int d = c.d_model;
    const int f = c.d_fc1;
    const int dh = c.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const Eigen::Index t = static_cast<Eigen::Index>(input.rows.size());

    detail::ForwardCache cache;
    const RowMat logits = detail::forward_cached(model, input, cache);
    const std::vector<int> targets = targets_of(input);
    RowMat dlogits;
    const double loss = cross_entropy_with_grad(logits, targets, weight, dlogits);
    if (!std::isfinite(loss)) {
        throw NumericError("non-finite loss " + std::to_string(loss) + " (max |logit| = " +
                           std::to_string(logits.cwiseAbs().maxCoeff()) + ")");
    }

    auto gmat = [&](std::size_t off, int rows, int cols) { return MatMap(grad.data() + off, rows, cols); };
    auto gvec = [&](std::size_t off, int n) { return VecMap(grad.data() + off, n); };

    gmat(l.head, c.vocab_size, d).noalias() += dlogits.transpose() * cache.x_final;
    RowMat dx = dlogits * model.mat(l.head, c.vocab_size, d);

    for (int b = c.num_blocks - 1; b >= 0; --b) {
        const auto& w = l.blocks[static_cast<std::size_t>(b)];
        const detail::BlockCache& bc = cache.blocks[static_cast<std::size_t>(b)];

        // fc2 and the second residual.
        gmat(w.fc2_w, d, f).noalias() += dx.transpose() * bc.g;
        gvec(w.fc2_b, d) += dx.colwise().sum();
        RowMat dz = dx * model.mat(w.fc2_w, d, f);
        dz.array() *= bc.z.unaryExpr([](double v) { return gelu_derivative(v); }).array();

        // fc1.
        gmat(w.fc1_w, f, d).noalias() += dz.transpose() * bc.h2;
        gvec(w.fc1_b, f) += dz.colwise().sum();
        RowMat dh2 = dz * model.mat(w.fc1_w, f, d);

        // ln2.
        gvec(w.ln2_g, d) += (dh2.array() * bc.xhat2.array()).matrix().colwise().sum();
        gvec(w.ln2_b, d) += dh2.colwise().sum();
        dh2.array().rowwise() *= model.vec(w.ln2_g, d).array();
        RowMat dx_mid = dx + layer_norm_backward(dh2, bc.xhat2, bc.inv_std2);

        // Attention output projection.
        gmat(w.wo, d, d).noalias() += dx_mid.transpose() * bc.attn;
        const RowMat dattn = dx_mid * model.mat(w.wo, d, d);

        RowMat dq(t, d);
        RowMat dk(t, d);
        RowMat dv(t, d);
        for (int h = 0; h < c.num_heads; ++h) {
            const RowMat& p = bc.probs[static_cast<std::size_t>(h)];
            const auto d_out = dattn.middleCols(h * dh, dh);
            dv.middleCols(h * dh, dh).noalias() = p.transpose() * d_out;
            RowMat dp = d_out * bc.v.middleCols(h * dh, dh).transpose();
            // Softmax backward; masked entries have p = 0 and drop out.
            const Vec row_dot = (dp.array() * p.array()).rowwise().sum();
            RowMat ds = (p.array() * (dp.colwise() - row_dot).array()).matrix();
            dq.middleCols(h * dh, dh).noalias() = (ds * bc.k.middleCols(h * dh, dh)) * scale;
            dk.middleCols(h * dh, dh).noalias() = (ds.transpose() * bc.q.middleCols(h * dh, dh)) * scale;
        }
        gmat(w.wq, d, d).noalias() += dq.transpose() * bc.h1;
        gmat(w.wk, d, d).noalias() += dk.transpose() * bc.h1;
        gmat(w.wv, d, d).noalias() += dv.transpose() * bc.h1;
        RowMat dh1 = dq * model.mat(w.wq, d, d);
        dh1.noalias() += dk * model.mat(w.wk, d, d);
        dh1.noalias() += dv * model.mat(w.wv, d, d);

        // ln1 and the first residual.
        gvec(w.ln1_g, d) += (dh1.array() * bc.xhat1.array()).matrix().colwise().sum();
        gvec(w.ln1_b, d) += dh1.colwise().sum();
        dh1.array().rowwise() *= model.vec(w.ln1_g, d).array();
        dx = dx_mid + layer_norm_backward(dh1, bc.xhat1, bc.inv_std1);
    }

    for (Eigen::Index i = 0; i < t; ++i) {
        const InputRow& r = input.rows[static_cast<std::size_t>(i)];
        if (r.token >= 0) {
            gvec(l.tok_emb + static_cast<std::size_t>(r.token) * d, d) += dx.row(i);
        } else {
            gvec(l.cls_emb + static_cast<std::size_t>(r.class_id) * d, d) += dx.row(i);
        }
        gvec(l.pos_emb + static_cast<std::size_t>(r.position) * d, d) += dx.row(i);
    }
    return loss;
}

BatchGradient backward(const Model& model, std::span<const SequenceInput> batch) {
    if (batch.empty()) {
        throw ArgumentError("backward: empty batch");
    }
    const std::size_t n = batch.size();
    const std::size_t p = model.layout().total;
    std::vector<ParamVector> grads(n);
    std::vector<double> losses(n, 0.0);
    parallel_for(n, [&](std::size_t i) {
        grads[i].assign(p, 0.0);
        losses[i] = loss_and_gradient(model, batch[i], grads[i], 1.0 / static_cast<double>(n));
    });
    BatchGradient out;
    out.grad.assign(p, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < p; ++j) {
            out.grad[j] += grads[i][j];
        }
        out.loss += losses[i];
    }
    out.loss /= static_cast<double>(n);
    out.per_sample_loss = std::move(losses);
    return out;
}

double sample_loss(const Model& model, const SequenceInput& input) {
    const ForwardResult fr = forward_sequence(model, input, TraceMode::none);
    return cross_entropy(fr.logits, targets_of(input));
}

TrainResult train(const Model& initial, const Dataset& dataset, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
    config.validate();
    if (dataset.images.empty()) {
        throw ArgumentError("train: empty dataset");
    }
    const auto& mc = initial.config();
    const Palette palette = Palette::for_vocab(mc.vocab_size);
    Model model = initial;
    ParamVector& params = model.mutable_params();
    const std::size_t p = params.size();
    std::vector<double> m1(p, 0.0);
    std::vector<double> m2(p, 0.0);
    std::size_t step = 0;

    TrainingLog log;
    const std::size_t n = dataset.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng shuffle_rng(hash_combine(config.seed, 0x5e0000ULL + static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = n; i > 1; --i) {
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        }
        const double permute_prob =
            (config.permuted_order && mc.variant == Variant::rar && config.epochs > 1)
                ? 1.0 - static_cast<double>(epoch) / static_cast<double>(config.epochs - 1)
                : 0.0;

        double loss_sum = 0.0;
        double canary_sum = 0.0;
        std::size_t canary_n = 0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(n, start + static_cast<std::size_t>(config.batch_size));
            std::vector<SequenceInput> batch;
            batch.reserve(end - start);
            for (std::size_t j = start; j < end; ++j) {
                const Image& src = dataset.images[order[j]];
                const std::uint64_t sample_seed =
                    hash_combine(hash_combine(config.seed, static_cast<std::uint64_t>(epoch)), src.sample_id);
                const Image image = config.augment ? augment(src, sample_seed) : src;
                std::vector<int> perm;
                if (permute_prob > 0.0) {
                    Rng prng(hash_combine(sample_seed, 0x9e7ULL));
                    if (prng.uniform() < permute_prob) {
                        perm.resize(static_cast<std::size_t>(mc.seq_len));
                        std::iota(perm.begin(), perm.end(), 0);
                        for (std::size_t i = perm.size(); i > 1; --i) {
                            std::swap(perm[i - 1], perm[prng.below(i)]);
                        }
                    }
                }
                batch.push_back(make_training_input(model, palette, image, perm));
            }
            const BatchGradient bg = backward(model, batch);
            if (!std::isfinite(bg.loss)) {
                throw NumericError("training diverged at epoch " + std::to_string(epoch));
            }
            for (std::size_t j = start; j < end; ++j) {
                const double l = bg.per_sample_loss[j - start];
                loss_sum += l;
                if (dataset.images[order[j]].is_canary) {
                    canary_sum += l;
                    ++canary_n;
                }
            }

            ++step;
            const double bias1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
            const double bias2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
            for (std::size_t k = 0; k < p; ++k) {
                const double g = bg.grad[k];
                m1[k] = config.beta1 * m1[k] + (1.0 - config.beta1) * g;
                m2[k] = config.beta2 * m2[k] + (1.0 - config.beta2) * g * g;
                params[k] -= config.learning_rate * (m1[k] / bias1) / (std::sqrt(m2[k] / bias2) + config.epsilon);
            }
        }
        if (!model.all_finite()) {
            throw NumericError("training produced non-finite parameters at epoch " + std::to_string(epoch));
        }
        EpochStats stats;
        stats.epoch = epoch + 1;
        stats.mean_loss = loss_sum / static_cast<double>(n);
        stats.canary_loss = canary_n > 0 ? canary_sum / static_cast<double>(canary_n) : 0.0;
        stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.epochs.push_back(stats);
        if (on_epoch) {
            on_epoch(stats, model);
        }
    }
    model.round_to_f32();
    return TrainResult{std::move(model), std::move(log)};
}

}  // namespace memloc
