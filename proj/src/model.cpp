#include "memloc/model.hpp"

#include "memloc/detail/transformer.hpp"
#include "memloc/io.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace memloc {

std::string to_string(Variant v) { return v == Variant::var ? "var" : "rar"; }

Variant parse_variant(const std::string& s) {
    if (s == "var" || s == "VAR") {
        return Variant::var;
    }
    if (s == "rar" || s == "RAR") {
        return Variant::rar;
    }
    throw ConfigError("unknown variant '" + s + "' (expected var or rar)");
}

std::string to_string(ParamClass c) {
    switch (c) {
        case ParamClass::embedding:
            return "embedding";
        case ParamClass::attention:
            return "attention";
        case ParamClass::fc1:
            return "fc1";
        case ParamClass::fc2:
            return "fc2";
        case ParamClass::norm:
            return "norm";
        case ParamClass::head:
            return "head";
    }
    return "?";
}

void ModelConfig::validate() const {
    if (num_blocks < 1 || d_model < 1 || num_heads < 1 || d_fc1 < 1 || num_classes < 1) {
        throw ConfigError("model dimensions must be positive");
    }
    if (d_model % num_heads != 0) {
        throw ConfigError("model.d_model must be divisible by model.num_heads");
    }
    if (vocab_size < 2) {
        throw ConfigError("model.vocab_size must be >= 2");
    }
    if (variant == Variant::var && (num_scales < 1 || num_scales > 12)) {
        throw ConfigError("model.num_scales must lie in [1, 12]");
    }
    if (variant == Variant::rar && seq_len < 1) {
        throw ConfigError("model.seq_len must be >= 1");
    }
}

int ModelConfig::num_positions() const {
    if (variant == Variant::rar) {
        return seq_len;
    }
    return scale_offsets().back();
}

std::vector<int> ModelConfig::scale_offsets() const {
    std::vector<int> offsets{0};
    for (int s = 0; s < num_scales; ++s) {
        offsets.push_back(offsets.back() + (1 << (2 * s)));
    }
    return offsets;
}

ParamLayout::ParamLayout(const ModelConfig& config) {
    config.validate();
    const int d = config.d_model;
    const int f = config.d_fc1;
    std::size_t cursor = 0;
    auto add = [&](std::string name, ParamClass cls, int rows, int cols) {
        tensors.push_back(TensorInfo{std::move(name), cls, cursor, rows, cols});
        const std::size_t at = cursor;
        cursor += static_cast<std::size_t>(rows) * cols;
        return at;
    };
    tok_emb = add("tok_emb", ParamClass::embedding, config.vocab_size, d);
    cls_emb = add("cls_emb", ParamClass::embedding, config.num_classes, d);
    pos_emb = add("pos_emb", ParamClass::embedding, config.num_positions(), d);
    for (int b = 0; b < config.num_blocks; ++b) {
        const std::string p = "blocks." + std::to_string(b) + ".";
        Block blk{};
        blk.ln1_g = add(p + "ln1.gain", ParamClass::norm, 1, d);
        blk.ln1_b = add(p + "ln1.bias", ParamClass::norm, 1, d);
        blk.wq = add(p + "attn.wq", ParamClass::attention, d, d);
        blk.wk = add(p + "attn.wk", ParamClass::attention, d, d);
        blk.wv = add(p + "attn.wv", ParamClass::attention, d, d);
        blk.wo = add(p + "attn.wo", ParamClass::attention, d, d);
        blk.ln2_g = add(p + "ln2.gain", ParamClass::norm, 1, d);
        blk.ln2_b = add(p + "ln2.bias", ParamClass::norm, 1, d);
        blk.fc1_w = add(p + "fc1.weight", ParamClass::fc1, f, d);
        blk.fc1_b = add(p + "fc1.bias", ParamClass::fc1, 1, f);
        blk.fc2_w = add(p + "fc2.weight", ParamClass::fc2, d, f);
        blk.fc2_b = add(p + "fc2.bias", ParamClass::fc2, 1, d);
        blocks.push_back(blk);
    }
    head = add("head", ParamClass::head, config.vocab_size, d);
    total = cursor;
}

std::size_t parameter_count(const ModelConfig& c) {
    const std::size_t d = static_cast<std::size_t>(c.d_model);
    const std::size_t f = static_cast<std::size_t>(c.d_fc1);
    std::size_t positions = 0;
    if (c.variant == Variant::rar) {
        positions = static_cast<std::size_t>(c.seq_len);
    } else {
        // 1 + 4 + ... + 4^(S-1)
        positions = ((std::size_t{1} << (2 * c.num_scales)) - 1) / 3;
    }
    const std::size_t embeddings = (static_cast<std::size_t>(c.vocab_size) + c.num_classes + positions) * d;
    const std::size_t per_block = 4 * d * d + 2 * f * d + f + d + 4 * d;
    const std::size_t head = static_cast<std::size_t>(c.vocab_size) * d;
    return embeddings + static_cast<std::size_t>(c.num_blocks) * per_block + head;
}

Model::Model(ModelConfig config) : config_(config), layout_(config_), params_(layout_.total, 0.0) {}

Model::Model(ModelConfig config, std::vector<double> params)
    : config_(config), layout_(config_), params_(params.begin(), params.end()) {
    if (params_.size() != layout_.total) {
        throw ConsistencyError("parameter vector has " + std::to_string(params_.size()) + " entries, config needs " +
                               std::to_string(layout_.total));
    }
}

bool Model::all_finite() const {
    return std::all_of(params_.begin(), params_.end(), [](double p) { return std::isfinite(p); });
}

void Model::round_to_f32() {
    for (double& p : params_) {
        p = static_cast<double>(static_cast<float>(p));
    }
}

Model init_model(const ModelConfig& config) {
    Model model(config);
    auto& p = model.mutable_params();
    Rng rng(hash_combine(config.seed, 0x1417ULL));
    for (const auto& t : model.layout().tensors) {
        const bool is_gain = t.name.ends_with("ln1.gain") || t.name.ends_with("ln2.gain");
        const bool is_norm_bias = t.name.ends_with("ln1.bias") || t.name.ends_with("ln2.bias");
        if (is_gain || is_norm_bias) {
            std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(), is_gain ? 1.0 : 0.0);
            continue;
        }
        // Weight matrices: fan_in = cols. Biases take the fan_in of their
        // layer; embeddings use d_model.
        int fan_in = t.cols;
        if (t.name.ends_with("fc1.bias")) {
            fan_in = config.d_model;
        } else if (t.name.ends_with("fc2.bias")) {
            fan_in = config.d_fc1;
        }
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::size_t i = 0; i < t.size(); ++i) {
            p[t.offset + i] = rng.uniform(-bound, bound);
        }
    }
    model.round_to_f32();
    return model;
}

double gelu(double x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

double gelu_derivative(double x) {
    constexpr double c = 0.7978845608028654;
    const double t = std::tanh(c * (x + 0.044715 * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

SequenceInput build_var_input(const ModelConfig& config, const ScaleTokens& x, int class_id,
                              std::optional<int> num_scales_run) {
    if (config.variant != Variant::var) {
        throw ArgumentError("build_var_input: model is not VAR");
    }
    const int run = num_scales_run.value_or(config.num_scales);
    if (run < 1 || run > config.num_scales) {
        throw ArgumentError("build_var_input: scale count out of range");
    }
    // Targets for scale s are needed only when s < x.num_scales(); inputs need s-1.
    if (x.num_scales() < run - 1 || x.num_scales() > config.num_scales) {
        throw ArgumentError("build_var_input: expected " + std::to_string(config.num_scales) + " scales, got " +
                            std::to_string(x.num_scales()));
    }
    for (int s = 0; s < x.num_scales(); ++s) {
        const auto& grid = x.per_scale[static_cast<std::size_t>(s)];
        if (grid.size() != static_cast<std::size_t>(1) << (2 * s)) {
            throw ArgumentError("build_var_input: scale " + std::to_string(s) + " has " +
                                std::to_string(grid.size()) + " tokens");
        }
        for (int t : grid) {
            if (t < 0 || t >= config.vocab_size) {
                throw ArgumentError("build_var_input: token out of vocabulary");
            }
        }
    }
    if (class_id < 0 || class_id >= config.num_classes) {
        throw ArgumentError("build_var_input: class id out of range");
    }
    SequenceInput input;
    const auto offsets = config.scale_offsets();
    input.rows.reserve(static_cast<std::size_t>(offsets[static_cast<std::size_t>(run)]));
    for (int s = 0; s < run; ++s) {
        const int side = ScaleTokens::side(s);
        for (int y = 0; y < side; ++y) {
            for (int xx = 0; xx < side; ++xx) {
                InputRow row;
                row.position = offsets[static_cast<std::size_t>(s)] + y * side + xx;
                row.group = s;
                if (s == 0) {
                    row.class_id = class_id;
                } else {
                    const int prev_side = side / 2;
                    row.token = x.per_scale[static_cast<std::size_t>(s - 1)]
                                           [static_cast<std::size_t>((y / 2) * prev_side + xx / 2)];
                }
                if (s < x.num_scales()) {
                    row.target = x.per_scale[static_cast<std::size_t>(s)][static_cast<std::size_t>(y * side + xx)];
                }
                input.rows.push_back(row);
            }
        }
    }
    return input;
}

SequenceInput build_rar_input(const ModelConfig& config, const TokenSeq& x, int class_id, std::span<const int> order) {
    if (config.variant != Variant::rar) {
        throw ArgumentError("build_rar_input: model is not RAR");
    }
    const int n = config.seq_len;
    if (x.size() != static_cast<std::size_t>(n)) {
        throw ArgumentError("build_rar_input: expected " + std::to_string(n) + " tokens, got " +
                            std::to_string(x.size()));
    }
    if (!order.empty() && order.size() != static_cast<std::size_t>(n)) {
        throw ArgumentError("build_rar_input: order length mismatch");
    }
    if (class_id < 0 || class_id >= config.num_classes) {
        throw ArgumentError("build_rar_input: class id out of range");
    }
    for (int t : x.tokens) {
        if (t < 0 || t >= config.vocab_size) {
            throw ArgumentError("build_rar_input: token out of vocabulary");
        }
    }
    auto at = [&](int i) { return order.empty() ? i : order[static_cast<std::size_t>(i)]; };
    SequenceInput input;
    input.rows.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        InputRow& row = input.rows[static_cast<std::size_t>(i)];
        row.group = i;
        row.position = at(i);
        row.target = x.tokens[static_cast<std::size_t>(at(i))];
        if (i == 0) {
            row.class_id = class_id;
        } else {
            row.token = x.tokens[static_cast<std::size_t>(at(i - 1))];
        }
    }
    return input;
}

namespace detail {

std::vector<int> attention_limits(const SequenceInput& input) {
    const int t = static_cast<int>(input.rows.size());
    std::vector<int> limits(static_cast<std::size_t>(t));
    int end = t;
    for (int i = t - 1; i >= 0; --i) {
        if (i + 1 < t && input.rows[static_cast<std::size_t>(i + 1)].group < input.rows[static_cast<std::size_t>(i)].group) {
            throw ArgumentError("attention groups must be non-decreasing");
        }
        if (i + 1 < t && input.rows[static_cast<std::size_t>(i + 1)].group != input.rows[static_cast<std::size_t>(i)].group) {
            end = i + 1;
        }
        limits[static_cast<std::size_t>(i)] = end;
    }
    return limits;
}

RowMat embed(const Model& model, const SequenceInput& input) {
    const auto& c = model.config();
    const auto& l = model.layout();
    const int d = c.d_model;
    const int positions = c.num_positions();
    RowMat x(static_cast<Eigen::Index>(input.rows.size()), d);
    for (std::size_t i = 0; i < input.rows.size(); ++i) {
        const InputRow& r = input.rows[i];
        if (r.position < 0 || r.position >= positions) {
            throw ArgumentError("embed: position out of range");
        }
        if (r.token >= 0) {
            if (r.token >= c.vocab_size) {
                throw ArgumentError("embed: token out of vocabulary");
            }
            x.row(static_cast<Eigen::Index>(i)) = model.vec(l.tok_emb + static_cast<std::size_t>(r.token) * d, d);
        } else {
            if (r.class_id < 0 || r.class_id >= c.num_classes) {
                throw ArgumentError("embed: class id out of range");
            }
            x.row(static_cast<Eigen::Index>(i)) = model.vec(l.cls_emb + static_cast<std::size_t>(r.class_id) * d, d);
        }
        x.row(static_cast<Eigen::Index>(i)) += model.vec(l.pos_emb + static_cast<std::size_t>(r.position) * d, d);
    }
    return x;
}

RowMat layer_norm(const RowMat& x, ConstVecMap gain, ConstVecMap bias, RowMat& xhat, Vec& inv_std) {
    const Eigen::Index n = x.rows();
    const double d = static_cast<double>(x.cols());
    xhat.resize(n, x.cols());
    inv_std.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mean = x.row(i).sum() / d;
        const double var = (x.row(i).array() - mean).square().sum() / d;
        inv_std(i) = 1.0 / std::sqrt(var + kLayerNormEps);
        xhat.row(i) = (x.row(i).array() - mean) * inv_std(i);
    }
    RowMat out = xhat;
    out.array().rowwise() *= gain.array();
    out.rowwise() += bias;
    return out;
}

RowMat forward_cached(const Model& model, const SequenceInput& input, ForwardCache& cache) {
    const auto& c = model.config();
    const auto& l = model.layout();
    const int d = c.d_model;
    const int f = c.d_fc1;
    const int heads = c.num_heads;
    const int dh = c.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const Eigen::Index t = static_cast<Eigen::Index>(input.rows.size());

    cache.limits = attention_limits(input);
    cache.blocks.resize(static_cast<std::size_t>(c.num_blocks));
    RowMat x = embed(model, input);

    for (int b = 0; b < c.num_blocks; ++b) {
        const auto& w = l.blocks[static_cast<std::size_t>(b)];
        BlockCache& bc = cache.blocks[static_cast<std::size_t>(b)];
        bc.x_in = x;
        bc.h1 = layer_norm(x, model.vec(w.ln1_g, d), model.vec(w.ln1_b, d), bc.xhat1, bc.inv_std1);
        bc.q.noalias() = bc.h1 * model.mat(w.wq, d, d).transpose();
        bc.k.noalias() = bc.h1 * model.mat(w.wk, d, d).transpose();
        bc.v.noalias() = bc.h1 * model.mat(w.wv, d, d).transpose();
        bc.attn.resize(t, d);
        bc.probs.resize(static_cast<std::size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            RowMat& p = bc.probs[static_cast<std::size_t>(h)];
            p.noalias() = (bc.q.middleCols(h * dh, dh) * bc.k.middleCols(h * dh, dh).transpose()) * scale;
            for (Eigen::Index i = 0; i < t; ++i) {
                const Eigen::Index lim = cache.limits[static_cast<std::size_t>(i)];
                auto row = p.row(i);
                const double mx = row.head(lim).maxCoeff();
                row.head(lim) = (row.head(lim).array() - mx).exp();
                row.head(lim) /= row.head(lim).sum();
                row.tail(t - lim).setZero();
            }
            bc.attn.middleCols(h * dh, dh).noalias() = p * bc.v.middleCols(h * dh, dh);
        }
        bc.x_mid = x;
        bc.x_mid.noalias() += bc.attn * model.mat(w.wo, d, d).transpose();
        bc.h2 = layer_norm(bc.x_mid, model.vec(w.ln2_g, d), model.vec(w.ln2_b, d), bc.xhat2, bc.inv_std2);
        bc.z.noalias() = bc.h2 * model.mat(w.fc1_w, f, d).transpose();
        bc.z.rowwise() += model.vec(w.fc1_b, f);
        bc.g = bc.z.unaryExpr([](double v) { return gelu(v); });
        x = bc.x_mid;
        x.noalias() += bc.g * model.mat(w.fc2_w, d, f).transpose();
        x.rowwise() += model.vec(w.fc2_b, d);
    }
    cache.x_final = x;
    RowMat logits = x * model.mat(l.head, c.vocab_size, d).transpose();
    return logits;
}

}  // namespace detail

ForwardResult forward_sequence(const Model& model, const SequenceInput& input, TraceMode trace_mode) {
    detail::ForwardCache cache;
    ForwardResult result;
    result.logits = detail::forward_cached(model, input, cache);
    const auto& c = model.config();
    ActivationTrace& trace = result.trace;
    trace.num_blocks = c.num_blocks;
    trace.d_fc1 = c.d_fc1;
    if (trace_mode == TraceMode::none || input.rows.empty()) {
        return result;
    }
    const int t = static_cast<int>(input.rows.size());
    if (trace_mode == TraceMode::last_step) {
        trace.rows = {t - 1};
    } else {
        trace.rows.resize(static_cast<std::size_t>(t));
        for (int i = 0; i < t; ++i) {
            trace.rows[static_cast<std::size_t>(i)] = i;
        }
    }
    for (int r : trace.rows) {
        trace.groups.push_back(input.rows[static_cast<std::size_t>(r)].group);
    }
    for (const auto& bc : cache.blocks) {
        if (trace_mode == TraceMode::last_step) {
            trace.fc1.push_back(bc.g.bottomRows(1));
        } else {
            trace.fc1.push_back(bc.g);
        }
    }
    return result;
}

ForwardResult forward_var_teacher_forced(const Model& model, const ScaleTokens& x, int class_id) {
    if (x.num_scales() != model.config().num_scales) {
        throw ArgumentError("forward_var_teacher_forced: expected " + std::to_string(model.config().num_scales) +
                            " scales, got " + std::to_string(x.num_scales()));
    }
    return forward_sequence(model, build_var_input(model.config(), x, class_id), TraceMode::all_steps);
}

ForwardResult forward_rar_teacher_forced(const Model& model, const TokenSeq& x, int class_id, TraceMode trace_mode) {
    return forward_sequence(model, build_rar_input(model.config(), x, class_id), trace_mode);
}

namespace {
constexpr std::string_view kTraceMagic = "MEMLOC-TR1\n";
}

void save_trace(const ActivationTrace& trace, const std::string& path) {
    nlohmann::json header = {{"num_blocks", trace.num_blocks}, {"d_fc1", trace.d_fc1},
                             {"rows", trace.rows},             {"groups", trace.groups},
                             {"sample_id", trace.sample_id},   {"aug_seed", trace.aug_seed}};
    BinaryWriter out(path);
    out.write_magic(kTraceMagic);
    out.write_json(header);
    for (const auto& m : trace.fc1) {
        out.write_f32(std::span<const double>(m.data(), static_cast<std::size_t>(m.size())));
    }
    out.close();
}

ActivationTrace load_trace(const std::string& path) {
    BinaryReader in(path);
    in.expect_magic(kTraceMagic);
    const auto header = in.read_json();
    ActivationTrace trace;
    try {
        trace.num_blocks = header.at("num_blocks").get<int>();
        trace.d_fc1 = header.at("d_fc1").get<int>();
        trace.rows = header.at("rows").get<std::vector<int>>();
        trace.groups = header.at("groups").get<std::vector<int>>();
        trace.sample_id = header.at("sample_id").get<std::uint64_t>();
        trace.aug_seed = header.at("aug_seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": malformed trace header: " + e.what());
    }
    for (int b = 0; b < trace.num_blocks; ++b) {
        RowMat m(static_cast<Eigen::Index>(trace.rows.size()), trace.d_fc1);
        in.read_f32(std::span<double>(m.data(), static_cast<std::size_t>(m.size())));
        trace.fc1.push_back(std::move(m));
    }
    in.expect_end();
    return trace;
}

int sample_token(std::span<const double> logits, double temperature, Rng& rng) {
    if (logits.empty()) {
        throw ArgumentError("sample_token: empty logits");
    }
    if (temperature <= 0.0) {
        return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> w(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        w[i] = std::exp((logits[i] - mx) / temperature);
        total += w[i];
    }
    double u = rng.uniform() * total;
    for (std::size_t i = 0; i < w.size(); ++i) {
        u -= w[i];
        if (u < 0.0) {
            return static_cast<int>(i);
        }
    }
    return static_cast<int>(w.size() - 1);
}

IncrementalDecoder::IncrementalDecoder(const Model& model) : model_(model) {
    const auto& c = model.config();
    keys_.assign(static_cast<std::size_t>(c.num_blocks), RowMat(c.num_positions(), c.d_model));
    values_.assign(static_cast<std::size_t>(c.num_blocks), RowMat(c.num_positions(), c.d_model));
}

RowVec IncrementalDecoder::step(const InputRow& row) {
    const auto& c = model_.config();
    const auto& l = model_.layout();
    if (length_ >= c.num_positions()) {
        throw ArgumentError("IncrementalDecoder: sequence is full");
    }
    const int d = c.d_model;
    const int f = c.d_fc1;
    const int dh = c.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    SequenceInput one;
    one.rows.push_back(row);
    RowMat x = detail::embed(model_, one);
    RowMat xhat;
    Vec inv;
    const int n = length_ + 1;
    for (int b = 0; b < c.num_blocks; ++b) {
        const auto& w = l.blocks[static_cast<std::size_t>(b)];
        RowMat& keys = keys_[static_cast<std::size_t>(b)];
        RowMat& values = values_[static_cast<std::size_t>(b)];
        const RowMat h1 = detail::layer_norm(x, model_.vec(w.ln1_g, d), model_.vec(w.ln1_b, d), xhat, inv);
        const RowMat q = h1 * model_.mat(w.wq, d, d).transpose();
        keys.row(length_) = h1 * model_.mat(w.wk, d, d).transpose();
        values.row(length_) = h1 * model_.mat(w.wv, d, d).transpose();
        RowMat attn(1, d);
        for (int h = 0; h < c.num_heads; ++h) {
            RowVec s = (q.middleCols(h * dh, dh) * keys.topRows(n).middleCols(h * dh, dh).transpose()) * scale;
            const double mx = s.maxCoeff();
            s = (s.array() - mx).exp();
            s /= s.sum();
            attn.middleCols(h * dh, dh) = s * values.topRows(n).middleCols(h * dh, dh);
        }
        x += attn * model_.mat(w.wo, d, d).transpose();
        const RowMat h2 = detail::layer_norm(x, model_.vec(w.ln2_g, d), model_.vec(w.ln2_b, d), xhat, inv);
        RowMat z = h2 * model_.mat(w.fc1_w, f, d).transpose();
        z += model_.vec(w.fc1_b, f);
        const RowMat g = z.unaryExpr([](double v) { return gelu(v); });
        x += g * model_.mat(w.fc2_w, d, f).transpose();
        x += model_.vec(w.fc2_b, d);
    }
    ++length_;
    return x * model_.mat(l.head, c.vocab_size, d).transpose();
}

TokenSeq generate_rar(const Model& model, std::span<const int> prefix, int class_id, const SamplerConfig& sampler) {
    const auto& c = model.config();
    if (c.variant != Variant::rar) {
        throw ArgumentError("generate_rar: model is not RAR");
    }
    const int n = c.seq_len;
    if (prefix.size() > static_cast<std::size_t>(n)) {
        throw ArgumentError("generate_rar: prefix longer than sequence");
    }
    if (class_id < 0 || class_id >= c.num_classes) {
        throw ArgumentError("generate_rar: class id out of range");
    }
    for (int t : prefix) {
        if (t < 0 || t >= c.vocab_size) {
            throw ArgumentError("generate_rar: prefix token out of vocabulary");
        }
    }
    int side = 1;
    while (side * side < n) {
        ++side;
    }
    TokenSeq out;
    out.height = side * side == n ? side : 1;
    out.width = side * side == n ? side : n;
    out.tokens.assign(prefix.begin(), prefix.end());
    out.tokens.reserve(static_cast<std::size_t>(n));
    const int k = static_cast<int>(prefix.size());
    if (k == n) {
        return out;
    }
    Rng rng(hash_combine(sampler.seed, 0x5a3b1eULL));
    IncrementalDecoder decoder(model);
    for (int i = 0; i < n; ++i) {
        InputRow row;
        row.group = i;
        row.position = i;
        if (i == 0) {
            row.class_id = class_id;
        } else {
            row.token = out.tokens[static_cast<std::size_t>(i - 1)];
        }
        // Rows before k - 1 only fill the cache; their predictions are known.
        if (i < k) {
            decoder.step(row);
            continue;
        }
        const RowVec logits = decoder.step(row);
        out.tokens.push_back(
            sample_token(std::span<const double>(logits.data(), static_cast<std::size_t>(logits.size())),
                         sampler.temperature, rng));
    }
    return out;
}

ScaleTokens generate_var(const Model& model, const ScaleTokens& prefix, int class_id, const SamplerConfig& sampler) {
    const auto& c = model.config();
    if (c.variant != Variant::var) {
        throw ArgumentError("generate_var: model is not VAR");
    }
    if (prefix.num_scales() > c.num_scales) {
        throw ArgumentError("generate_var: prefix longer than sequence");
    }
    ScaleTokens out = prefix;
    Rng rng(hash_combine(sampler.seed, 0x7a5ULL));
    const auto offsets = c.scale_offsets();
    for (int s = prefix.num_scales(); s < c.num_scales; ++s) {
        const SequenceInput input = build_var_input(c, out, class_id, s + 1);
        const ForwardResult fr = forward_sequence(model, input, TraceMode::none);
        const int begin = offsets[static_cast<std::size_t>(s)];
        const int count = 1 << (2 * s);
        std::vector<int> grid(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) {
            const auto row = fr.logits.row(begin + i);
            grid[static_cast<std::size_t>(i)] =
                sample_token(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())),
                             sampler.temperature, rng);
        }
        out.per_scale.push_back(std::move(grid));
    }
    return out;
}

}  // namespace memloc
