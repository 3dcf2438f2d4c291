#pragma once

#include "memloc/common.hpp"
#include "memloc/toy_data.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace memloc {

enum class Variant { var, rar };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

struct ModelConfig {
    Variant variant = Variant::var;
    int num_blocks = 4;
    int d_model = 64;
    int num_heads = 4;
    int d_fc1 = 128;
    int vocab_size = 16;
    // VAR: number of scales S (grids 1x1 .. 2^(S-1) x 2^(S-1)).
    int num_scales = 5;
    // RAR: sequence length N.
    int seq_len = 256;
    int num_classes = 8;
    std::uint64_t seed = 0;

    void validate() const;
    // Rows of the teacher-forced input: sum over scales of 4^s (VAR) or N (RAR).
    int num_positions() const;
    int head_dim() const { return d_model / num_heads; }
    // First row of each scale plus a final sentinel; VAR only.
    std::vector<int> scale_offsets() const;
    bool operator==(const ModelConfig&) const = default;
};

enum class ParamClass { embedding, attention, fc1, fc2, norm, head };

std::string to_string(ParamClass c);

struct TensorInfo {
    std::string name;
    ParamClass param_class;
    std::size_t offset;
    int rows;
    int cols;

    std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

// Offsets of every tensor inside the flat parameter vector. Order is the
// checkpoint order: token, class and positional embeddings, then each block
// (ln1 gain/bias, Wq, Wk, Wv, Wo, ln2 gain/bias, fc1 W/b, fc2 W/b), then the
// output head. Matrices are row-major (out x in).
struct ParamLayout {
    struct Block {
        std::size_t ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
    };

    std::size_t tok_emb = 0;
    std::size_t cls_emb = 0;
    std::size_t pos_emb = 0;
    std::vector<Block> blocks;
    std::size_t head = 0;
    std::size_t total = 0;
    std::vector<TensorInfo> tensors;

    explicit ParamLayout(const ModelConfig& config);
};

using ConstMatMap = Eigen::Map<const RowMat>;
using MatMap = Eigen::Map<RowMat>;
using ConstVecMap = Eigen::Map<const RowVec>;
using VecMap = Eigen::Map<RowVec>;

// Flat parameter storage. Aligned so vectorised kernels see the same memory
// layout on every run, which keeps results bit-reproducible.
using ParamVector = std::vector<double, Eigen::aligned_allocator<double>>;

class Model {
  public:
    explicit Model(ModelConfig config);
    Model(ModelConfig config, std::vector<double> params);

    const ModelConfig& config() const { return config_; }
    const ParamLayout& layout() const { return layout_; }
    std::span<const double> params() const { return params_; }
    // For training and intervention, which operate on their own copies.
    ParamVector& mutable_params() { return params_; }

    ConstMatMap mat(std::size_t offset, int rows, int cols) const {
        return ConstMatMap(params_.data() + offset, rows, cols);
    }
    ConstVecMap vec(std::size_t offset, int n) const { return ConstVecMap(params_.data() + offset, n); }

    bool all_finite() const;
    // Round every parameter to float32 so the in-memory model equals its checkpoint.
    void round_to_f32();

    bool operator==(const Model& other) const { return config_ == other.config_ && params_ == other.params_; }

  private:
    ModelConfig config_;
    ParamLayout layout_;
    ParamVector params_;
};

// Closed-form parameter count; used as an oracle against ParamLayout.
std::size_t parameter_count(const ModelConfig& config);

Model init_model(const ModelConfig& config);

double gelu(double x);
double gelu_derivative(double x);

// One row of the teacher-forced input: sum of a token or class embedding
// and a positional embedding. The row attends to rows whose group is <= its own.
struct InputRow {
    int token = -1;  // -1 means the class embedding is used instead
    int class_id = -1;
    int position = 0;
    int group = 0;
    int target = -1;
};

struct SequenceInput {
    std::vector<InputRow> rows;
};

// VAR: scale 0 is a single class-conditioned row; each row at scale s >= 1
// embeds the ground-truth token of scale s-1 at (y/2, x/2). Only the first
// num_scales_run scales are built (all when nullopt).
SequenceInput build_var_input(const ModelConfig& config, const ScaleTokens& x, int class_id,
                              std::optional<int> num_scales_run = std::nullopt);
// RAR: row i predicts token order[i]; row 0 holds the class embedding and
// row i > 0 the token at order[i-1]. Positional embedding indexed by the
// predicted raster position. Empty order means raster order.
SequenceInput build_rar_input(const ModelConfig& config, const TokenSeq& x, int class_id,
                              std::span<const int> order = {});

// fc1 post-GELU activations. Raw values, possibly negative.
struct ActivationTrace {
    int num_blocks = 0;
    int d_fc1 = 0;
    // Input rows captured, in order; identical for every block.
    std::vector<int> rows;
    // Group (scale for VAR, position for RAR) of each captured row.
    std::vector<int> groups;
    // One (rows.size() x d_fc1) matrix per block.
    std::vector<RowMat> fc1;
    std::uint64_t sample_id = 0;
    std::uint64_t aug_seed = 0;
};

enum class TraceMode { none, last_step, all_steps };

struct ForwardResult {
    RowMat logits;  // one row per input row, vocab_size columns
    ActivationTrace trace;
};

// Generic pre-norm transformer pass over an embedded sequence.
ForwardResult forward_sequence(const Model& model, const SequenceInput& input, TraceMode trace_mode);

// Scale shapes must match the config. Trace covers every block, scale and position.
ForwardResult forward_var_teacher_forced(const Model& model, const ScaleTokens& x, int class_id);
// Trace holds only the final prediction step unless trace_mode = all_steps.
ForwardResult forward_rar_teacher_forced(const Model& model, const TokenSeq& x, int class_id,
                                         TraceMode trace_mode = TraceMode::last_step);

// Writes the trace as "MEMLOC-TR1\n", JSON dims header, float32 payload
// (block-major, then row, then neuron).
void save_trace(const ActivationTrace& trace, const std::string& path);
ActivationTrace load_trace(const std::string& path);

struct SamplerConfig {
    // 0 selects greedy argmax (ties to the lowest token index).
    double temperature = 0.0;
    std::uint64_t seed = 0;
};

int sample_token(std::span<const double> logits, double temperature, Rng& rng);

// Keeps prefix.size() tokens and completes the remaining N - k positions.
TokenSeq generate_rar(const Model& model, std::span<const int> prefix, int class_id, const SamplerConfig& sampler);
// prefix holds the first k complete scales (k may be 0); the rest are generated scale by scale.
ScaleTokens generate_var(const Model& model, const ScaleTokens& prefix, int class_id, const SamplerConfig& sampler);

// Cached incremental decoding for causal (RAR) models. Produces the same
// logits as forward_sequence row by row.
class IncrementalDecoder {
  public:
    explicit IncrementalDecoder(const Model& model);
    // Appends one input row and returns its logits.
    RowVec step(const InputRow& row);
    int length() const { return length_; }

  private:
    const Model& model_;
    std::vector<RowMat> keys_;
    std::vector<RowMat> values_;
    int length_ = 0;
};

}  // namespace memloc
