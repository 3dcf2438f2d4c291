#pragma once

// Forward-pass internals shared by the model (inference) and training
// (backpropagation) translation units.

#include "memloc/model.hpp"

#include <vector>

namespace memloc::detail {

inline constexpr double kLayerNormEps = 1e-5;

struct BlockCache {
    RowMat x_in;
    RowMat xhat1;
    Vec inv_std1;
    RowMat h1;
    RowMat q, k, v;
    std::vector<RowMat> probs;  // per head, T x T (zero outside the mask)
    RowMat attn;                // concatenated head outputs, T x d_model
    RowMat x_mid;
    RowMat xhat2;
    Vec inv_std2;
    RowMat h2;
    RowMat z;  // fc1 pre-activation
    RowMat g;  // fc1 post-GELU
};

struct ForwardCache {
    // Row i attends to rows [0, limits[i]).
    std::vector<int> limits;
    std::vector<BlockCache> blocks;
    RowMat x_final;
};

std::vector<int> attention_limits(const SequenceInput& input);
RowMat embed(const Model& model, const SequenceInput& input);

// Full forward with every intermediate kept; returns logits.
RowMat forward_cached(const Model& model, const SequenceInput& input, ForwardCache& cache);

// Row-wise layer norm; fills xhat and inv_std.
RowMat layer_norm(const RowMat& x, ConstVecMap gain, ConstVecMap bias, RowMat& xhat, Vec& inv_std);

}  // namespace memloc::detail
