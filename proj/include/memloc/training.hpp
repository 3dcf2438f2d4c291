#pragma once

#include "memloc/model.hpp"
#include "memloc/toy_data.hpp"

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace memloc {

struct TrainConfig {
    int epochs = 30;
    int batch_size = 8;
    double learning_rate = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double epsilon = 1e-8;
    bool augment = true;
    std::uint64_t seed = 0;
    // RAR only: train on random raster permutations, annealed to raster order
    // by the final epoch.
    bool permuted_order = false;

    void validate() const;
};

struct EpochStats {
    int epoch = 0;
    double mean_loss = 0.0;
    double canary_loss = 0.0;  // 0 when the dataset has no canaries
    double seconds = 0.0;
};

struct TrainingLog {
    std::vector<EpochStats> epochs;

    // Compares losses only; wall-clock time is excluded.
    bool same_losses(const TrainingLog& other) const;
    // Columns: epoch, mean_loss, canary_loss, seconds.
    std::string to_csv() const;
};

// Mean cross-entropy over rows with a target (target >= 0).
double cross_entropy(const RowMat& logits, std::span<const int> targets);
// Same value; also writes d(loss)/d(logits) scaled by weight.
double cross_entropy_with_grad(const RowMat& logits, std::span<const int> targets, double weight, RowMat& dlogits);

std::vector<int> targets_of(const SequenceInput& input);

// Teacher-forced input for one image under the model's variant.
SequenceInput make_training_input(const Model& model, const Palette& palette, const Image& image,
                                  std::span<const int> order = {});

// Loss of one sequence; adds weight * d(loss)/d(params) into grad.
double loss_and_gradient(const Model& model, const SequenceInput& input, std::span<double> grad, double weight = 1.0);

struct BatchGradient {
    double loss = 0.0;  // mean over the batch
    ParamVector grad;
    std::vector<double> per_sample_loss;
};

// Gradient of the batch-mean loss. Per-sample work fans out across threads
// and is reduced in batch order.
BatchGradient backward(const Model& model, std::span<const SequenceInput> batch);

double sample_loss(const Model& model, const SequenceInput& input);

struct TrainResult {
    Model model;
    TrainingLog log;
};

using EpochCallback = std::function<void(const EpochStats&, const Model&)>;

TrainResult train(const Model& initial, const Dataset& dataset, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

}  // namespace memloc
