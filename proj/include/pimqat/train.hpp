#pragma once
// Training loop (Nesterov SGD, multi-step schedule), evaluation, BN
// calibration under the deployment interface, and the training-resolution
// search.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pimqat/data.hpp"
#include "pimqat/nn.hpp"

namespace pimqat::train {

struct TrainConfig {
    int epochs = 30;
    std::size_t batch_size = 128;
    double lr0 = 0.1;
    std::vector<int> lr_milestones;
    double lr_decay = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::uint64_t seed = 0;
    bool augment = true;      ///< crop/flip for image data
    bool eval_each_epoch = true;

    void validate() const;
};

/// lr0 * lr_decay^k, k = number of milestones <= epoch.
double lr_at(const TrainConfig& cfg, int epoch);

/// Nesterov SGD in the usual deep-learning form:
///   g += wd * w;  v = mu * v + g;  w -= lr * (g + mu * v)
struct Sgd {
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::vector<std::vector<double>> velocity;

    void step(std::vector<nn::ParamRef>& params, double lr);
};

struct EpochMetrics {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    std::optional<double> test_acc;
};

struct TrainReport {
    std::vector<EpochMetrics> epochs;
    bool diverged = false;
    int diverged_epoch = -1;
    std::string error;
    std::optional<double> final_test_acc;
};

/// Trains in place with the PIM configuration stored in the model (ideal
/// conversions, no curves or noise). A non-finite loss or layer output ends
/// the run; the report records the epoch.
TrainReport train(nn::Model& model, const TrainConfig& cfg, const data::Dataset& train_set,
                  const data::Dataset* test_set);

struct EvalOptions {
    std::size_t batch_size = 256;
    const nn::EvalInterface* iface = nullptr;
    std::uint64_t tick_base = 0;  ///< noise stream offset; batch i uses tick_base + i
};

/// Top-1 accuracy with running BN statistics.
double evaluate(nn::Model& model, const data::Dataset& d, const EvalOptions& opt = {});

std::vector<int> predict(nn::Model& model, const data::Dataset& d, const EvalOptions& opt = {});

struct CalibSpec {
    std::size_t num_batches = 20;
    std::size_t batch_size = 128;
    std::uint64_t seed = 0;
    std::uint64_t tick_base = 1u << 30;  ///< keeps calibration noise apart from evaluation noise
};

/// Replaces every running mean / variance with the plain average of the batch
/// statistics over `num_batches` forward passes under `iface`. Weights, gamma
/// and beta are untouched.
void bn_calibrate(nn::Model& model, const data::Dataset& d, const CalibSpec& spec, const nn::EvalInterface* iface);

struct SearchRow {
    int b_train = 0;
    double accuracy = 0.0;
    bool failed = false;
    std::string error;
};

struct SearchResult {
    int best_b_train = 0;
    std::vector<SearchRow> rows;
};

/// Builds a model for a training resolution.
using ModelFactory = std::function<nn::Model(Resolution b_train)>;

/// One run per candidate b_train: train, calibrate and evaluate under `iface`
/// (which carries b_infer and the noise). Ties go to the larger b_train.
SearchResult adjusted_precision_search(const ModelFactory& factory, const TrainConfig& cfg,
                                       const data::Dataset& train_set, const data::Dataset& test_set,
                                       const nn::EvalInterface& iface, const std::vector<int>& candidates,
                                       const CalibSpec& calib);

}  // namespace pimqat::train
