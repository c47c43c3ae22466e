#pragma once
// Experiment configuration (strict, versioned schema) and the commands the
// command-line runner dispatches to. Every command writes its artifacts under
// <out>/<config_hash>/.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pimqat/data.hpp"
#include "pimqat/diag.hpp"
#include "pimqat/nn.hpp"
#include "pimqat/report.hpp"
#include "pimqat/train.hpp"

namespace pimqat::exp {

inline constexpr int schema_version = 1;

struct DatasetSpec {
    std::string kind = "synthetic_blobs";  ///< cifar10_binary, synthetic_blobs, synthetic_moons, synthetic_patterns
    std::string path = "data/cifar-10-batches-bin";
    std::size_t train_size = 2000;  ///< subset (cifar10, 0 = all) or generated count
    std::size_t test_size = 500;
    int classes = 4;
    std::size_t features = 16;
    double separation = 3.0;
    double noise = 0.1;
    std::size_t channels = 3;
    std::size_t image_size = 16;
};

struct ModelSpec {
    std::string arch = "mlp";  ///< mlp or cnn4
    std::size_t width = 16;
    std::vector<std::size_t> hidden{64, 64};
    int b_w = 4, b_a = 4;
};

struct InterfaceSpec {
    std::optional<Resolution> b_imc;  ///< inference resolution; unset = trained
    double noise_sigma = 0.0;         ///< LSB
    std::optional<std::uint64_t> noise_seed;
    std::string curves;  ///< curve-bank file, empty = none
    bool variation = false;
    nonideal::VariationSpec variation_spec{2.04, 0.024, 0};
    std::size_t variation_count = 32;
};

struct SweepSpec {
    std::vector<Resolution> b_imc;
    std::vector<double> sigma;
    std::vector<pim::Scheme> scheme;
    std::vector<int> b_train;
    bool empty() const { return b_imc.empty() && sigma.empty() && scheme.empty() && b_train.empty(); }
};

struct Config {
    std::uint64_t seed = 0;
    DatasetSpec dataset;
    ModelSpec model;
    nn::PimSpec pim;
    train::TrainConfig train;
    bool augment_set = false;  ///< train.augment given explicitly
    InterfaceSpec iface;
    train::CalibSpec calib;
    std::size_t eval_batch_size = 256;
    SweepSpec sweep;
    json diag;  ///< normalized study config, null when absent

    /// Normalized form: every field present, defaults filled in.
    json to_json() const;
    std::string hash() const { return config_hash(to_json()); }
};

/// Strict parse; unknown keys, wrong types and unsupported schema versions are errors.
Config config_from_json(const json& j);
Config load_config(const std::filesystem::path& path);
Config parse_config_text(const std::string& yaml_text, const std::string& source = "<memory>");

/// YAML document to JSON; plain scalars become numbers, booleans or null when they parse as such.
json yaml_to_json(const std::string& yaml_text, const std::string& source = "<memory>");

/// Version string recorded in reports.
std::string version_string();

struct Datasets {
    data::Dataset train, test;
};
Datasets load_datasets(const Config& cfg);

/// Model for the configured architecture; b_train overrides pim.b_imc.
nn::Model build_model(const Config& cfg, const data::Dataset& sample, std::optional<Resolution> b_train = {});

/// Deployment interface: b_infer, curves and noise.
nn::EvalInterface build_interface(const Config& cfg);
/// Same resolution as build_interface, no curves or noise.
nn::EvalInterface ideal_interface(const Config& cfg);
/// True when evaluation differs from the training-time forward pass.
bool interface_differs(const Config& cfg);

train::TrainConfig train_config(const Config& cfg);

/// Report header shared by all commands.
json report_header(const Config& cfg, const std::string& command);

/// train -> (calibrate) -> eval in memory. Returns the report body and leaves the trained model in `model`.
json run_pipeline(const Config& cfg, nn::Model* model_out = nullptr);

/// Command entry points. Each returns the report it wrote.
json cmd_train(const Config& cfg, const std::filesystem::path& out);
json cmd_eval(const Config& cfg, const std::filesystem::path& out, const std::filesystem::path& checkpoint = {});
json cmd_calibrate(const Config& cfg, const std::filesystem::path& out, const std::filesystem::path& checkpoint = {});
json cmd_sweep(const Config& cfg, const std::filesystem::path& out);
json cmd_diag(const Config& cfg, const std::filesystem::path& out);

std::filesystem::path run_dir(const Config& cfg, const std::filesystem::path& out);

/// Child configs of a sweep in grid order, with their axis labels.
struct SweepChild {
    Config config;
    std::vector<std::string> point;
};
std::vector<SweepChild> expand_sweep(const Config& cfg, std::vector<std::string>& axis_names,
                                     std::vector<std::vector<std::string>>& axis_values);

/// Diag study configs from their normalized JSON (strict).
diag::ScaleRatioConfig scale_ratio_from_json(const json& j);
diag::BnDriftConfig bn_drift_from_json(const json& j);
diag::GradRatioConfig grad_ratio_from_json(const json& j);
diag::NoiseErrorConfig noise_error_from_json(const json& j);

}  // namespace pimqat::exp
