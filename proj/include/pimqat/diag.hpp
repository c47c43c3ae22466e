#pragma once
// Standalone analysis studies: output-scale ratio, BN statistic drift,
// layer-to-layer gradient variance, and converter error versus noise.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "pimqat/nn.hpp"
#include "pimqat/nonideal.hpp"
#include "pimqat/pim.hpp"
#include "pimqat/report.hpp"

namespace pimqat::diag {

/// Grid of named axes; one row of `columns` values per grid point, axes
/// varying slowest-first. meta carries the study config, its hash and seed.
struct SweepTable {
    std::string study;
    std::vector<std::string> axis_names;
    std::vector<std::vector<std::string>> axis_values;
    std::vector<std::string> columns;
    std::vector<std::vector<double>> cells;
    json meta;

    std::size_t grid_size() const;
    /// Axis labels of row r.
    std::vector<std::string> point(std::size_t r) const;
    void check() const;

    std::string to_csv() const;
    json to_json() const;
    static SweepTable from_json(const json& j);
    const std::string& config_hash() const;
};

/// Attaches config, seed and config hash to a table.
void set_meta(SweepTable& t, const json& config, std::uint64_t seed);

// ---------------------------------------------------------------- output scale

struct ScaleRatioConfig {
    pim::Scheme scheme = pim::Scheme::bit_serial;
    std::vector<int> b_imc{3, 4, 5, 6, 7, 8, 9, 10, 0};  ///< 0 = infinite
    std::size_t in_channels = 16;
    std::size_t out_channels = 32;
    std::size_t ksize = 3;
    std::size_t image = 8;     ///< spatial side of the inputs
    std::size_t batch = 100;
    int b_w = 4, b_a = 4;
    int dac_bits = 1;
    std::size_t repeats = 5;   ///< independent draws of inputs and weights
    std::uint64_t seed = 0;

    json to_json() const;
};

/// rho = std(PIM conv output) / std(conventionally quantized conv output).
/// Columns: rho (mean over repeats), rho_sd, rho_min, rho_max.
SweepTable scale_ratio_study(const ScaleRatioConfig& cfg);

// ---------------------------------------------------------------- BN drift

struct BnDriftConfig {
    pim::Scheme scheme = pim::Scheme::bit_serial;
    int b_imc = 7;
    std::vector<double> sigmas{0.0, 0.05, 0.1, 0.2, 0.35};
    bool use_curves = true;
    /// Used when use_curves and no bank is supplied.
    nonideal::VariationSpec variation{2.04, 0.024, 0};
    std::size_t curve_count = 32;
    std::size_t in_channels = 16, out_channels = 32, ksize = 3, image = 8, batch = 100;
    std::size_t unit_out_channels = 8;
    int b_w = 4, b_a = 4;
    std::uint64_t seed = 0;

    json to_json() const;
};

/// Per-channel relative change of the pre-normalization output mean and
/// variance, non-ideal versus ideal interface. Columns: mean_drift_avg,
/// mean_drift_max, var_drift_avg, var_drift_max, var_change_signed.
SweepTable bn_drift_study(const BnDriftConfig& cfg, std::shared_ptr<const nonideal::CurveBank> bank = nullptr);

// ---------------------------------------------------------------- gradient ratio

struct GradRatioConfig {
    std::size_t blocks = 6;
    std::vector<std::size_t> widths;  ///< blocks + 1 entries; empty = all 144
    pim::Scheme scheme = pim::Scheme::bit_serial;
    int b_imc = 0;                    ///< 0 = exact (infinite)
    nn::XiMode xi_mode = nn::XiMode::measured;
    double xi_fixed = 1.0;
    double eta = 1.0;
    double gamma = 0.15;
    double beta = 0.5;
    std::size_t batch = 128;
    std::size_t batches = 100;
    int b_w = 4, b_a = 4;
    std::size_t unit_in_channels = 144;
    std::uint64_t seed = 0;

    json to_json() const;
};

/// Stack of dense blocks (PIM MAC, BN with gamma and beta, identity activation)
/// fed N(beta, gamma^2) inputs with loss sum(r * y). beta = 0.5 and a small gamma
/// keep activations inside the quantizer's [0, 1] range, so the stack is
/// quasi-linear. For each block l:
///   measured  = mean over batches of Var(dL/dx_l) / Var(dL/dx_{l+1})
///   predicted = mean over batches of (xi_l / rho_l)^2 * n_{l+1} / n_l
/// Axis "layer"; columns measured, predicted, rel_error, xi, rho.
SweepTable gradient_ratio_check(const GradRatioConfig& cfg);

/// Largest rel_error over the layers of a gradient_ratio_check table.
double max_relative_error(const SweepTable& t);

// ---------------------------------------------------------------- noise / ENOB

struct NoiseErrorConfig {
    int b_imc = 7;
    std::vector<double> sigmas{0.0, 0.1, 0.2, 0.35, 0.5, 1.0, 2.0};
    std::size_t samples = 200000;
    std::uint64_t seed = 0;

    json to_json() const;
};

/// Columns: error_std, normalized_std, closed_form (sqrt(1 + 12 sigma^2)).
SweepTable noise_error_study(const NoiseErrorConfig& cfg, const nonideal::CurveBank* curves = nullptr);

}  // namespace pimqat::diag
