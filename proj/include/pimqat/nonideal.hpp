#pragma once
// Imperfect analog-to-digital interface: measured transfer curves, thermal
// noise, synthetic gain/offset variation and error-std characterization.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "pimqat/common.hpp"
#include "pimqat/random.hpp"

namespace pimqat::nonideal {

/// Measured level (in LSB) for each ideal code 0..2^b-1. Evaluated on the
/// continuous interval [0, 2^b-1] by piecewise-linear interpolation.
class TransferCurve {
public:
    TransferCurve(int bits, std::vector<double> levels);

    static TransferCurve identity(int bits);
    /// levels[c] = gain * c + offset
    static TransferCurve affine(int bits, double gain, double offset);

    int bits() const { return bits_; }
    const std::vector<double>& levels() const { return levels_; }

    /// Interpolated level; inputs outside the domain are clamped to it.
    double operator()(double a) const;

    /// Signed levels go through the curve by magnitude: sign(a) * curve(|a|).
    double eval_signed(double a) const { return a < 0.0 ? -(*this)(-a) : (*this)(a); }

private:
    int bits_;
    std::vector<double> levels_;
};

/// One curve per ADC instance. Output channel o is served by curve
/// (o / unit_out_channels) % size().
struct CurveBank {
    std::vector<TransferCurve> curves;

    std::size_t size() const { return curves.size(); }
    int bits() const { return curves.empty() ? 0 : curves.front().bits(); }
    const TransferCurve& for_output(std::size_t o, std::size_t unit_out_channels) const {
        return curves[(o / unit_out_channels) % curves.size()];
    }
};

struct NoiseModel {
    double sigma_lsb = 0.0;
    std::uint64_t seed = 0;

    bool active() const { return sigma_lsb > 0.0; }
};

struct VariationSpec {
    double sigma_offset = 0.0;  ///< LSB
    double sigma_gain = 0.0;
    std::uint64_t seed = 0;
};

/// Everything an evaluation-time interface adds on top of ideal PIM quantization.
struct NonIdealModel {
    std::shared_ptr<const CurveBank> curves;
    NoiseModel noise;

    bool active() const { return curves || noise.active(); }
};

/// Addressable slice of a noise stream. The draw for conversion c is
/// sigma * counter_normal(key, base + c); a zero sigma yields exact zeros.
struct NoiseStream {
    double sigma = 0.0;
    std::uint64_t key = 0;
    std::uint64_t base = 0;

    double operator()(std::uint64_t c) const { return sigma > 0.0 ? sigma * counter_normal(key, base + c) : 0.0; }
};

/// Key of the stream used by one layer at one step (training step or
/// evaluation batch). Streams of different layers/steps never overlap.
inline std::uint64_t stream_key(const NoiseModel& m, std::uint64_t layer, std::uint64_t tick) {
    return hash_combine(hash_combine(m.seed, layer), tick);
}

/// clamp(round(curve(a) + eps), lo, hi). A null curve is the identity.
std::int64_t apply_interface(double a, const TransferCurve* curve, double eps, std::int64_t lo, std::int64_t hi,
                             bool signed_levels = false);

/// Unsigned b-bit interface with an optional noise draw at `index` of the
/// model's stream `key`.
std::int64_t apply_interface(double a, const TransferCurve* curve, const NoiseModel* noise, std::uint64_t key,
                             std::uint64_t index, Resolution b);

/// curve_j(a) = gain_j * a + offset_j, gain_j ~ N(1, sigma_gain^2), offset_j ~ N(0, sigma_offset^2).
CurveBank generate_variation_curves(int bits, std::size_t count, const VariationSpec& spec);

/// Text format: header `pim-curves v1 bits=<b> count=<n>`, then n lines of 2^b reals.
CurveBank load_curve_bank(const std::filesystem::path& path, int bits);
CurveBank parse_curve_bank(std::string_view text, int bits, const std::string& source = "<memory>");
void save_curve_bank(const std::filesystem::path& path, const CurveBank& bank);

/// Least-squares line through a curve's levels.
struct AffineFit {
    double gain, offset;
};
AffineFit fit_affine(const TransferCurve& c);

struct ErrorStdRow {
    double sigma;
    double error_std;       ///< LSB
    double normalized_std;  ///< error_std / error_std at sigma = 0
};

/// Monte-Carlo error of a b-bit interface on levels drawn uniformly over
/// [0, 2^b-1]. The sigma = 0 baseline uses the same levels and curves, so the
/// normalization is exactly 1 there. Curves (if any) rotate over samples.
std::vector<ErrorStdRow> error_std_sweep(Resolution b, const CurveBank* curves, std::span<const double> sigmas,
                                         std::size_t samples, std::uint64_t seed);

}  // namespace pimqat::nonideal
