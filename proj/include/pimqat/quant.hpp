#pragma once
// Uniform quantizers for weights and activations, and bit-plane decomposition
// of quantized operands into the slices consumed by the PIM schemes.

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "pimqat/common.hpp"
#include "pimqat/tensor.hpp"

namespace pimqat::quant {

enum class Range {
    unit_signed,  // [-1, 1], codes in {-(2^(b-1)-1), ..., 2^(b-1)-1}
    unit,         // [0, 1],  codes in {0, ..., 2^b - 1}
    unbounded,
};

/// Largest code magnitude of a quantizer: 2^b - 1 (unit) or 2^(b-1) - 1 (unit_signed).
std::int64_t code_denominator(Resolution bits, Range range);

/// Real tensor together with its quantization metadata.
struct QTensor {
    Shape shape;
    std::vector<double> data;
    Resolution bits;
    Range range = Range::unbounded;
    std::optional<std::vector<std::int32_t>> codes;

    std::size_t size() const { return data.size(); }
    /// Value of one code step, 1 / code_denominator().
    double step() const { return 1.0 / static_cast<double>(code_denominator(bits, range)); }

    /// Rebuild from integer codes; data[i] = codes[i] / code_denominator.
    static QTensor from_codes(Shape shape, std::vector<std::int32_t> codes, Resolution bits, Range range);
};

/// round((2^b - 1) * clip(x, 0, 1)) into `codes`. Rejects non-finite input.
void quantize_activation_codes(std::span<const double> x, int bits, std::span<std::uint8_t> codes);

QTensor quantize_activation(const Tensor& x, Resolution b_a);

/// Conventional STE: grad passes where 0 <= x <= 1 and is zeroed elsewhere.
void activation_ste_backward(std::span<const double> x, std::span<double> grad);

struct WeightQuantization {
    QTensor q;            ///< unscaled q_hat in [-1, 1]
    double scale = 1.0;   ///< s = 1 / sqrt(n_out * VAR[q_hat]), applied digitally after the MAC
};

/// Modified DoReFa: q_hat = round((2^(b-1)-1) tanh(W) / max|tanh(W)|) / (2^(b-1)-1).
/// Writes integer codes to `codes` and returns s.
double quantize_weight_codes(std::span<const double> w, int bits, std::size_t n_out,
                             std::span<std::int8_t> codes);

WeightQuantization quantize_weight(const Tensor& w, int b_w, std::size_t n_out);

enum class PlaneKind { activation_slices, weight_bits };

/// Integer planes whose weighted sum reconstructs a quantized tensor:
///   value = base_scale * sum_k plane_weights[k] * planes[k]
/// base_scale is exactly 1 / base_denominator.
struct BitPlanes {
    std::vector<std::vector<std::int32_t>> planes;
    std::vector<std::int64_t> plane_weights;
    std::int64_t base_denominator = 1;
    double base_scale = 1.0;
    PlaneKind kind = PlaneKind::activation_slices;
    int slice_bits = 1;  ///< m for activation slices, 1 for weight bits

    std::size_t count() const { return planes.size(); }
    std::size_t length() const { return planes.empty() ? 0 : planes.front().size(); }
};

/// Base-2^m digits of unit-range codes, least significant first.
BitPlanes decompose_activation(const QTensor& q, int m);

/// Two's-complement bits of signed codes; the MSB plane carries -2^(b_w-1).
BitPlanes decompose_weight_bits(const QTensor& Q, int b_w);

/// Q = Q_plus + Q_minus with Q_plus = max(Q, 0), Q_minus = min(Q, 0).
std::pair<QTensor, QTensor> split_signed(const QTensor& Q);

/// Backward of split_signed: each part's gradient flows through its sign region.
std::vector<double> split_signed_backward(const QTensor& Q, std::span<const double> grad_plus,
                                          std::span<const double> grad_minus);

}  // namespace pimqat::quant
