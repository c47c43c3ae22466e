#pragma once
// PIM MAC evaluation for the native, differential and bit-serial schemes,
// with b_imc-bit conversion of each analog partial sum and exact digital
// recombination, plus the GSTE backward.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pimqat/common.hpp"
#include "pimqat/nonideal.hpp"
#include "pimqat/quant.hpp"
#include "pimqat/tensor.hpp"

namespace pimqat::pim {

enum class Scheme { native, differential, bit_serial };

std::string to_string(Scheme s);
Scheme scheme_from_string(const std::string& s);

struct PimConfig {
    Scheme scheme = Scheme::bit_serial;
    std::size_t n_group = 144;         ///< N, operands per analog MAC
    Resolution b_imc;                  ///< converter bits, infinite = no PIM quantization
    int dac_bits = 1;                  ///< m, activation slice width
    int b_w = 4;
    int b_a = 4;
    std::size_t unit_in_channels = 16;
    std::size_t unit_out_channels = 8;
    double forward_scale = 1.0;        ///< eta
    std::shared_ptr<const nonideal::NonIdealModel> nonideal;

    void validate() const;

    /// Conversions per MAC group: b_a/m (native), 2 b_a/m (differential),
    /// b_w b_a/m (bit-serial).
    std::size_t conversions_per_group() const;
};

/// Forward scale factors keyed on (scheme, b_imc). Infinite or >= 8 bits gives 1.
double default_forward_scale(Scheme scheme, Resolution b_imc);

/// Where a layer sits in the noise stream: conversion c of group g for
/// output (p, o) draws index ((p*O + o)*G + g)*conversions + c under
/// stream_key(noise, layer, tick).
struct StreamPosition {
    std::uint64_t layer = 0;
    std::uint64_t tick = 0;
};

/// Result of one MAC group.
struct MacGroupResult {
    double value_pim = 0.0;    ///< recombined output
    double value_exact = 0.0;  ///< sum_i Q_i q_i
    std::vector<std::vector<std::int64_t>> adc_codes;  ///< [branch][plane]; one branch except differential (+, -)
    std::int64_t recombined = 0;  ///< integer shift-and-add sum before the final scale
};

/// Optional per-group interface: the curve serving this group and its noise draws.
struct GroupInterface {
    const nonideal::TransferCurve* curve = nullptr;
    nonideal::NoiseStream noise;
};

MacGroupResult mac_native(const quant::QTensor& Q, const quant::BitPlanes& q_planes, const PimConfig& cfg,
                          const GroupInterface& io = {});
MacGroupResult mac_differential(const quant::QTensor& Q, const quant::BitPlanes& q_planes, const PimConfig& cfg,
                                const GroupInterface& io = {});
MacGroupResult mac_bit_serial(const quant::BitPlanes& Q_bits, const quant::BitPlanes& q_planes, const PimConfig& cfg,
                              const GroupInterface& io = {});

/// Signed code range emitted by a scheme's converters.
std::pair<std::int64_t, std::int64_t> code_range(const PimConfig& cfg);

/// Layer-level result. Values are in units of sum Q_hat q (weights unscaled).
struct LayerMacResult {
    std::size_t rows = 0, outputs = 0;  ///< P, O
    std::vector<double> value_pim;      ///< [P*O]
    std::vector<double> value_exact;    ///< [P*O]; empty when not requested
    std::int64_t code_min = 0, code_max = 0;  ///< extremes of emitted codes (0 when no conversion ran)
    std::size_t groups = 0;
};

struct LinearOptions {
    bool want_exact = true;
    StreamPosition stream;
};

/// Batched grouped MAC. act: [P, K] codes of b_a bits; wt: [O, K] signed codes
/// of b_w bits; K = in_channels * kernel_area laid out channel-major. Channels
/// are zero-padded up to a multiple of unit_in_channels; each group covers
/// unit_in_channels * kernel_area = n_group operands. Group partial sums are
/// accumulated digitally in full precision.
LayerMacResult pim_linear(std::span<const std::uint8_t> act, std::span<const std::int8_t> wt, std::size_t P,
                          std::size_t O, std::size_t in_channels, std::size_t kernel_area, const PimConfig& cfg,
                          const LinearOptions& opt = {});

/// Convenience overload on quantized tensors: Q is [O, K], q is [P, K].
LayerMacResult pim_linear(const quant::QTensor& Q, const quant::QTensor& q, std::size_t kernel_area,
                          const PimConfig& cfg, const LinearOptions& opt = {});

struct GsteGrads {
    std::vector<double> grad_Q;  ///< [O, K]
    std::vector<double> grad_q;  ///< [P, K]
};

/// Backward of y = sum_k Q[o,k] q[p,k] scaled by xi: grad_Q = xi * G^T q and
/// grad_q = xi * G Q, with G = grad_out [P, O]. The plain products are formed
/// first and then multiplied by xi, so xi != 1 is bit-exactly xi times xi = 1.
/// act holds activation codes (q = code / act_den); weights are real values.
GsteGrads gste_backward(std::span<const double> grad_out, std::span<const std::uint8_t> act, double act_den,
                        std::span<const double> weights, std::size_t P, std::size_t O, std::size_t K, double xi,
                        bool want_grad_Q = true, bool want_grad_q = true);

/// Number of worker threads used by pim_linear and the layer kernels (>= 1).
void set_num_threads(unsigned n);
unsigned num_threads();

}  // namespace pimqat::pim
