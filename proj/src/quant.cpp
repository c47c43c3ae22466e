#include "pimqat/quant.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace pimqat::quant {

std::int64_t code_denominator(Resolution bits, Range range) {
    require(!bits.is_infinite(), "code_denominator: infinite resolution has no code grid");
    switch (range) {
        case Range::unit: return (std::int64_t{1} << bits.bits()) - 1;
        case Range::unit_signed: return (std::int64_t{1} << (bits.bits() - 1)) - 1;
        case Range::unbounded: break;
    }
    throw Error("code_denominator: unbounded tensors carry no code grid");
}

QTensor QTensor::from_codes(Shape shape, std::vector<std::int32_t> codes, Resolution bits, Range range) {
    require(shape_numel(shape) == codes.size(), "QTensor::from_codes: shape/code count mismatch");
    const auto den = static_cast<double>(code_denominator(bits, range));
    QTensor q;
    q.shape = std::move(shape);
    q.bits = bits;
    q.range = range;
    q.data.resize(codes.size());
    for (std::size_t i = 0; i < codes.size(); ++i) q.data[i] = codes[i] / den;
    q.codes = std::move(codes);
    return q;
}

namespace {

template <class Code>
void quantize_activation_impl(std::span<const double> x, int bits, std::span<Code> codes) {
    require(codes.size() == x.size(), "quantize_activation: output size mismatch");
    const double levels = static_cast<double>((1 << bits) - 1);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        if (!std::isfinite(v))
            throw Error("quantize_activation: non-finite input at element " + std::to_string(i));
        codes[i] = static_cast<Code>(round_half_away(levels * std::clamp(v, 0.0, 1.0)));
    }
}

template <class Code>
double quantize_weight_impl(std::span<const double> w, int bits, std::size_t n_out, std::span<Code> codes) {
    require(!w.empty(), "quantize_weight: empty weight tensor");
    require(n_out >= 1, "quantize_weight: n_out must be positive");
    require(codes.size() == w.size(), "quantize_weight: output size mismatch");

    double max_abs = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (!std::isfinite(w[i]))
            throw Error("quantize_weight: non-finite weight at element " + std::to_string(i));
        max_abs = std::max(max_abs, std::abs(std::tanh(w[i])));
    }
    if (max_abs == 0.0) {
        std::fill(codes.begin(), codes.end(), Code{0});
        return 1.0;
    }

    const std::int64_t den = (std::int64_t{1} << (bits - 1)) - 1;
    double sum = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double c = round_half_away(static_cast<double>(den) * std::tanh(w[i]) / max_abs);
        codes[i] = static_cast<Code>(c);
        sum += c;
    }
    const double n = static_cast<double>(w.size());
    const double mean = sum / n;
    double ss = 0.0;
    for (const auto c : codes) ss += (c - mean) * (c - mean);
    // Variance of q_hat = code / den.
    double var = ss / n / static_cast<double>(den * den);
    if (var == 0.0) var = 1.0 / static_cast<double>(den * den);
    return 1.0 / std::sqrt(static_cast<double>(n_out) * var);
}

}  // namespace

void quantize_activation_codes(std::span<const double> x, int bits, std::span<std::uint8_t> codes) {
    require(bits >= 1 && bits <= 8, "quantize_activation: b_a must be in [1, 8], got " + std::to_string(bits));
    quantize_activation_impl(x, bits, codes);
}

QTensor quantize_activation(const Tensor& x, Resolution b_a) {
    require(!b_a.is_infinite() && b_a.bits() <= 16, "quantize_activation: b_a must be finite and at most 16");
    std::vector<std::int32_t> c(x.size());
    quantize_activation_impl<std::int32_t>(x.span(), b_a.bits(), c);
    return QTensor::from_codes(x.shape, std::move(c), b_a, Range::unit);
}

void activation_ste_backward(std::span<const double> x, std::span<double> grad) {
    require(x.size() == grad.size(), "activation_ste_backward: size mismatch");
    for (std::size_t i = 0; i < x.size(); ++i)
        if (!(x[i] >= 0.0 && x[i] <= 1.0)) grad[i] = 0.0;
}

double quantize_weight_codes(std::span<const double> w, int bits, std::size_t n_out,
                             std::span<std::int8_t> codes) {
    require(bits >= 2 && bits <= 8, "quantize_weight: b_w must be in [2, 8], got " + std::to_string(bits));
    return quantize_weight_impl(w, bits, n_out, codes);
}

WeightQuantization quantize_weight(const Tensor& w, int b_w, std::size_t n_out) {
    require(b_w >= 2 && b_w <= 16, "quantize_weight: b_w must be in [2, 16], got " + std::to_string(b_w));
    std::vector<std::int32_t> c(w.size());
    const double s = quantize_weight_impl<std::int32_t>(w.span(), b_w, n_out, c);
    return {QTensor::from_codes(w.shape, std::move(c), Resolution(b_w), Range::unit_signed), s};
}

BitPlanes decompose_activation(const QTensor& q, int m) {
    require(q.range == Range::unit && !q.bits.is_infinite(), "decompose_activation: expects a finite unit-range QTensor");
    require(q.codes.has_value(), "decompose_activation: QTensor carries no codes");
    const int b_a = q.bits.bits();
    require(m >= 1 && b_a % m == 0,
            "decompose_activation: slice width m=" + std::to_string(m) + " must divide b_a=" + std::to_string(b_a));
    const int count = b_a / m;
    const std::int32_t mask = (1 << m) - 1;

    BitPlanes out;
    out.kind = PlaneKind::activation_slices;
    out.slice_bits = m;
    out.base_denominator = (std::int64_t{1} << b_a) - 1;
    out.base_scale = 1.0 / static_cast<double>(out.base_denominator);
    out.planes.assign(count, std::vector<std::int32_t>(q.size()));
    for (int k = 0; k < count; ++k) out.plane_weights.push_back(std::int64_t{1} << (k * m));
    for (std::size_t i = 0; i < q.size(); ++i) {
        const std::int32_t c = (*q.codes)[i];
        for (int k = 0; k < count; ++k) out.planes[k][i] = (c >> (k * m)) & mask;
    }
    return out;
}

BitPlanes decompose_weight_bits(const QTensor& Q, int b_w) {
    require(Q.codes.has_value(), "decompose_weight_bits: QTensor carries no codes");
    require(Q.range == Range::unit_signed && Q.bits == Resolution(b_w),
            "decompose_weight_bits: expects a " + std::to_string(b_w) + "-bit unit_signed QTensor");
    BitPlanes out;
    out.kind = PlaneKind::weight_bits;
    out.base_denominator = (std::int64_t{1} << (b_w - 1)) - 1;
    out.base_scale = 1.0 / static_cast<double>(out.base_denominator);
    out.planes.assign(b_w, std::vector<std::int32_t>(Q.size()));
    for (int k = 0; k < b_w; ++k) {
        const std::int64_t w = std::int64_t{1} << k;
        out.plane_weights.push_back(k == b_w - 1 ? -w : w);
    }
    const std::uint32_t mask = (1u << b_w) - 1;
    for (std::size_t i = 0; i < Q.size(); ++i) {
        const auto bits = static_cast<std::uint32_t>((*Q.codes)[i]) & mask;
        for (int k = 0; k < b_w; ++k) out.planes[k][i] = static_cast<std::int32_t>((bits >> k) & 1u);
    }
    return out;
}

std::pair<QTensor, QTensor> split_signed(const QTensor& Q) {
    QTensor plus = Q, minus = Q;
    for (std::size_t i = 0; i < Q.size(); ++i) {
        plus.data[i] = std::max(Q.data[i], 0.0);
        minus.data[i] = std::min(Q.data[i], 0.0);
    }
    if (Q.codes) {
        for (std::size_t i = 0; i < Q.size(); ++i) {
            (*plus.codes)[i] = std::max((*Q.codes)[i], 0);
            (*minus.codes)[i] = std::min((*Q.codes)[i], 0);
        }
    }
    return {std::move(plus), std::move(minus)};
}

std::vector<double> split_signed_backward(const QTensor& Q, std::span<const double> grad_plus,
                                          std::span<const double> grad_minus) {
    require(grad_plus.size() == Q.size() && grad_minus.size() == Q.size(),
            "split_signed_backward: size mismatch");
    std::vector<double> g(Q.size());
    for (std::size_t i = 0; i < Q.size(); ++i) g[i] = Q.data[i] >= 0.0 ? grad_plus[i] : grad_minus[i];
    return g;
}

}  // namespace pimqat::quant
