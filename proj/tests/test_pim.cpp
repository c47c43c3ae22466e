#include <gtest/gtest.h>

#include <cmath>

#include "pimqat/oracle.hpp"
#include "pimqat/pim.hpp"
#include "pimqat/random.hpp"

using namespace pimqat;
using namespace pimqat::pim;
using oracle::MacCase;
using oracle::Rational;

namespace {

MacCase make_case(Scheme s, int bw, int ba, int m, int imc, std::vector<std::int64_t> w,
                  std::vector<std::int64_t> a) {
    MacCase c;
    c.scheme = s;
    c.b_w = bw;
    c.b_a = ba;
    c.m = m;
    c.b_imc = imc;
    c.weights = std::move(w);
    c.activations = std::move(a);
    return c;
}

void expect_matches_oracle(const MacCase& c) {
    const auto r = oracle::run_pim(c);
    const auto o = oracle::evaluate(c);
    ASSERT_EQ(r.value_pim, boost::rational_cast<double>(o.value)) << oracle::to_string(o.value);
    ASSERT_EQ(oracle::flat_codes(r), o.codes);
    ASSERT_EQ(r.value_exact, boost::rational_cast<double>(o.exact));
}

PimConfig layer_cfg(Scheme s, int imc, std::size_t unit_in, std::size_t ka) {
    PimConfig cfg;
    cfg.scheme = s;
    cfg.b_imc = imc ? Resolution(imc) : Resolution::infinite();
    cfg.unit_in_channels = unit_in;
    cfg.n_group = unit_in * ka;
    return cfg;
}

struct Operands {
    std::vector<std::uint8_t> act;
    std::vector<std::int8_t> wt;
};

Operands random_operands(Rng& rng, std::size_t P, std::size_t O, std::size_t K, int ba = 4, int bw = 4) {
    Operands x;
    x.act.resize(P * K);
    x.wt.resize(O * K);
    const int D = (1 << (bw - 1)) - 1;
    for (auto& a : x.act) a = static_cast<std::uint8_t>(rng.below(1u << ba));
    for (auto& w : x.wt) w = static_cast<std::int8_t>(static_cast<int>(rng.below(2 * D + 1)) - D);
    return x;
}

}  // namespace

TEST(MacNative, InfiniteResolutionIsExact) {
    auto c = make_case(Scheme::native, 4, 4, 1, 0, {3, -7, 5}, {15, 2, 9});
    const auto r = oracle::run_pim(c);
    EXPECT_EQ(r.value_pim, r.value_exact);
    EXPECT_TRUE(r.adc_codes.empty());
}

TEST(MacNative, UnitScales) {
    // b_w = 2 is the smallest weight grid; Q = 1 and q = 1 give 1.
    auto r = oracle::run_pim(make_case(Scheme::native, 2, 1, 1, 1, {1}, {1}));
    EXPECT_EQ(r.value_pim, 1.0);
}

TEST(MacNative, WorkedExample) {
    auto c = make_case(Scheme::native, 2, 2, 1, 2, {1, -1}, {1, 2});
    const auto r = oracle::run_pim(c);
    EXPECT_EQ(r.adc_codes[0], (std::vector<std::int64_t>{2, -2}));
    EXPECT_EQ(r.value_pim, -4.0 / 9.0);
    EXPECT_EQ(oracle::evaluate(c).value, Rational(-4, 9));
}

TEST(MacNative, RejectsWrongGroupLength) {
    PimConfig cfg;
    cfg.scheme = Scheme::native;
    cfg.n_group = 3;
    cfg.b_imc = Resolution(4);
    auto Q = quant::QTensor::from_codes({2}, {1, 2}, Resolution(4), quant::Range::unit_signed);
    auto q = quant::QTensor::from_codes({2}, {1, 2}, Resolution(4), quant::Range::unit);
    EXPECT_THROW(mac_native(Q, quant::decompose_activation(q, 1), cfg), Error);
}

TEST(MacDifferential, NonNegativeWeightsMatchNative) {
    Rng rng(3);
    for (int t = 0; t < 300; ++t) {
        auto c = oracle::random_case(rng.next_u64(), 12, 4, 8);
        for (auto& w : c.weights) w = std::abs(w);
        c.scheme = Scheme::native;
        const auto n = oracle::run_pim(c);
        c.scheme = Scheme::differential;
        const auto d = oracle::run_pim(c);
        ASSERT_EQ(n.value_pim, d.value_pim);
    }
}

TEST(MacDifferential, Antisymmetric) {
    Rng rng(4);
    for (int t = 0; t < 500; ++t) {
        auto c = oracle::random_case(rng.next_u64(), 16, 4, 8);
        c.scheme = Scheme::differential;
        const auto a = oracle::run_pim(c);
        for (auto& w : c.weights) w = -w;
        const auto b = oracle::run_pim(c);
        ASSERT_EQ(a.value_pim, -b.value_pim);
    }
}

TEST(MacDifferential, RandomGroupMatchesOracle) {
    Rng rng(5);
    for (int t = 0; t < 50; ++t) {
        MacCase c = make_case(Scheme::differential, 4, 4, 1, 5, {}, {});
        for (int i = 0; i < 8; ++i) {
            c.weights.push_back(static_cast<std::int64_t>(rng.below(15)) - 7);
            c.activations.push_back(static_cast<std::int64_t>(rng.below(16)));
        }
        expect_matches_oracle(c);
    }
}

TEST(MacBitSerial, TrivialCases) {
    EXPECT_EQ(oracle::run_pim(make_case(Scheme::bit_serial, 2, 1, 1, 1, {1}, {1})).value_pim, 1.0);
    EXPECT_EQ(oracle::run_pim(make_case(Scheme::bit_serial, 4, 4, 1, 3, {0, 0, 0}, {15, 3, 9})).value_pim, 0.0);
}

TEST(MacBitSerial, LargeGroupMatchesOracle) {
    Rng rng(6);
    for (int t = 0; t < 20; ++t) {
        MacCase c = make_case(Scheme::bit_serial, 4, 4, 1, 7, {}, {});
        for (int i = 0; i < 144; ++i) {
            c.weights.push_back(static_cast<std::int64_t>(rng.below(15)) - 7);
            c.activations.push_back(static_cast<std::int64_t>(rng.below(16)));
        }
        expect_matches_oracle(c);
    }
}

TEST(MacSchemes, OracleEquivalenceProperty) {
    Rng rng(7);
    for (int t = 0; t < 3000; ++t) expect_matches_oracle(oracle::random_case(rng.next_u64(), 16, 4, 8));
}

TEST(MacSchemes, InfiniteResolutionReduction) {
    Rng rng(8);
    for (int t = 0; t < 3000; ++t) {
        auto c = oracle::random_case(rng.next_u64(), 16, 4, 8);
        c.b_imc = 0;
        const auto r = oracle::run_pim(c);
        ASSERT_LE(std::abs(r.value_pim - r.value_exact), 1e-9 * std::max(1.0, std::abs(r.value_exact)));
    }
}

TEST(MacSchemes, CodesStayInRangeUnderNoiseAndCurves) {
    Rng rng(9);
    for (int t = 0; t < 500; ++t) {
        auto c = oracle::random_case(rng.next_u64(), 16, 4, 6);
        const auto bank = nonideal::generate_variation_curves(c.b_imc, 1, {3.0, 0.3, rng.next_u64()});
        PimConfig cfg;
        cfg.scheme = c.scheme;
        cfg.b_imc = Resolution(c.b_imc);
        const auto [lo, hi] = code_range(cfg);
        GroupInterface io{&bank.curves[0], {2.0, rng.next_u64(), 0}};
        cfg.n_group = c.weights.size();
        cfg.dac_bits = c.m;
        cfg.b_w = c.b_w;
        cfg.b_a = c.b_a;
        auto Q = quant::QTensor::from_codes({c.weights.size()}, {c.weights.begin(), c.weights.end()}, Resolution(c.b_w),
                                            quant::Range::unit_signed);
        auto q = quant::QTensor::from_codes({c.weights.size()}, {c.activations.begin(), c.activations.end()},
                                            Resolution(c.b_a), quant::Range::unit);
        auto planes = quant::decompose_activation(q, c.m);
        MacGroupResult r;
        if (c.scheme == Scheme::native) r = mac_native(Q, planes, cfg, io);
        if (c.scheme == Scheme::differential) r = mac_differential(Q, planes, cfg, io);
        if (c.scheme == Scheme::bit_serial) r = mac_bit_serial(quant::decompose_weight_bits(Q, c.b_w), planes, cfg, io);
        for (const auto& branch : r.adc_codes)
            for (auto code : branch) {
                ASSERT_GE(code, lo);
                ASSERT_LE(code, hi);
            }
    }
}

TEST(PimLinear, SingleGroupMatchesGroupMac) {
    Rng rng(10);
    for (Scheme s : {Scheme::native, Scheme::differential, Scheme::bit_serial}) {
        for (int imc : {3, 5, 8}) {
            const std::size_t N = 9;
            auto x = random_operands(rng, 1, 1, N);
            auto cfg = layer_cfg(s, imc, 1, 9);
            const auto lay = pim_linear(x.act, x.wt, 1, 1, 1, 9, cfg);
            MacCase c = make_case(s, 4, 4, 1, imc, {x.wt.begin(), x.wt.end()}, {x.act.begin(), x.act.end()});
            const auto g = oracle::run_pim(c);
            EXPECT_EQ(lay.value_pim[0], g.value_pim);
            EXPECT_EQ(lay.value_exact[0], g.value_exact);
        }
    }
}

TEST(PimLinear, SingleGroupMatchesGroupMacUnderNoiseAndCurves) {
    Rng rng(11);
    auto bank = std::make_shared<nonideal::CurveBank>(nonideal::generate_variation_curves(5, 3, {1.5, 0.05, 4}));
    for (Scheme s : {Scheme::native, Scheme::differential, Scheme::bit_serial}) {
        const std::size_t N = 16, O = 20;
        auto x = random_operands(rng, 2, O, N);
        auto cfg = layer_cfg(s, 5, 16, 1);
        cfg.unit_out_channels = 4;
        auto ni = std::make_shared<nonideal::NonIdealModel>();
        ni->curves = bank;
        ni->noise = {0.7, 77};
        cfg.nonideal = ni;
        const StreamPosition pos{3, 11};
        const auto lay = pim_linear(x.act, x.wt, 2, O, 16, 1, cfg, {true, pos});
        const std::uint64_t key = nonideal::stream_key(ni->noise, pos.layer, pos.tick);
        for (std::size_t p = 0; p < 2; ++p)
            for (std::size_t o = 0; o < O; ++o) {
                std::vector<std::int32_t> w(x.wt.begin() + o * N, x.wt.begin() + (o + 1) * N);
                std::vector<std::int32_t> a(x.act.begin() + p * N, x.act.begin() + (p + 1) * N);
                auto Q = quant::QTensor::from_codes({N}, w, Resolution(4), quant::Range::unit_signed);
                auto q = quant::QTensor::from_codes({N}, a, Resolution(4), quant::Range::unit);
                auto planes = quant::decompose_activation(q, 1);
                GroupInterface io{&bank->for_output(o, 4), {0.7, key, (p * O + o) * cfg.conversions_per_group()}};
                MacGroupResult g;
                if (s == Scheme::native) g = mac_native(Q, planes, cfg, io);
                if (s == Scheme::differential) g = mac_differential(Q, planes, cfg, io);
                if (s == Scheme::bit_serial) g = mac_bit_serial(quant::decompose_weight_bits(Q, 4), planes, cfg, io);
                ASSERT_EQ(lay.value_pim[p * O + o], g.value_pim) << to_string(s) << " p=" << p << " o=" << o;
            }
    }
}

TEST(PimLinear, ZeroActivationsGiveZero) {
    Rng rng(12);
    auto x = random_operands(rng, 3, 4, 32);
    std::fill(x.act.begin(), x.act.end(), 0);
    for (Scheme s : {Scheme::native, Scheme::differential, Scheme::bit_serial}) {
        const auto r = pim_linear(x.act, x.wt, 3, 4, 32, 1, layer_cfg(s, 4, 16, 1));
        EXPECT_EQ(r.groups, 2u);
        for (double v : r.value_pim) EXPECT_EQ(v, 0.0);
    }
}

TEST(PimLinear, SplitConvolutionAtInfiniteResolutionEqualsDenseConvolution) {
    // 32 input channels, 3x3 patches, split into two 16-channel groups.
    Rng rng(13);
    const std::size_t C = 32, ka = 9, K = C * ka, P = 10, O = 6;
    auto x = random_operands(rng, P, O, K);
    for (Scheme s : {Scheme::native, Scheme::differential, Scheme::bit_serial}) {
        const auto r = pim_linear(x.act, x.wt, P, O, C, ka, layer_cfg(s, 0, 16, ka));
        EXPECT_EQ(r.groups, 2u);
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t o = 0; o < O; ++o) {
                double ref = 0;
                for (std::size_t k = 0; k < K; ++k) ref += (x.wt[o * K + k] / 7.0) * (x.act[p * K + k] / 15.0);
                EXPECT_NEAR(r.value_pim[p * O + o], ref, 1e-12 * (1 + std::abs(ref)));
            }
    }
}

TEST(PimLinear, PaddedChannelsEqualSumOfGroupMacs) {
    Rng rng(14);
    const std::size_t C = 20, ka = 4, K = C * ka, u = 8, N = u * ka;
    auto x = random_operands(rng, 1, 1, K);
    for (Scheme s : {Scheme::native, Scheme::differential, Scheme::bit_serial}) {
        auto cfg = layer_cfg(s, 4, u, ka);
        const auto r = pim_linear(x.act, x.wt, 1, 1, C, ka, cfg);
        EXPECT_EQ(r.groups, 3u);
        std::int64_t R = 0;
        for (std::size_t g = 0; g < 3; ++g) {
            MacCase c = make_case(s, 4, 4, 1, 4, {}, {});
            for (std::size_t i = 0; i < N; ++i) {
                const std::size_t k = g * N + i;
                c.weights.push_back(k < K ? x.wt[k] : 0);
                c.activations.push_back(k < K ? x.act[k] : 0);
            }
            R += oracle::run_pim(c).recombined;
        }
        const double scale = s == Scheme::bit_serial ? 15.0 * 7 * 15 : 15.0 * 15;
        EXPECT_EQ(r.value_pim[0], static_cast<double>(R * static_cast<std::int64_t>(N)) / scale);
    }
}

TEST(PimLinear, IdentityCurvesAndZeroNoiseAreBitExactIdeal) {
    Rng rng(15);
    auto x = random_operands(rng, 7, 9, 48);
    for (Scheme s : {Scheme::native, Scheme::differential, Scheme::bit_serial}) {
        auto cfg = layer_cfg(s, 5, 16, 1);
        const auto ideal = pim_linear(x.act, x.wt, 7, 9, 48, 1, cfg);
        auto ni = std::make_shared<nonideal::NonIdealModel>();
        ni->curves = std::make_shared<nonideal::CurveBank>(nonideal::generate_variation_curves(5, 4, {0, 0, 0}));
        cfg.nonideal = ni;
        const auto viaCurves = pim_linear(x.act, x.wt, 7, 9, 48, 1, cfg);
        EXPECT_EQ(ideal.value_pim, viaCurves.value_pim);
    }
}

TEST(PimLinear, CodeRangeSafety) {
    Rng rng(16);
    auto x = random_operands(rng, 16, 16, 64);
    for (Scheme s : {Scheme::native, Scheme::differential, Scheme::bit_serial}) {
        auto cfg = layer_cfg(s, 3, 16, 1);
        auto ni = std::make_shared<nonideal::NonIdealModel>();
        ni->curves = std::make_shared<nonideal::CurveBank>(nonideal::generate_variation_curves(3, 4, {2.0, 0.2, 1}));
        ni->noise = {3.0, 5};
        cfg.nonideal = ni;
        const auto r = pim_linear(x.act, x.wt, 16, 16, 64, 1, cfg);
        const auto [lo, hi] = code_range(cfg);
        EXPECT_GE(r.code_min, lo);
        EXPECT_LE(r.code_max, hi);
        EXPECT_EQ(r.code_max, hi);  // the heavy noise does saturate
    }
}

TEST(PimLinear, ThreadCountDoesNotChangeResults) {
    Rng rng(17);
    auto x = random_operands(rng, 37, 8, 72);
    auto cfg = layer_cfg(Scheme::bit_serial, 4, 8, 9);
    auto ni = std::make_shared<nonideal::NonIdealModel>();
    ni->noise = {0.35, 2};
    cfg.nonideal = ni;
    set_num_threads(1);
    const auto a = pim_linear(x.act, x.wt, 37, 8, 8, 9, cfg);
    set_num_threads(4);
    const auto b = pim_linear(x.act, x.wt, 37, 8, 8, 9, cfg);
    set_num_threads(1);
    EXPECT_EQ(a.value_pim, b.value_pim);
}

TEST(PimLinear, RejectsBadGeometry) {
    std::vector<std::uint8_t> a(10);
    std::vector<std::int8_t> w(10);
    EXPECT_THROW(pim_linear(a, w, 1, 1, 10, 1, layer_cfg(Scheme::native, 4, 16, 2)), Error);
    EXPECT_THROW(pim_linear(a, w, 2, 1, 10, 1, layer_cfg(Scheme::native, 4, 16, 1)), Error);
    std::vector<std::uint8_t> big(16, 200);
    std::vector<std::int8_t> w16(16);
    EXPECT_THROW(pim_linear(big, w16, 1, 1, 16, 1, layer_cfg(Scheme::native, 4, 16, 1)), Error);
}

TEST(GsteBackward, ScalesPlainBackwardBitExactly) {
    Rng rng(18);
    const std::size_t P = 11, O = 7, K = 30;
    std::vector<double> g(P * O), w(O * K);
    std::vector<std::uint8_t> a(P * K);
    for (auto& v : g) v = rng.normal();
    for (auto& v : w) v = rng.uniform(-1, 1);
    for (auto& v : a) v = static_cast<std::uint8_t>(rng.below(16));
    const auto plain = gste_backward(g, a, 15.0, w, P, O, K, 1.0);
    for (double xi : {1.0, 2.5, 0.3}) {
        const auto r = gste_backward(g, a, 15.0, w, P, O, K, xi);
        for (std::size_t i = 0; i < plain.grad_Q.size(); ++i) ASSERT_EQ(r.grad_Q[i], xi * plain.grad_Q[i]);
        for (std::size_t i = 0; i < plain.grad_q.size(); ++i) ASSERT_EQ(r.grad_q[i], xi * plain.grad_q[i]);
    }
    // The plain backward is the dense-layer backward on the quantized operands.
    for (std::size_t o = 0; o < O; ++o)
        for (std::size_t k = 0; k < K; ++k) {
            double s = 0;
            for (std::size_t p = 0; p < P; ++p) s += g[p * O + o] * (a[p * K + k] / 15.0);
            EXPECT_NEAR(plain.grad_Q[o * K + k], s, 1e-12 * (1 + std::abs(s)));
        }
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t k = 0; k < K; ++k) {
            double s = 0;
            for (std::size_t o = 0; o < O; ++o) s += g[p * O + o] * w[o * K + k];
            EXPECT_NEAR(plain.grad_q[p * K + k], s, 1e-12 * (1 + std::abs(s)));
        }
}

TEST(GsteBackward, ZeroGradientAndInvalidXi) {
    std::vector<double> g(6, 0.0), w(6, 0.5);
    std::vector<std::uint8_t> a(9, 3);
    const auto r = gste_backward(g, a, 15.0, w, 3, 2, 3, 2.5);
    for (double v : r.grad_Q) EXPECT_EQ(v, 0.0);
    for (double v : r.grad_q) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(gste_backward(g, a, 15.0, w, 3, 2, 3, 0.0), Error);
}

TEST(ForwardScale, TableValues) {
    EXPECT_EQ(default_forward_scale(Scheme::bit_serial, Resolution(3)), 100.0);
    EXPECT_EQ(default_forward_scale(Scheme::bit_serial, Resolution(4)), 30.0);
    EXPECT_EQ(default_forward_scale(Scheme::bit_serial, Resolution(6)), 30.0);
    EXPECT_EQ(default_forward_scale(Scheme::bit_serial, Resolution(7)), 1.03);
    EXPECT_EQ(default_forward_scale(Scheme::native, Resolution(3)), 100.0);
    EXPECT_EQ(default_forward_scale(Scheme::native, Resolution(4)), 20.0);
    EXPECT_EQ(default_forward_scale(Scheme::native, Resolution(5)), 1.0);
    for (int b = 3; b <= 7; ++b) EXPECT_EQ(default_forward_scale(Scheme::differential, Resolution(b)), 1000.0);
    EXPECT_EQ(default_forward_scale(Scheme::differential, Resolution::infinite()), 1.0);
}

TEST(PimConfig, Validation) {
    PimConfig cfg;
    cfg.b_a = 4;
    cfg.dac_bits = 3;
    EXPECT_THROW(cfg.validate(), Error);
    cfg.dac_bits = 2;
    EXPECT_NO_THROW(cfg.validate());
    cfg.forward_scale = 0;
    EXPECT_THROW(cfg.validate(), Error);
    cfg.forward_scale = 1;
    auto ni = std::make_shared<nonideal::NonIdealModel>();
    ni->noise = {0.35, 1};
    cfg.nonideal = ni;
    EXPECT_THROW(cfg.validate(), Error);  // infinite b_imc with noise
    cfg.b_imc = Resolution(7);
    ni->curves = std::make_shared<nonideal::CurveBank>(nonideal::generate_variation_curves(6, 1, {}));
    EXPECT_THROW(cfg.validate(), Error);  // curve bits mismatch
    EXPECT_EQ(scheme_from_string("bit-serial"), Scheme::bit_serial);
    EXPECT_THROW(scheme_from_string("analog"), Error);
}
