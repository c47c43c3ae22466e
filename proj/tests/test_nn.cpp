#include <gtest/gtest.h>

#include <cmath>

#include "pimqat/nn.hpp"
#include "pimqat/quant.hpp"

using namespace pimqat;
using namespace pimqat::nn;

namespace {

Tensor random_tensor(Rng& rng, Shape s, double lo = 0.0, double hi = 1.0) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// The width -> width PIM convolution of a CNN4 with `width` channels.
Layer conv_layer(std::size_t width, pim::Scheme scheme, Resolution b_imc, std::uint64_t seed) {
    PimSpec spec;
    spec.scheme = scheme;
    spec.b_imc = b_imc;
    spec.unit_in_channels = 4;
    auto m = make_cnn4(3, width, 2, spec, seed);
    Layer L = m.layers[1];  // PIM conv w -> w
    L.pool = Pool::none;
    return L;
}

ForwardContext train_ctx() {
    ForwardContext c;
    c.bn = BnMode::train;
    c.keep_cache = true;
    return c;
}

}  // namespace

TEST(BatchNorm, StandardizedInputPassesThrough) {
    Rng rng(1);
    const std::size_t B = 64, C = 3, S = 5;
    std::vector<double> z(B * C * S);
    for (auto& v : z) v = rng.normal();
    for (std::size_t c = 0; c < C; ++c) {  // exact standardization per channel
        double m = 0, ss = 0;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t s = 0; s < S; ++s) m += z[(b * C + c) * S + s];
        m /= B * S;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t s = 0; s < S; ++s) ss += std::pow(z[(b * C + c) * S + s] - m, 2);
        const double sd = std::sqrt(ss / (B * S));
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t s = 0; s < S; ++s) z[(b * C + c) * S + s] = (z[(b * C + c) * S + s] - m) / sd;
    }
    BNState bn(C);
    std::vector<double> y;
    bn_forward(z, B, C, S, bn, BnMode::batch, y, nullptr);
    for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(y[i], z[i], 1e-5 * (1 + std::abs(z[i])));
}

TEST(BatchNorm, ConstantChannelGivesBeta) {
    BNState bn(2);
    bn.beta = {0.25, -0.5};
    std::vector<double> z(20, 3.0), y;
    bn_forward(z, 5, 2, 2, bn, BnMode::train, y, nullptr);
    for (std::size_t b = 0; b < 5; ++b)
        for (std::size_t s = 0; s < 2; ++s) {
            EXPECT_EQ(y[(b * 2 + 0) * 2 + s], 0.25);
            EXPECT_EQ(y[(b * 2 + 1) * 2 + s], -0.5);
        }
}

TEST(BatchNorm, RunningStatisticsUseMomentumAndUnbiasedVariance) {
    BNState bn(1);
    std::vector<double> z{1.0, 2.0, 3.0, 4.0}, y;
    bn_forward(z, 4, 1, 1, bn, BnMode::train, y, nullptr);
    EXPECT_DOUBLE_EQ(bn.running_mean[0], 0.1 * 2.5);
    EXPECT_DOUBLE_EQ(bn.running_var[0], 0.9 + 0.1 * (5.0 / 3.0));
}

TEST(BatchNorm, LargeBatchDiagonalMatchesGammaOverSigma) {
    Rng rng(2);
    const std::size_t n = 512;
    std::vector<double> z(n), y;
    for (auto& v : z) v = rng.normal(0.3, 2.0);
    BNState bn(1);
    bn.gamma = {1.7};
    BNCache cache;
    bn_forward(z, n, 1, 1, bn, BnMode::batch, y, &cache);
    const double approx = 1.7 * cache.inv_std[0];
    double dev = 0.0;
    std::vector<double> g(n, 0.0), gz, gg, gb;
    for (std::size_t i = 0; i < n; ++i) {
        g.assign(n, 0.0);
        g[i] = 1.0;
        bn_backward(g, cache, bn.gamma, gz, gg, gb);
        dev += std::abs(gz[i] - approx) / approx;
    }
    EXPECT_LE(dev / n, 3.0 / n);
}

TEST(Layer, ExactModeMatchesConventionalQuantizedLayer) {
    Rng rng(3);
    Layer L = conv_layer(6, pim::Scheme::bit_serial, Resolution::infinite(), 3);
    L.cfg.forward_scale = 1.0;
    L.has_bn = false;
    L.act = Activation::identity;
    Tensor x = random_tensor(rng, {2, 6, 5, 5}, -0.2, 1.2);
    ForwardContext ctx;
    const Tensor y = forward_layer(L, x, 1, ctx);

    auto Q = quant::quantize_weight(L.W, 4, 6);
    auto q = quant::quantize_activation(x, Resolution(4));
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t o = 0; o < 6; ++o)
            for (std::size_t h = 0; h < 5; ++h)
                for (std::size_t w = 0; w < 5; ++w) {
                    double acc = 0;
                    for (std::size_t c = 0; c < 6; ++c)
                        for (std::size_t i = 0; i < 3; ++i)
                            for (std::size_t j = 0; j < 3; ++j) {
                                const long hh = long(h + i) - 1, ww = long(w + j) - 1;
                                if (hh < 0 || ww < 0 || hh >= 5 || ww >= 5) continue;
                                acc += Q.scale * Q.q.data[((o * 6 + c) * 3 + i) * 3 + j] *
                                       q.data[((b * 6 + c) * 5 + hh) * 5 + ww];
                            }
                    EXPECT_NEAR(y[((b * 6 + o) * 5 + h) * 5 + w], acc, 1e-12);
                }
}

TEST(Layer, ZeroInputBatch) {
    Layer L = conv_layer(4, pim::Scheme::bit_serial, Resolution(4), 4);
    L.bn.beta = {0.3, -0.2, 1.5, 0.6};
    Tensor x({3, 4, 4, 4}, 0.0);
    const Tensor y = forward_layer(L, x, 1, train_ctx());
    EXPECT_EQ(L.last_xi, 1.0);
    for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t o = 0; o < 4; ++o)
            for (std::size_t s = 0; s < 16; ++s) EXPECT_EQ(y[(b * 4 + o) * 16 + s], std::clamp(L.bn.beta[o], 0.0, 1.0));
}

TEST(Layer, MeasuredXiMatchesRecomputedVarianceRatio) {
    Rng rng(5);
    Layer L = conv_layer(8, pim::Scheme::bit_serial, Resolution(4), 5);
    Tensor x = random_tensor(rng, {4, 8, 6, 6});
    forward_layer(L, x, 1, train_ctx());

    // Independent recomputation from the quantized operands.
    std::vector<std::uint8_t> codes(x.size());
    quant::quantize_activation_codes(x.span(), 4, codes);
    std::vector<std::int8_t> w(L.W.size());
    quant::quantize_weight_codes(L.W.span(), 4, 8, w);
    const std::size_t P = 4 * 36, K = 72;
    std::vector<std::uint8_t> A(P * K, 0);
    for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t h = 0; h < 6; ++h)
            for (std::size_t ww = 0; ww < 6; ++ww)
                for (std::size_t c = 0; c < 8; ++c)
                    for (std::size_t i = 0; i < 3; ++i)
                        for (std::size_t j = 0; j < 3; ++j) {
                            const long hh = long(h + i) - 1, wx = long(ww + j) - 1;
                            if (hh < 0 || wx < 0 || hh >= 6 || wx >= 6) continue;
                            A[((b * 6 + h) * 6 + ww) * K + (c * 3 + i) * 3 + j] = codes[((b * 8 + c) * 6 + hh) * 6 + wx];
                        }
    auto cfg = L.cfg;
    cfg.n_group = 4 * 9;
    const auto r = pim::pim_linear(A, w, P, 8, 8, 9, cfg);
    // Per output channel variance over all batch positions, pooled.
    auto pooled = [&](const std::vector<double>& v) {
        long double total = 0;
        for (std::size_t o = 0; o < 8; ++o) {
            long double m = 0, ss = 0;
            for (std::size_t p = 0; p < P; ++p) m += v[p * 8 + o];
            m /= P;
            for (std::size_t p = 0; p < P; ++p) ss += (v[p * 8 + o] - m) * (v[p * 8 + o] - m);
            total += ss;
        }
        return static_cast<double>(total);
    };
    const double xi = std::sqrt(pooled(r.value_pim) / pooled(r.value_exact));
    EXPECT_NEAR(L.last_xi, xi, 1e-12 * xi);
    EXPECT_GT(L.last_xi, 1.0);
}

TEST(Layer, ZeroGradientGivesZeroGradients) {
    Rng rng(6);
    Layer L = conv_layer(4, pim::Scheme::native, Resolution(5), 6);
    Tensor x = random_tensor(rng, {2, 4, 4, 4});
    Tensor y = forward_layer(L, x, 1, train_ctx());
    Tensor gx = backward_layer(L, Tensor(y.shape, 0.0));
    for (double v : gx.data) EXPECT_EQ(v, 0.0);
    for (double v : L.grad_W) EXPECT_EQ(v, 0.0);
    for (double v : L.grad_gamma) EXPECT_EQ(v, 0.0);
}

TEST(Layer, BackwardRequiresSavedContext) {
    Layer L = conv_layer(4, pim::Scheme::native, Resolution(5), 6);
    EXPECT_THROW(backward_layer(L, Tensor({1, 4, 4, 4})), Error);
}

TEST(Layer, BackwardIsXiTimesPlainBitExactly) {
    Rng rng(7);
    for (auto scheme : {pim::Scheme::native, pim::Scheme::differential, pim::Scheme::bit_serial}) {
        Layer L = conv_layer(8, scheme, Resolution(4), 7);
        L.xi_mode = XiMode::fixed;
        Tensor x = random_tensor(rng, {2, 8, 4, 4}, -0.1, 1.1);
        Tensor gy = random_tensor(rng, {2, 8, 4, 4}, -1, 1);
        L.xi_fixed = 1.0;
        Layer base = L;
        forward_layer(base, x, 1, train_ctx());
        const Tensor gx1 = backward_layer(base, gy);
        for (double xi : {2.5, 0.3}) {
            Layer s = L;
            s.xi_fixed = xi;
            forward_layer(s, x, 1, train_ctx());
            const Tensor gx = backward_layer(s, gy);
            for (std::size_t i = 0; i < gx.size(); ++i) ASSERT_EQ(gx[i], xi * gx1[i]);
            for (std::size_t i = 0; i < s.grad_W.size(); ++i) ASSERT_EQ(s.grad_W[i], xi * base.grad_W[i]);
            EXPECT_EQ(s.grad_gamma, base.grad_gamma);
        }
    }
}

TEST(Layer, BackwardIsSchemeIndependentForIdenticalOperands) {
    Rng rng(8);
    Tensor x = random_tensor(rng, {2, 8, 4, 4});
    Tensor gy = random_tensor(rng, {2, 8, 4, 4}, -1, 1);
    std::vector<double> ref_w, ref_x;
    for (auto scheme : {pim::Scheme::native, pim::Scheme::differential, pim::Scheme::bit_serial}) {
        Layer L = conv_layer(8, scheme, Resolution(3), 8);
        L.has_bn = false;
        L.act = Activation::identity;
        L.cfg.forward_scale = 1.0;
        L.xi_mode = XiMode::fixed;
        L.xi_fixed = 2.5;
        forward_layer(L, x, 1, train_ctx());
        const Tensor gx = backward_layer(L, gy);
        if (ref_w.empty()) {
            ref_w = L.grad_W;
            ref_x = gx.data;
        } else {
            EXPECT_EQ(L.grad_W, ref_w);
            EXPECT_EQ(gx.data, ref_x);
        }
    }
}

TEST(Model, FullPrecisionGradientsMatchFiniteDifferences) {
    Rng rng(9);
    PimSpec spec;
    Model m = make_mlp(5, {6, 7}, 3, spec, 9);
    for (auto& L : m.layers) {
        L.quantize = false;
        L.act = Activation::identity;
    }
    Tensor x = random_tensor(rng, {8, 5}, -1, 1);
    Tensor r = random_tensor(rng, {8, 3}, -1, 1);
    auto loss = [&](Model& mm) {
        ForwardContext c;
        c.bn = BnMode::batch;
        const Tensor y = mm.forward(x, c);
        double acc = 0;
        for (std::size_t i = 0; i < y.size(); ++i) acc += r[i] * y[i];
        return acc;
    };
    ForwardContext c;
    c.bn = BnMode::batch;
    c.keep_cache = true;
    m.forward(x, c);
    m.backward(r);
    const double h = 1e-6;
    const auto params = m.parameters();
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto& p = params[pi];
        for (std::size_t i = 0; i < p.value->size(); ++i) {
            Model a = m, b = m;
            (*a.parameters()[pi].value)[i] += h;
            (*b.parameters()[pi].value)[i] -= h;
            const double fd = (loss(a) - loss(b)) / (2 * h);
            const double an = (*p.grad)[i];
            EXPECT_LE(std::abs(fd - an), 1e-4 * std::max(1.0, std::abs(fd))) << p.name << "[" << i << "]";
        }
    }
}

TEST(Model, NanInputAbortsWithLayerIndex) {
    PimSpec spec;
    Model m = make_mlp(4, {8, 8}, 2, spec, 1);
    m.layers[1].W.data[0] = NAN;
    Tensor x({2, 4}, 0.5);
    try {
        m.forward(x, {});
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("element 0"), std::string::npos);
    }
    m = make_mlp(4, {8, 8}, 2, spec, 1);
    m.layers[2].bias[0] = INFINITY;
    try {
        m.forward(x, {});
        FAIL();
    } catch (const NumericalError& e) {
        EXPECT_EQ(e.layer(), 2u);
    }
}

TEST(Model, CheckpointRoundTrip) {
    PimSpec spec;
    spec.b_imc = Resolution(5);
    spec.scheme = pim::Scheme::differential;
    Model m = make_cnn4(3, 8, 10, spec, 42);
    m.layers[2].bn.running_mean[1] = 0.123456789012345678;
    const auto text = checkpoint_json(m);
    Model back = checkpoint_from_json(text);
    EXPECT_EQ(checkpoint_json(back), text);
    EXPECT_EQ(back.layers[2].W.data, m.layers[2].W.data);
    EXPECT_EQ(back.layers[1].cfg.forward_scale, 1000.0);
    EXPECT_THROW(checkpoint_from_json("{\"format\":\"other\"}"), Error);
}

TEST(Model, Cnn4ShapesAndEta) {
    PimSpec spec;
    spec.b_imc = Resolution(4);
    Model m = make_cnn4(3, 8, 10, spec, 1);
    ASSERT_EQ(m.layers.size(), 5u);
    EXPECT_FALSE(m.layers[0].pim_layer);
    EXPECT_EQ(m.layers[0].b_a, 8);
    EXPECT_EQ(m.layers[1].eta(), 30.0);
    EXPECT_FALSE(m.layers[4].pim_layer);
    Rng rng(2);
    Tensor x = random_tensor(rng, {2, 3, 8, 8});
    ForwardContext c;
    c.bn = BnMode::train;
    c.keep_cache = true;
    Tensor y = m.forward(x, c);
    EXPECT_EQ(y.shape, (Shape{2, 10}));
    Tensor g(y.shape, 0.1);
    Tensor gx = m.backward(g);
    EXPECT_EQ(gx.shape, x.shape);
}
