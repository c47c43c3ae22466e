#include "pimqat/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <sstream>

#include "pimqat/quant.hpp"

namespace pimqat::nn {

std::string to_string(Activation a) {
    switch (a) {
        case Activation::clipped_relu_01: return "clipped_relu_01";
        case Activation::relu: return "relu";
        case Activation::identity: return "identity";
    }
    return "?";
}

Activation activation_from_string(const std::string& s) {
    if (s == "clipped_relu_01") return Activation::clipped_relu_01;
    if (s == "relu") return Activation::relu;
    if (s == "identity") return Activation::identity;
    throw Error("unknown activation `" + s + "`");
}

// ---------------------------------------------------------------- batch norm

void bn_forward(const std::vector<double>& z, std::size_t B, std::size_t C, std::size_t S, BNState& bn, BnMode mode,
                std::vector<double>& y, BNCache* cache) {
    require(z.size() == B * C * S, "bn_forward: input size mismatch");
    require(bn.channels() == C, "bn_forward: channel count mismatch");
    y.resize(z.size());
    const std::size_t n = B * S;
    if (cache) {
        cache->B = B;
        cache->C = C;
        cache->S = S;
        cache->batch_stats = mode != BnMode::running;
        cache->xhat.resize(z.size());
        cache->inv_std.resize(C);
    }
    if (mode == BnMode::calibrate && bn.calib_mean.size() != C) {
        bn.calib_mean.assign(C, 0.0);
        bn.calib_var.assign(C, 0.0);
        bn.calib_batches = 0;
    }
    for (std::size_t c = 0; c < C; ++c) {
        double mean, var;
        if (mode == BnMode::running) {
            mean = bn.running_mean[c];
            var = bn.running_var[c];
        } else {
            double sum = 0.0;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t s = 0; s < S; ++s) sum += z[(b * C + c) * S + s];
            mean = sum / static_cast<double>(n);
            double ss = 0.0;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t s = 0; s < S; ++s) {
                    const double d = z[(b * C + c) * S + s] - mean;
                    ss += d * d;
                }
            var = ss / static_cast<double>(n);
            const double unbiased = n > 1 ? ss / static_cast<double>(n - 1) : var;
            if (mode == BnMode::train) {
                bn.running_mean[c] = (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * mean;
                bn.running_var[c] = (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * unbiased;
            } else if (mode == BnMode::calibrate) {
                bn.calib_mean[c] += mean;
                bn.calib_var[c] += unbiased;
            }
        }
        const double inv = 1.0 / std::sqrt(var + bn.eps);
        if (cache) cache->inv_std[c] = inv;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t s = 0; s < S; ++s) {
                const std::size_t i = (b * C + c) * S + s;
                const double xh = (z[i] - mean) * inv;
                if (cache) cache->xhat[i] = xh;
                y[i] = bn.gamma[c] * xh + bn.beta[c];
            }
    }
    if (mode == BnMode::calibrate) ++bn.calib_batches;
    if (mode == BnMode::train) bn.batch_size_last = B;
}

void bn_backward(const std::vector<double>& grad_y, const BNCache& cache, const std::vector<double>& gamma,
                 std::vector<double>& grad_z, std::vector<double>& grad_gamma, std::vector<double>& grad_beta) {
    const std::size_t B = cache.B, C = cache.C, S = cache.S, n = B * S;
    require(grad_y.size() == B * C * S, "bn_backward: gradient size mismatch");
    grad_z.assign(grad_y.size(), 0.0);
    grad_gamma.assign(C, 0.0);
    grad_beta.assign(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t s = 0; s < S; ++s) {
                const std::size_t i = (b * C + c) * S + s;
                sum_g += grad_y[i];
                sum_gx += grad_y[i] * cache.xhat[i];
            }
        grad_gamma[c] = sum_gx;
        grad_beta[c] = sum_g;
        if (!cache.batch_stats) {
            const double k = gamma[c] * cache.inv_std[c];
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t s = 0; s < S; ++s) grad_z[(b * C + c) * S + s] = k * grad_y[(b * C + c) * S + s];
            continue;
        }
        const double k = gamma[c] * cache.inv_std[c] / static_cast<double>(n);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t s = 0; s < S; ++s) {
                const std::size_t i = (b * C + c) * S + s;
                grad_z[i] = k * (static_cast<double>(n) * grad_y[i] - sum_g - cache.xhat[i] * sum_gx);
            }
    }
}

// ---------------------------------------------------------------- helpers

double std_ratio(const std::vector<double>& a, const std::vector<double>& b, std::size_t cols) {
    require(a.size() == b.size(), "std_ratio: size mismatch");
    require(cols >= 1 && a.size() % cols == 0, "std_ratio: size is not a multiple of the column count");
    const std::size_t rows = a.size() / cols;
    if (rows == 0) return 1.0;
    // Sum over columns of the within-column variance, each column centred on its own mean.
    auto pooled = [&](const std::vector<double>& v) {
        std::vector<double> mean(cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) mean[c] += v[r * cols + c];
        for (auto& m : mean) m /= static_cast<double>(rows);
        double s = 0.0;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                const double d = v[r * cols + c] - mean[c];
                s += d * d;
            }
        return s;
    };
    const double vb = pooled(b);
    if (vb == 0.0) return 1.0;
    return std::sqrt(pooled(a) / vb);
}

namespace {

template <class T>
void im2col(const T* x, std::size_t B, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::size_t pad,
            std::size_t OH, std::size_t OW, T* out) {
    const std::size_t K = C * k * k;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t oh = 0; oh < OH; ++oh)
            for (std::size_t ow = 0; ow < OW; ++ow) {
                T* row = out + ((b * OH + oh) * OW + ow) * K;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < k; ++i)
                        for (std::size_t j = 0; j < k; ++j) {
                            const auto h = static_cast<std::ptrdiff_t>(oh + i) - static_cast<std::ptrdiff_t>(pad);
                            const auto w = static_cast<std::ptrdiff_t>(ow + j) - static_cast<std::ptrdiff_t>(pad);
                            T v{};
                            if (h >= 0 && w >= 0 && h < static_cast<std::ptrdiff_t>(H) && w < static_cast<std::ptrdiff_t>(W))
                                v = x[((b * C + c) * H + h) * W + w];
                            row[(c * k + i) * k + j] = v;
                        }
            }
}

void col2im(const double* cols, std::size_t B, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t pad, std::size_t OH, std::size_t OW, double* x) {
    const std::size_t K = C * k * k;
    std::fill(x, x + B * C * H * W, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t oh = 0; oh < OH; ++oh)
            for (std::size_t ow = 0; ow < OW; ++ow) {
                const double* row = cols + ((b * OH + oh) * OW + ow) * K;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < k; ++i)
                        for (std::size_t j = 0; j < k; ++j) {
                            const auto h = static_cast<std::ptrdiff_t>(oh + i) - static_cast<std::ptrdiff_t>(pad);
                            const auto w = static_cast<std::ptrdiff_t>(ow + j) - static_cast<std::ptrdiff_t>(pad);
                            if (h >= 0 && w >= 0 && h < static_cast<std::ptrdiff_t>(H) && w < static_cast<std::ptrdiff_t>(W))
                                x[((b * C + c) * H + h) * W + w] += row[(c * k + i) * k + j];
                        }
            }
}

double apply_act(Activation a, double v) {
    switch (a) {
        case Activation::clipped_relu_01: return std::clamp(v, 0.0, 1.0);
        case Activation::relu: return std::max(v, 0.0);
        case Activation::identity: return v;
    }
    return v;
}

double act_grad(Activation a, double v) {
    switch (a) {
        case Activation::clipped_relu_01: return (v > 0.0 && v < 1.0) ? 1.0 : 0.0;
        case Activation::relu: return v > 0.0 ? 1.0 : 0.0;
        case Activation::identity: return 1.0;
    }
    return 1.0;
}

}  // namespace

// ---------------------------------------------------------------- layer

Tensor forward_layer(Layer& L, const Tensor& x, std::size_t index, const ForwardContext& ctx) {
    auto& cache = L.cache;
    cache.valid = false;
    std::size_t B, H = 1, W = 1;
    if (L.kind == LayerKind::conv) {
        require(x.rank() == 4 && x.dim(1) == L.in_ch,
                "layer " + std::to_string(index) + ": expected [B, " + std::to_string(L.in_ch) + ", H, W], got " +
                    shape_str(x.shape));
        B = x.dim(0);
        H = x.dim(2);
        W = x.dim(3);
    } else {
        require(x.rank() == 2 && x.dim(1) == L.in_ch,
                "layer " + std::to_string(index) + ": expected [B, " + std::to_string(L.in_ch) + "], got " +
                    shape_str(x.shape));
        B = x.dim(0);
    }
    require(H + 2 * L.pad >= L.ksize && W + 2 * L.pad >= L.ksize, "layer input smaller than kernel");
    const std::size_t OH = L.kind == LayerKind::conv ? H + 2 * L.pad - L.ksize + 1 : 1;
    const std::size_t OW = L.kind == LayerKind::conv ? W + 2 * L.pad - L.ksize + 1 : 1;
    const std::size_t S = OH * OW, P = B * S, K = L.fan_in(), O = L.out_ch;

    std::vector<double> ypim;  // [P, O], unscaled MAC output
    std::vector<double> yexact;
    double s = 1.0;
    std::vector<double> w_eff(O * K);
    std::vector<std::uint8_t> acodes;
    std::vector<double> areal;
    std::vector<std::uint8_t> pass;

    if (L.quantize) {
        std::vector<std::uint8_t> xcodes(x.size());
        quant::quantize_activation_codes(x.span(), L.b_a, xcodes);
        if (ctx.keep_cache) {
            pass.resize(x.size());
            for (std::size_t i = 0; i < x.size(); ++i) pass[i] = (x[i] >= 0.0 && x[i] <= 1.0) ? 1 : 0;
        }
        if (L.kind == LayerKind::conv) {
            acodes.resize(P * K);
            im2col(xcodes.data(), B, L.in_ch, H, W, L.ksize, L.pad, OH, OW, acodes.data());
        } else {
            acodes = std::move(xcodes);
        }
        std::vector<std::int8_t> wcodes(O * K);
        s = quant::quantize_weight_codes(L.W.span(), L.b_w, O, wcodes);
        const double den = static_cast<double>((1 << (L.b_w - 1)) - 1);
        for (std::size_t i = 0; i < w_eff.size(); ++i) w_eff[i] = s * (wcodes[i] / den);

        pim::PimConfig cfg = L.cfg;
        cfg.b_w = L.b_w;
        cfg.b_a = L.b_a;
        if (!L.pim_layer) {
            cfg.b_imc = Resolution::infinite();
            cfg.nonideal.reset();
            cfg.unit_in_channels = L.in_ch;
        } else if (ctx.iface) {
            if (ctx.iface->b_imc) cfg.b_imc = *ctx.iface->b_imc;
            cfg.nonideal = ctx.iface->nonideal;
        }
        cfg.n_group = cfg.unit_in_channels * L.kernel_area();
        const bool want_exact = ctx.want_exact || ctx.keep_cache;
        auto r = pim::pim_linear(acodes, wcodes, P, O, L.in_ch, L.kernel_area(), cfg, {want_exact, {index, ctx.tick}});
        ypim = std::move(r.value_pim);
        yexact = std::move(r.value_exact);
    } else {
        areal.resize(P * K);
        if (L.kind == LayerKind::conv)
            im2col(x.data.data(), B, L.in_ch, H, W, L.ksize, L.pad, OH, OW, areal.data());
        else
            areal = x.data;
        w_eff = L.W.data;
        ypim.assign(P * O, 0.0);
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t o = 0; o < O; ++o) {
                double acc = 0.0;
                for (std::size_t k = 0; k < K; ++k) acc += areal[p * K + k] * w_eff[o * K + k];
                ypim[p * O + o] = acc;
            }
        yexact = ypim;
    }

    if (!yexact.empty()) L.last_rho = std_ratio(ypim, yexact, O);
    if (ctx.keep_cache) L.last_xi = L.xi_mode == XiMode::fixed ? L.xi_fixed : L.last_rho;

    // z = eta * s * y, laid out [B, O, S].
    const double gain = L.eta() * s;
    std::vector<double> z(B * O * S);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t sp = 0; sp < S; ++sp)
            for (std::size_t o = 0; o < O; ++o) {
                double v = gain * ypim[(b * S + sp) * O + o];
                if (L.has_bias) v += L.bias[o];
                z[(b * O + o) * S + sp] = v;
            }
    for (double v : z)
        if (!std::isfinite(v)) throw NumericalError(index, "(pre-normalization output)");

    std::vector<double> pre;
    if (L.has_bn)
        bn_forward(z, B, O, S, L.bn, ctx.bn, pre, ctx.keep_cache ? &cache.bn : nullptr);
    else
        pre = std::move(z);

    std::vector<double> a(pre.size());
    for (std::size_t i = 0; i < pre.size(); ++i) a[i] = apply_act(L.act, pre[i]);

    Tensor out;
    std::vector<std::uint32_t> arg;
    if (L.pool == Pool::none) {
        out = L.kind == LayerKind::conv ? Tensor({B, O, OH, OW}, std::move(a)) : Tensor({B, O}, std::move(a));
    } else if (L.pool == Pool::global_avg) {
        std::vector<double> g(B * O);
        for (std::size_t i = 0; i < B * O; ++i) {
            double acc = 0.0;
            for (std::size_t sp = 0; sp < S; ++sp) acc += a[i * S + sp];
            g[i] = acc / static_cast<double>(S);
        }
        out = Tensor({B, O}, std::move(g));
    } else {
        require(OH % 2 == 0 && OW % 2 == 0, "max pooling needs even spatial size");
        const std::size_t PH = OH / 2, PW = OW / 2;
        std::vector<double> m(B * O * PH * PW);
        arg.resize(m.size());
        for (std::size_t bc = 0; bc < B * O; ++bc)
            for (std::size_t i = 0; i < PH; ++i)
                for (std::size_t j = 0; j < PW; ++j) {
                    std::uint32_t best = static_cast<std::uint32_t>((2 * i) * OW + 2 * j);
                    for (std::size_t di = 0; di < 2; ++di)
                        for (std::size_t dj = 0; dj < 2; ++dj) {
                            const auto idx = static_cast<std::uint32_t>((2 * i + di) * OW + 2 * j + dj);
                            if (a[bc * S + idx] > a[bc * S + best]) best = idx;
                        }
                    m[(bc * PH + i) * PW + j] = a[bc * S + best];
                    arg[(bc * PH + i) * PW + j] = best;
                }
        out = Tensor({B, O, PH, PW}, std::move(m));
    }

    if (ctx.keep_cache) {
        cache.in_shape = x.shape;
        cache.out_shape = out.shape;
        cache.P = P;
        cache.K = K;
        cache.OH = OH;
        cache.OW = OW;
        cache.act_codes = std::move(acodes);
        cache.act_real = std::move(areal);
        cache.in_pass = std::move(pass);
        cache.w_eff = std::move(w_eff);
        cache.pre_act = std::move(pre);
        cache.pool_arg = std::move(arg);
        cache.valid = true;
    }
    return out;
}

Tensor backward_layer(Layer& L, const Tensor& grad_y) {
    auto& cache = L.cache;
    require(cache.valid, "backward_layer: no saved forward context (run forward with keep_cache)");
    require(grad_y.shape == cache.out_shape, "backward_layer: gradient shape " + shape_str(grad_y.shape) +
                                                 " does not match output " + shape_str(cache.out_shape));
    const std::size_t B = cache.in_shape[0], O = L.out_ch, S = cache.OH * cache.OW, P = cache.P, K = cache.K;

    // Undo pooling.
    std::vector<double> g(B * O * S, 0.0);
    if (L.pool == Pool::none) {
        g = grad_y.data;
    } else if (L.pool == Pool::global_avg) {
        for (std::size_t i = 0; i < B * O; ++i)
            for (std::size_t sp = 0; sp < S; ++sp) g[i * S + sp] = grad_y[i] / static_cast<double>(S);
    } else {
        const std::size_t PS = S / 4;
        for (std::size_t bc = 0; bc < B * O; ++bc)
            for (std::size_t q = 0; q < PS; ++q) g[bc * S + cache.pool_arg[bc * PS + q]] += grad_y[bc * PS + q];
    }
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= act_grad(L.act, cache.pre_act[i]);

    std::vector<double> gz;
    if (L.has_bn) {
        bn_backward(g, cache.bn, L.bn.gamma, gz, L.grad_gamma, L.grad_beta);
    } else {
        gz = std::move(g);
    }

    if (L.has_bias) {
        L.grad_bias.assign(O, 0.0);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o = 0; o < O; ++o)
                for (std::size_t sp = 0; sp < S; ++sp) L.grad_bias[o] += gz[(b * O + o) * S + sp];
    }

    // G = dL/dz~ in [P, O]; z = eta * z~.
    std::vector<double> G(P * O);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t sp = 0; sp < S; ++sp) G[(b * S + sp) * O + o] = L.eta() * gz[(b * O + o) * S + sp];

    // The plain bilinear backward is formed first; xi multiplies the finished
    // gradients so a layer with xi is bit-exactly xi times the same layer with 1.
    std::vector<double> gcols;
    const double xi = L.quantize ? L.last_xi : 1.0;
    if (L.quantize) {
        auto r = pim::gste_backward(G, cache.act_codes, static_cast<double>((1 << L.b_a) - 1), cache.w_eff, P, O, K,
                                    1.0);
        L.grad_W = std::move(r.grad_Q);
        for (auto& v : L.grad_W) v *= xi;
        gcols = std::move(r.grad_q);
    } else {
        L.grad_W.assign(O * K, 0.0);
        gcols.assign(P * K, 0.0);
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t o = 0; o < O; ++o) {
                const double gv = G[p * O + o];
                for (std::size_t k = 0; k < K; ++k) {
                    L.grad_W[o * K + k] += gv * cache.act_real[p * K + k];
                    gcols[p * K + k] += gv * cache.w_eff[o * K + k];
                }
            }
    }

    Tensor gx(cache.in_shape);
    if (L.kind == LayerKind::conv)
        col2im(gcols.data(), B, L.in_ch, cache.in_shape[2], cache.in_shape[3], L.ksize, L.pad, cache.OH, cache.OW,
               gx.data.data());
    else
        gx.data = std::move(gcols);
    if (L.quantize)
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = cache.in_pass[i] ? xi * gx[i] : 0.0;
    return gx;
}

// ---------------------------------------------------------------- model

Tensor Model::forward(const Tensor& x, const ForwardContext& ctx) {
    Tensor h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) h = forward_layer(layers[i], h, i, ctx);
    return h;
}

Tensor Model::backward(const Tensor& grad_logits) {
    Tensor g = grad_logits;
    for (std::size_t i = layers.size(); i-- > 0;) g = backward_layer(layers[i], g);
    return g;
}

std::vector<ParamRef> Model::parameters() {
    std::vector<ParamRef> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        auto& L = layers[i];
        const std::string p = "layer" + std::to_string(i) + ".";
        out.push_back({p + "W", &L.W.data, &L.grad_W});
        if (L.has_bias) out.push_back({p + "bias", &L.bias, &L.grad_bias});
        if (L.has_bn) {
            out.push_back({p + "gamma", &L.bn.gamma, &L.grad_gamma});
            out.push_back({p + "beta", &L.bn.beta, &L.grad_beta});
        }
    }
    return out;
}

void Model::zero_grad() {
    for (auto& L : layers) {
        L.grad_W.assign(L.W.size(), 0.0);
        L.grad_bias.assign(L.bias.size(), 0.0);
        L.grad_gamma.assign(L.bn.channels(), 0.0);
        L.grad_beta.assign(L.bn.channels(), 0.0);
    }
}

void kaiming_init(Layer& L, Rng& rng) {
    const double sd = std::sqrt(2.0 / static_cast<double>(L.fan_in()));
    for (auto& w : L.W.data) w = rng.normal(0.0, sd);
    if (L.has_bias) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(L.fan_in()));
        for (auto& b : L.bias) b = rng.uniform(-bound, bound);
    }
}

namespace {

Layer make_layer(LayerKind kind, std::size_t in, std::size_t out, std::size_t k, int b_w, int b_a) {
    Layer L;
    L.kind = kind;
    L.in_ch = in;
    L.out_ch = out;
    L.ksize = k;
    L.pad = k / 2;
    L.b_w = b_w;
    L.b_a = b_a;
    L.W = kind == LayerKind::conv ? Tensor({out, in, k, k}) : Tensor({out, in});
    L.bn = BNState(out);
    return L;
}

void apply_pim_spec(Layer& L, const PimSpec& spec) {
    L.pim_layer = true;
    L.cfg.scheme = spec.scheme;
    L.cfg.b_imc = spec.pim ? spec.b_imc : Resolution::infinite();
    L.cfg.dac_bits = spec.dac_bits;
    L.cfg.unit_in_channels = spec.unit_in_channels;
    L.cfg.unit_out_channels = spec.unit_out_channels;
    L.cfg.forward_scale = spec.eta.value_or(pim::default_forward_scale(spec.scheme, L.cfg.b_imc));
    L.xi_mode = spec.xi_mode;
    L.xi_fixed = spec.xi_fixed;
}

Layer classifier(std::size_t in, std::size_t classes, int b_w, int b_a) {
    Layer fc = make_layer(LayerKind::dense, in, classes, 1, b_w, b_a);
    fc.has_bias = true;
    fc.bias.assign(classes, 0.0);
    fc.has_bn = false;
    fc.bn = BNState(0);
    fc.act = Activation::identity;
    return fc;
}

}  // namespace

Model make_cnn4(std::size_t in_channels, std::size_t width, std::size_t classes, const PimSpec& spec,
                std::uint64_t seed, int b_w, int b_a) {
    Model m;
    m.arch = "cnn4";
    m.seed = seed;
    Layer l0 = make_layer(LayerKind::conv, in_channels, width, 3, b_w, 8);
    l0.pool = Pool::max2;
    m.layers.push_back(std::move(l0));
    Layer l1 = make_layer(LayerKind::conv, width, width, 3, b_w, b_a);
    apply_pim_spec(l1, spec);
    l1.pool = Pool::max2;
    Layer l2 = make_layer(LayerKind::conv, width, 2 * width, 3, b_w, b_a);
    apply_pim_spec(l2, spec);
    l2.pool = Pool::max2;
    Layer l3 = make_layer(LayerKind::conv, 2 * width, 2 * width, 3, b_w, b_a);
    apply_pim_spec(l3, spec);
    l3.pool = Pool::global_avg;
    m.layers.push_back(std::move(l1));
    m.layers.push_back(std::move(l2));
    m.layers.push_back(std::move(l3));
    m.layers.push_back(classifier(2 * width, classes, b_w, b_a));
    Rng rng(seed);
    for (auto& L : m.layers) kaiming_init(L, rng);
    return m;
}

Model make_mlp(std::size_t in_features, const std::vector<std::size_t>& hidden, std::size_t classes,
               const PimSpec& spec, std::uint64_t seed, int b_w, int b_a) {
    require(!hidden.empty(), "make_mlp: at least one hidden layer");
    Model m;
    m.arch = "mlp";
    m.seed = seed;
    m.layers.push_back(make_layer(LayerKind::dense, in_features, hidden[0], 1, b_w, 8));
    for (std::size_t i = 1; i < hidden.size(); ++i) {
        Layer L = make_layer(LayerKind::dense, hidden[i - 1], hidden[i], 1, b_w, b_a);
        apply_pim_spec(L, spec);
        m.layers.push_back(std::move(L));
    }
    m.layers.push_back(classifier(hidden.back(), classes, b_w, b_a));
    Rng rng(seed);
    for (auto& L : m.layers) kaiming_init(L, rng);
    return m;
}

double softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels, Tensor& grad, std::size_t& correct) {
    require(logits.rank() == 2 && logits.dim(0) == labels.size(), "softmax_cross_entropy: shape mismatch");
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    grad = Tensor({B, C});
    correct = 0;
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const double* z = logits.data.data() + b * C;
        const std::size_t y = static_cast<std::size_t>(labels[b]);
        require(y < C, "softmax_cross_entropy: label out of range");
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (z[c] > z[best]) best = c;
        if (best == y) ++correct;
        double sum = 0.0;
        for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - z[best]);
        loss += std::log(sum) - (z[y] - z[best]);
        for (std::size_t c = 0; c < C; ++c) {
            const double pc = std::exp(z[c] - z[best]) / sum;
            grad[b * C + c] = (pc - (c == y ? 1.0 : 0.0)) / static_cast<double>(B);
        }
    }
    return loss / static_cast<double>(B);
}

std::vector<int> argmax_rows(const Tensor& logits) {
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    std::vector<int> out(B);
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (logits[b * C + c] > logits[b * C + best]) best = c;
        out[b] = static_cast<int>(best);
    }
    return out;
}

// ---------------------------------------------------------------- checkpoint

namespace {

using json = nlohmann::json;

const char* pool_name(Pool p) {
    switch (p) {
        case Pool::none: return "none";
        case Pool::max2: return "max2";
        case Pool::global_avg: return "global_avg";
    }
    return "none";
}

Pool pool_from(const std::string& s) {
    if (s == "none") return Pool::none;
    if (s == "max2") return Pool::max2;
    if (s == "global_avg") return Pool::global_avg;
    throw Error("checkpoint: unknown pool `" + s + "`");
}

}  // namespace

std::string checkpoint_json(const Model& m) {
    json j;
    j["format"] = "pimqat-checkpoint";
    j["version"] = 1;
    j["arch"] = m.arch;
    j["seed"] = m.seed;
    j["layers"] = json::array();
    for (const auto& L : m.layers) {
        json l;
        l["kind"] = L.kind == LayerKind::conv ? "conv" : "dense";
        l["in_ch"] = L.in_ch;
        l["out_ch"] = L.out_ch;
        l["ksize"] = L.ksize;
        l["pad"] = L.pad;
        l["quantize"] = L.quantize;
        l["b_w"] = L.b_w;
        l["b_a"] = L.b_a;
        l["pim_layer"] = L.pim_layer;
        l["pim"] = {{"scheme", pim::to_string(L.cfg.scheme)},
                    {"b_imc", L.cfg.b_imc.bits()},
                    {"dac_bits", L.cfg.dac_bits},
                    {"unit_in_channels", L.cfg.unit_in_channels},
                    {"unit_out_channels", L.cfg.unit_out_channels},
                    {"forward_scale", L.cfg.forward_scale}};
        l["has_bias"] = L.has_bias;
        l["has_bn"] = L.has_bn;
        l["activation"] = to_string(L.act);
        l["pool"] = pool_name(L.pool);
        l["xi_mode"] = L.xi_mode == XiMode::fixed ? "fixed" : "measured";
        l["xi_fixed"] = L.xi_fixed;
        l["W"] = {{"shape", L.W.shape}, {"data", L.W.data}};
        l["bias"] = L.bias;
        l["bn"] = {{"gamma", L.bn.gamma},
                   {"beta", L.bn.beta},
                   {"running_mean", L.bn.running_mean},
                   {"running_var", L.bn.running_var},
                   {"momentum", L.bn.momentum},
                   {"eps", L.bn.eps}};
        j["layers"].push_back(std::move(l));
    }
    return j.dump();
}

Model checkpoint_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw Error(std::string("checkpoint: ") + e.what());
    }
    if (j.value("format", "") != "pimqat-checkpoint") throw Error("checkpoint: not a pimqat checkpoint");
    if (j.value("version", 0) != 1) throw Error("checkpoint: unsupported version");
    Model m;
    try {
        m.arch = j.at("arch");
        m.seed = j.at("seed");
        for (const auto& l : j.at("layers")) {
            Layer L;
            L.kind = l.at("kind") == "conv" ? LayerKind::conv : LayerKind::dense;
            L.in_ch = l.at("in_ch");
            L.out_ch = l.at("out_ch");
            L.ksize = l.at("ksize");
            L.pad = l.at("pad");
            L.quantize = l.at("quantize");
            L.b_w = l.at("b_w");
            L.b_a = l.at("b_a");
            L.pim_layer = l.at("pim_layer");
            const auto& p = l.at("pim");
            L.cfg.scheme = pim::scheme_from_string(p.at("scheme"));
            const int bimc = p.at("b_imc");
            L.cfg.b_imc = bimc == 0 ? Resolution::infinite() : Resolution(bimc);
            L.cfg.dac_bits = p.at("dac_bits");
            L.cfg.unit_in_channels = p.at("unit_in_channels");
            L.cfg.unit_out_channels = p.at("unit_out_channels");
            L.cfg.forward_scale = p.at("forward_scale");
            L.has_bias = l.at("has_bias");
            L.has_bn = l.at("has_bn");
            L.act = activation_from_string(l.at("activation"));
            L.pool = pool_from(l.at("pool"));
            L.xi_mode = l.at("xi_mode") == "fixed" ? XiMode::fixed : XiMode::measured;
            L.xi_fixed = l.at("xi_fixed");
            L.W = Tensor(l.at("W").at("shape").get<Shape>(), l.at("W").at("data").get<std::vector<double>>());
            L.bias = l.at("bias").get<std::vector<double>>();
            const auto& bn = l.at("bn");
            L.bn.gamma = bn.at("gamma").get<std::vector<double>>();
            L.bn.beta = bn.at("beta").get<std::vector<double>>();
            L.bn.running_mean = bn.at("running_mean").get<std::vector<double>>();
            L.bn.running_var = bn.at("running_var").get<std::vector<double>>();
            L.bn.momentum = bn.at("momentum");
            L.bn.eps = bn.at("eps");
            m.layers.push_back(std::move(L));
        }
    } catch (const json::exception& e) {
        throw Error(std::string("checkpoint: ") + e.what());
    }
    return m;
}

void save_checkpoint(const Model& m, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out << checkpoint_json(m) << "\n";
}

Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open checkpoint " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return checkpoint_from_json(ss.str());
}

}  // namespace pimqat::nn
