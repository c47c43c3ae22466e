#include "pimqat/pim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

#include "pimqat/parallel.hpp"
#include "pimqat/simd/kernels.hpp"

namespace pimqat::pim {

namespace {
std::atomic<unsigned> g_threads{1};
}

void set_num_threads(unsigned n) { g_threads = std::max(1u, n); }
unsigned num_threads() { return g_threads; }

std::string to_string(Scheme s) {
    switch (s) {
        case Scheme::native: return "native";
        case Scheme::differential: return "differential";
        case Scheme::bit_serial: return "bit_serial";
    }
    return "?";
}

Scheme scheme_from_string(const std::string& s) {
    if (s == "native") return Scheme::native;
    if (s == "differential") return Scheme::differential;
    if (s == "bit_serial" || s == "bit-serial") return Scheme::bit_serial;
    throw Error("unknown scheme `" + s + "` (expected native, differential or bit_serial)");
}

void PimConfig::validate() const {
    require(n_group >= 1, "PimConfig: n_group must be positive");
    require(b_w >= 2 && b_w <= 8, "PimConfig: b_w must be in [2, 8]");
    require(b_a >= 1 && b_a <= 8, "PimConfig: b_a must be in [1, 8]");
    require(dac_bits >= 1 && b_a % dac_bits == 0,
            "PimConfig: dac_bits=" + std::to_string(dac_bits) + " must divide b_a=" + std::to_string(b_a));
    require(b_imc.is_infinite() || (b_imc.bits() >= 1 && b_imc.bits() <= 16), "PimConfig: b_imc must be in [1, 16]");
    require(unit_in_channels >= 1 && unit_out_channels >= 1, "PimConfig: unit channel counts must be positive");
    require(forward_scale > 0.0 && std::isfinite(forward_scale), "PimConfig: forward_scale must be positive");
    if (nonideal && nonideal->active()) {
        require(!b_imc.is_infinite(), "PimConfig: non-ideal interface needs a finite b_imc");
        if (nonideal->curves) {
            require(nonideal->curves->size() >= 1, "PimConfig: empty curve bank");
            require(nonideal->curves->bits() == b_imc.bits(),
                    "PimConfig: curve bits " + std::to_string(nonideal->curves->bits()) + " do not match b_imc " +
                        b_imc.str());
        }
        require(nonideal->noise.sigma_lsb >= 0.0 && std::isfinite(nonideal->noise.sigma_lsb),
                "PimConfig: noise sigma must be finite and non-negative");
    }
}

std::size_t PimConfig::conversions_per_group() const {
    const std::size_t L = static_cast<std::size_t>(b_a / dac_bits);
    switch (scheme) {
        case Scheme::native: return L;
        case Scheme::differential: return 2 * L;
        case Scheme::bit_serial: return static_cast<std::size_t>(b_w) * L;
    }
    return L;
}

double default_forward_scale(Scheme scheme, Resolution b_imc) {
    if (b_imc.is_infinite() || b_imc.bits() >= 8) return 1.0;
    const int b = b_imc.bits();
    switch (scheme) {
        case Scheme::native:
            if (b <= 3) return 100.0;
            if (b == 4) return 20.0;
            return 1.0;
        case Scheme::differential: return 1000.0;
        case Scheme::bit_serial:
            if (b <= 3) return 100.0;
            if (b <= 6) return 30.0;
            return 1.03;
    }
    return 1.0;
}

std::pair<std::int64_t, std::int64_t> code_range(const PimConfig& cfg) {
    require(!cfg.b_imc.is_infinite(), "code_range: infinite b_imc has no codes");
    const std::int64_t M = cfg.b_imc.max_code();
    return {cfg.scheme == Scheme::native ? -M : 0, M};
}

namespace {

struct Constants {
    std::int64_t M = 0;       // 2^b_imc - 1
    std::int64_t Ma = 0;      // 2^b_a - 1
    std::int64_t Dw = 0;      // 2^(b_w-1) - 1
    std::int64_t delta = 0;   // 2^m
    std::int64_t level_den = 0;  // denominator of the analog level
    std::int64_t out_num = 0, out_den = 0;  // value = R * out_num / out_den
    int L = 0;

    Constants(const PimConfig& cfg, std::size_t N) {
        Ma = (std::int64_t{1} << cfg.b_a) - 1;
        Dw = (std::int64_t{1} << (cfg.b_w - 1)) - 1;
        delta = std::int64_t{1} << cfg.dac_bits;
        L = cfg.b_a / cfg.dac_bits;
        if (cfg.b_imc.is_infinite()) return;
        M = cfg.b_imc.max_code();
        const std::int64_t base = static_cast<std::int64_t>(N) * (delta - 1);
        out_num = base;
        if (cfg.scheme == Scheme::bit_serial) {
            level_den = base;
            out_den = M * Dw * Ma;
        } else {
            level_den = base * Dw;
            out_den = M * Ma;
        }
    }

    double value(std::int64_t R) const {
        return static_cast<double>(R * out_num) / static_cast<double>(out_den);
    }
};

// One conversion of the integer partial sum S (level = M*S / level_den).
struct Converter {
    const Constants& k;
    std::int64_t lo, hi;
    bool signed_levels;
    const GroupInterface& io;

    std::int64_t operator()(std::int64_t S, std::uint64_t c) const {
        if (!io.curve && io.noise.sigma <= 0.0) return div_round_half_away(S * k.M, k.level_den);
        const double a = static_cast<double>(S * k.M) / static_cast<double>(k.level_den);
        return nonideal::apply_interface(a, io.curve, io.noise(c), lo, hi, signed_levels);
    }
};

void check_group(const quant::BitPlanes& q_planes, const PimConfig& cfg) {
    cfg.validate();
    require(q_planes.kind == quant::PlaneKind::activation_slices, "mac: activation planes expected");
    require(q_planes.slice_bits == cfg.dac_bits && static_cast<int>(q_planes.count()) == cfg.b_a / cfg.dac_bits,
            "mac: activation planes do not match b_a/dac_bits of the config");
    require(q_planes.length() == cfg.n_group, "mac: group length " + std::to_string(q_planes.length()) +
                                                  " does not match n_group " + std::to_string(cfg.n_group));
}

std::vector<std::int64_t> activation_codes(const quant::BitPlanes& q) {
    std::vector<std::int64_t> a(q.length(), 0);
    for (std::size_t k = 0; k < q.count(); ++k)
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += q.plane_weights[k] * q.planes[k][i];
    return a;
}

const std::vector<std::int32_t>& signed_codes(const quant::QTensor& Q, const PimConfig& cfg) {
    require(Q.codes.has_value(), "mac: weight tensor carries no codes");
    require(Q.range == quant::Range::unit_signed && Q.bits == Resolution(cfg.b_w),
            "mac: weights must be b_w-bit unit_signed codes");
    require(Q.size() == cfg.n_group,
            "mac: group length " + std::to_string(Q.size()) + " does not match n_group " + std::to_string(cfg.n_group));
    return *Q.codes;
}

}  // namespace

MacGroupResult mac_native(const quant::QTensor& Q, const quant::BitPlanes& q_planes, const PimConfig& cfg,
                          const GroupInterface& io) {
    check_group(q_planes, cfg);
    require(cfg.scheme == Scheme::native, "mac_native: config scheme is " + to_string(cfg.scheme));
    const auto& Qc = signed_codes(Q, cfg);
    const Constants k(cfg, cfg.n_group);
    const auto acodes = activation_codes(q_planes);

    MacGroupResult r;
    std::int64_t E = 0;
    for (std::size_t i = 0; i < Qc.size(); ++i) E += Qc[i] * acodes[i];
    r.value_exact = static_cast<double>(E) / static_cast<double>(k.Dw * k.Ma);
    if (cfg.b_imc.is_infinite()) {
        r.value_pim = r.value_exact;
        return r;
    }
    const Converter conv{k, -k.M, k.M, true, io};
    r.adc_codes.assign(1, std::vector<std::int64_t>(k.L));
    std::int64_t R = 0, scale = 1;
    for (int l = 0; l < k.L; ++l, scale *= k.delta) {
        std::int64_t S = 0;
        for (std::size_t i = 0; i < Qc.size(); ++i) S += Qc[i] * q_planes.planes[l][i];
        const auto code = conv(S, static_cast<std::uint64_t>(l));
        r.adc_codes[0][l] = code;
        R += scale * code;
    }
    r.recombined = R;
    r.value_pim = k.value(R);
    return r;
}

MacGroupResult mac_differential(const quant::QTensor& Q, const quant::BitPlanes& q_planes, const PimConfig& cfg,
                                const GroupInterface& io) {
    check_group(q_planes, cfg);
    require(cfg.scheme == Scheme::differential, "mac_differential: config scheme is " + to_string(cfg.scheme));
    const auto& Qc = signed_codes(Q, cfg);
    const Constants k(cfg, cfg.n_group);
    const auto acodes = activation_codes(q_planes);

    MacGroupResult r;
    std::int64_t E = 0;
    for (std::size_t i = 0; i < Qc.size(); ++i) E += Qc[i] * acodes[i];
    r.value_exact = static_cast<double>(E) / static_cast<double>(k.Dw * k.Ma);
    if (cfg.b_imc.is_infinite()) {
        r.value_pim = r.value_exact;
        return r;
    }
    const Converter conv{k, 0, k.M, false, io};
    r.adc_codes.assign(2, std::vector<std::int64_t>(k.L));
    std::int64_t R = 0, scale = 1;
    for (int l = 0; l < k.L; ++l, scale *= k.delta) {
        std::int64_t Sp = 0, Sm = 0;
        for (std::size_t i = 0; i < Qc.size(); ++i) {
            const std::int64_t d = q_planes.planes[l][i];
            if (Qc[i] > 0) Sp += Qc[i] * d;
            else Sm -= Qc[i] * d;
        }
        const auto cp = conv(Sp, 2 * static_cast<std::uint64_t>(l));
        const auto cm = conv(Sm, 2 * static_cast<std::uint64_t>(l) + 1);
        r.adc_codes[0][l] = cp;
        r.adc_codes[1][l] = cm;
        R += scale * (cp - cm);
    }
    r.recombined = R;
    r.value_pim = k.value(R);
    return r;
}

MacGroupResult mac_bit_serial(const quant::BitPlanes& Q_bits, const quant::BitPlanes& q_planes, const PimConfig& cfg,
                              const GroupInterface& io) {
    check_group(q_planes, cfg);
    require(cfg.scheme == Scheme::bit_serial, "mac_bit_serial: config scheme is " + to_string(cfg.scheme));
    require(Q_bits.kind == quant::PlaneKind::weight_bits && static_cast<int>(Q_bits.count()) == cfg.b_w,
            "mac_bit_serial: expects b_w weight bit planes");
    require(Q_bits.length() == cfg.n_group, "mac_bit_serial: weight group length does not match n_group");
    const Constants k(cfg, cfg.n_group);
    const auto acodes = activation_codes(q_planes);

    MacGroupResult r;
    std::int64_t E = 0;
    for (int b = 0; b < cfg.b_w; ++b) {
        std::int64_t s = 0;
        for (std::size_t i = 0; i < acodes.size(); ++i) s += Q_bits.planes[b][i] * acodes[i];
        E += Q_bits.plane_weights[b] * s;
    }
    r.value_exact = static_cast<double>(E) / static_cast<double>(k.Dw * k.Ma);
    if (cfg.b_imc.is_infinite()) {
        r.value_pim = r.value_exact;
        return r;
    }
    const Converter conv{k, 0, k.M, false, io};
    r.adc_codes.assign(1, std::vector<std::int64_t>(static_cast<std::size_t>(cfg.b_w) * k.L));
    std::int64_t R = 0;
    for (int b = 0; b < cfg.b_w; ++b) {
        std::int64_t scale = Q_bits.plane_weights[b];
        for (int l = 0; l < k.L; ++l, scale *= k.delta) {
            std::int64_t S = 0;
            for (std::size_t i = 0; i < acodes.size(); ++i) S += Q_bits.planes[b][i] * q_planes.planes[l][i];
            const auto c = static_cast<std::uint64_t>(b) * k.L + l;
            const auto code = conv(S, c);
            r.adc_codes[0][c] = code;
            R += scale * code;
        }
    }
    r.recombined = R;
    r.value_pim = k.value(R);
    return r;
}

LayerMacResult pim_linear(std::span<const std::uint8_t> act, std::span<const std::int8_t> wt, std::size_t P,
                          std::size_t O, std::size_t in_channels, std::size_t kernel_area, const PimConfig& cfg,
                          const LinearOptions& opt) {
    cfg.validate();
    const std::size_t K = in_channels * kernel_area;
    require(kernel_area >= 1 && in_channels >= 1, "pim_linear: empty input geometry");
    require(act.size() == P * K, "pim_linear: activation matrix is not [P, K]");
    require(wt.size() == O * K, "pim_linear: weight matrix is not [O, K]");
    require(cfg.n_group == cfg.unit_in_channels * kernel_area,
            "pim_linear: n_group " + std::to_string(cfg.n_group) + " != unit_in_channels * kernel_area = " +
                std::to_string(cfg.unit_in_channels * kernel_area));

    const std::size_t u = cfg.unit_in_channels;
    const std::size_t G = (in_channels + u - 1) / u;
    const std::size_t N = cfg.n_group;
    const Constants k(cfg, N);
    {
        const auto amax = static_cast<std::uint8_t>(k.Ma);
        for (auto a : act) require(a <= amax, "pim_linear: activation code exceeds b_a bits");
        for (auto w : wt) require(std::abs(static_cast<int>(w)) <= k.Dw, "pim_linear: weight code exceeds b_w bits");
    }

    LayerMacResult res;
    res.rows = P;
    res.outputs = O;
    res.groups = G;
    const auto& kern = simd::active_kernels();
    const bool finite = !cfg.b_imc.is_infinite();

    std::vector<double> exact;
    if (opt.want_exact || !finite) {
        std::vector<std::int32_t> E(P * O);
        kern.gemm_u8s8(act.data(), wt.data(), E.data(), P, O, K);
        exact.resize(P * O);
        const double den = static_cast<double>(k.Dw * k.Ma);
        for (std::size_t i = 0; i < E.size(); ++i) exact[i] = static_cast<double>(E[i]) / den;
    }
    if (!finite) {
        res.value_pim = exact;
        if (opt.want_exact) res.value_exact = std::move(exact);
        return res;
    }

    // Weight bit planes per group: [g][(o*nk + kk)*words + w].
    const int bw = cfg.b_w;
    const bool diff = cfg.scheme == Scheme::differential;
    const int nk = diff ? 2 * (bw - 1) : bw;
    const int nj = cfg.b_a;
    const int words = simd::words_for(N);
    const int stride = simd::plane_stride(nj);
    std::vector<std::vector<std::uint64_t>> wpack(G, std::vector<std::uint64_t>(O * nk * words, 0));
    for (std::size_t g = 0; g < G; ++g) {
        for (std::size_t o = 0; o < O; ++o) {
            for (std::size_t i = 0; i < N; ++i) {
                const std::size_t col = g * N + i;
                if (col >= K) break;
                const int c = wt[o * K + col];
                const std::uint64_t bit = std::uint64_t{1} << (i % 64);
                std::uint64_t* row = wpack[g].data() + o * nk * words + i / 64;
                if (diff) {
                    const unsigned pos = c > 0 ? static_cast<unsigned>(c) : 0u;
                    const unsigned neg = c < 0 ? static_cast<unsigned>(-c) : 0u;
                    for (int b = 0; b < bw - 1; ++b) {
                        if ((pos >> b) & 1u) row[b * words] |= bit;
                        if ((neg >> b) & 1u) row[(bw - 1 + b) * words] |= bit;
                    }
                } else {
                    const unsigned bits = static_cast<unsigned>(c) & ((1u << bw) - 1u);
                    for (int b = 0; b < bw; ++b)
                        if ((bits >> b) & 1u) row[b * words] |= bit;
                }
            }
        }
    }

    // Ideal converters become table lookups over the partial-sum range.
    const bool ideal = !(cfg.nonideal && cfg.nonideal->active());
    const std::int64_t smax = k.level_den;
    const std::int64_t soff = cfg.scheme == Scheme::native ? smax : 0;
    std::vector<std::int64_t> lut;
    if (ideal) {
        lut.resize(static_cast<std::size_t>(smax + soff + 1));
        for (std::int64_t s = -soff; s <= smax; ++s)
            lut[static_cast<std::size_t>(s + soff)] = div_round_half_away(s * k.M, k.level_den);
    }
    const auto [lo, hi] = code_range(cfg);
    const bool signed_levels = cfg.scheme == Scheme::native;
    const std::size_t nconv = cfg.conversions_per_group();
    const nonideal::CurveBank* bank = (!ideal && cfg.nonideal->curves) ? cfg.nonideal->curves.get() : nullptr;
    const double sigma = ideal ? 0.0 : cfg.nonideal->noise.sigma_lsb;
    const std::uint64_t key = ideal ? 0 : nonideal::stream_key(cfg.nonideal->noise, opt.stream.layer, opt.stream.tick);

    res.value_pim.assign(P * O, 0.0);
    const unsigned threads = num_threads();
    std::vector<std::int64_t> tmin(std::max(1u, threads), std::numeric_limits<std::int64_t>::max());
    std::vector<std::int64_t> tmax(std::max(1u, threads), std::numeric_limits<std::int64_t>::min());
    const int m = cfg.dac_bits;
    const int L = k.L;

    parallel_for(P, threads, [&](std::size_t pb, std::size_t pe, std::size_t chunk) {
        std::vector<std::uint8_t> slice(N);
        std::vector<std::uint64_t> apack(static_cast<std::size_t>(words) * stride);
        std::vector<std::int32_t> pc(O * nk * nj);
        std::vector<std::int64_t> T(static_cast<std::size_t>(nk) * L);
        std::vector<std::int64_t> R(O);
        std::int64_t cmin = tmin[chunk], cmax = tmax[chunk];

        for (std::size_t p = pb; p < pe; ++p) {
            std::fill(R.begin(), R.end(), 0);
            for (std::size_t g = 0; g < G; ++g) {
                const std::size_t c0 = g * N;
                const std::size_t len = std::min(N, K - std::min(K, c0));
                std::fill(slice.begin(), slice.end(), std::uint8_t{0});
                std::copy_n(act.data() + p * K + c0, len, slice.begin());
                kern.pack_bitplanes(slice.data(), N, nj, apack.data());
                kern.and_popcount(apack.data(), wpack[g].data(), O, nk, nj, words, pc.data());

                for (std::size_t o = 0; o < O; ++o) {
                    const std::int32_t* po = pc.data() + o * nk * nj;
                    // T[kk][l] = sum_t 2^t popcount(weight plane kk, activation bit l*m + t)
                    for (int kk = 0; kk < nk; ++kk)
                        for (int l = 0; l < L; ++l) {
                            std::int64_t s = 0;
                            for (int t = 0; t < m; ++t) s += static_cast<std::int64_t>(po[kk * nj + l * m + t]) << t;
                            T[kk * L + l] = s;
                        }
                    GroupInterface io;
                    if (!ideal) {
                        io.curve = bank ? &bank->for_output(o, cfg.unit_out_channels) : nullptr;
                        io.noise = {sigma, key, ((p * O + o) * G + g) * nconv};
                    }
                    const Converter conv{k, lo, hi, signed_levels, io};
                    auto convert = [&](std::int64_t S, std::uint64_t c) {
                        const std::int64_t code = ideal ? lut[static_cast<std::size_t>(S + soff)] : conv(S, c);
                        cmin = std::min(cmin, code);
                        cmax = std::max(cmax, code);
                        return code;
                    };

                    std::int64_t acc = 0;
                    switch (cfg.scheme) {
                        case Scheme::native: {
                            std::int64_t scale = 1;
                            for (int l = 0; l < L; ++l, scale *= k.delta) {
                                std::int64_t S = 0;
                                for (int b = 0; b < bw; ++b) {
                                    const std::int64_t v = T[b * L + l] << b;
                                    S += b == bw - 1 ? -v : v;
                                }
                                acc += scale * convert(S, static_cast<std::uint64_t>(l));
                            }
                            break;
                        }
                        case Scheme::differential: {
                            std::int64_t scale = 1;
                            for (int l = 0; l < L; ++l, scale *= k.delta) {
                                std::int64_t Sp = 0, Sm = 0;
                                for (int b = 0; b < bw - 1; ++b) {
                                    Sp += T[b * L + l] << b;
                                    Sm += T[(bw - 1 + b) * L + l] << b;
                                }
                                const auto cp = convert(Sp, 2 * static_cast<std::uint64_t>(l));
                                const auto cm = convert(Sm, 2 * static_cast<std::uint64_t>(l) + 1);
                                acc += scale * (cp - cm);
                            }
                            break;
                        }
                        case Scheme::bit_serial: {
                            for (int b = 0; b < bw; ++b) {
                                std::int64_t scale = std::int64_t{1} << b;
                                if (b == bw - 1) scale = -scale;
                                for (int l = 0; l < L; ++l, scale *= k.delta)
                                    acc += scale * convert(T[b * L + l], static_cast<std::uint64_t>(b) * L + l);
                            }
                            break;
                        }
                    }
                    R[o] += acc;
                }
            }
            for (std::size_t o = 0; o < O; ++o) res.value_pim[p * O + o] = k.value(R[o]);
        }
        tmin[chunk] = cmin;
        tmax[chunk] = cmax;
    });

    res.code_min = *std::min_element(tmin.begin(), tmin.end());
    res.code_max = *std::max_element(tmax.begin(), tmax.end());
    if (res.code_min > res.code_max) res.code_min = res.code_max = 0;
    if (opt.want_exact) res.value_exact = std::move(exact);
    return res;
}

LayerMacResult pim_linear(const quant::QTensor& Q, const quant::QTensor& q, std::size_t kernel_area,
                          const PimConfig& cfg, const LinearOptions& opt) {
    require(Q.codes && q.codes, "pim_linear: operands must carry codes");
    require(Q.shape.size() == 2 && q.shape.size() == 2 && Q.shape[1] == q.shape[1],
            "pim_linear: expects Q [O, K] and q [P, K]");
    require(Q.range == quant::Range::unit_signed && Q.bits == Resolution(cfg.b_w),
            "pim_linear: weights must be b_w-bit unit_signed");
    require(q.range == quant::Range::unit && q.bits == Resolution(cfg.b_a),
            "pim_linear: activations must be b_a-bit unit range");
    const std::size_t K = Q.shape[1];
    require(K % kernel_area == 0, "pim_linear: K is not a multiple of kernel_area");
    std::vector<std::int8_t> w(Q.codes->begin(), Q.codes->end());
    std::vector<std::uint8_t> a(q.codes->begin(), q.codes->end());
    return pim_linear(a, w, q.shape[0], Q.shape[0], K / kernel_area, kernel_area, cfg, opt);
}

GsteGrads gste_backward(std::span<const double> grad_out, std::span<const std::uint8_t> act, double act_den,
                        std::span<const double> weights, std::size_t P, std::size_t O, std::size_t K, double xi,
                        bool want_grad_Q, bool want_grad_q) {
    require(xi > 0.0 && std::isfinite(xi), "gste_backward: xi must be positive");
    require(grad_out.size() == P * O, "gste_backward: grad_out is not [P, O]");
    require(act.size() == P * K && weights.size() == O * K, "gste_backward: operand shapes");
    const auto& kern = simd::active_kernels();
    GsteGrads g;
    if (want_grad_Q) {
        g.grad_Q.assign(O * K, 0.0);
        kern.gemm_tn_f64_u8(grad_out.data(), act.data(), g.grad_Q.data(), P, O, K);
        const double inv = 1.0 / act_den;
        for (auto& v : g.grad_Q) v = xi * (v * inv);
    }
    if (want_grad_q) {
        g.grad_q.assign(P * K, 0.0);
        kern.gemm_nn_f64(grad_out.data(), weights.data(), g.grad_q.data(), P, O, K);
        for (auto& v : g.grad_q) v = xi * v;
    }
    return g;
}

}  // namespace pimqat::pim
