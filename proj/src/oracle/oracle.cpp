#include "pimqat/oracle.hpp"

#include <fstream>
#include <json.hpp>

#include "pimqat/random.hpp"

namespace pimqat::oracle {

namespace {

std::int64_t pow2(int e) { return std::int64_t{1} << e; }

// Base-2^m digit l of an unsigned code.
std::int64_t digit(std::int64_t code, int m, int l) {
    for (int i = 0; i < l; ++i) code /= pow2(m);
    return code % pow2(m);
}

// Bit k of the b-bit two's-complement representation of a signed code.
std::int64_t twos_bit(std::int64_t code, int b, int k) {
    std::int64_t u = code < 0 ? code + pow2(b) : code;
    for (int i = 0; i < k; ++i) u /= 2;
    return u % 2;
}

}  // namespace

std::int64_t round_rational(const Rational& x) {
    const Rational half(1, 2);
    if (x < 0) return -round_rational(-x);
    const Rational y = x + half;
    return y.numerator() / y.denominator();
}

MacValue evaluate(const MacCase& c) {
    require(c.weights.size() == c.activations.size() && !c.weights.empty(), "oracle: operand length mismatch");
    require(c.b_a % c.m == 0, "oracle: m must divide b_a");
    const auto N = static_cast<std::int64_t>(c.weights.size());
    const std::int64_t Ma = pow2(c.b_a) - 1, Dw = pow2(c.b_w - 1) - 1, delta = pow2(c.m);
    const int L = c.b_a / c.m;

    std::vector<Rational> Qt(N), qt(N);
    for (std::int64_t i = 0; i < N; ++i) {
        Qt[i] = Rational(c.weights[i], Dw);
        qt[i] = Rational(c.activations[i], Ma);
    }
    // Slice l of activation i, as a real in the same unit as q: digit / (2^b_a - 1).
    auto qs = [&](std::int64_t i, int l) { return Rational(digit(c.activations[i], c.m, l), Ma); };

    MacValue out;
    for (std::int64_t i = 0; i < N; ++i) out.exact += Qt[i] * qt[i];
    if (c.b_imc == 0) {
        out.value = out.exact;
        return out;
    }
    const std::int64_t M = pow2(c.b_imc) - 1;
    const Rational span(N * (delta - 1));

    switch (c.scheme) {
        case pim::Scheme::native: {
            const Rational gain = Rational(M * Ma) / span;
            Rational acc;
            for (int l = 0; l < L; ++l) {
                Rational s;
                for (std::int64_t i = 0; i < N; ++i) s += Qt[i] * qs(i, l);
                const auto code = round_rational(gain * s);
                out.codes.push_back(code);
                acc += Rational(code) * Rational(pow2(c.m * l));
            }
            out.value = acc * span / Rational(M * Ma);
            break;
        }
        case pim::Scheme::differential: {
            const Rational gain = Rational(M * Ma) / span;
            Rational acc;
            for (int l = 0; l < L; ++l) {
                Rational sp, sm;
                for (std::int64_t i = 0; i < N; ++i) {
                    if (Qt[i] > 0) sp += Qt[i] * qs(i, l);
                    if (Qt[i] < 0) sm += -Qt[i] * qs(i, l);
                }
                const auto cp = round_rational(gain * sp), cm = round_rational(gain * sm);
                out.codes.push_back(cp);
                out.codes.push_back(cm);
                acc += Rational(cp - cm) * Rational(pow2(c.m * l));
            }
            out.value = acc * span / Rational(M * Ma);
            break;
        }
        case pim::Scheme::bit_serial: {
            const Rational gain = Rational(M * Dw * Ma) / span;
            Rational acc;
            for (int k = 0; k < c.b_w; ++k) {
                const Rational sign = k == c.b_w - 1 ? Rational(-1) : Rational(1);
                for (int l = 0; l < L; ++l) {
                    Rational s;
                    for (std::int64_t i = 0; i < N; ++i) s += Rational(twos_bit(c.weights[i], c.b_w, k), Dw) * qs(i, l);
                    const auto code = round_rational(gain * s);
                    out.codes.push_back(code);
                    acc += sign * Rational(pow2(k)) * Rational(code) * Rational(pow2(c.m * l));
                }
            }
            out.value = acc * span / Rational(M * Dw * Ma);
            break;
        }
    }
    return out;
}

MacCase random_case(std::uint64_t seed, int max_n, int max_bits, int max_imc) {
    Rng rng(seed);
    MacCase c;
    c.scheme = static_cast<pim::Scheme>(rng.below(3));
    const int bits = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_bits - 1)));
    c.b_w = c.b_a = bits;
    std::vector<int> divisors;
    for (int m = 1; m <= bits; ++m)
        if (bits % m == 0) divisors.push_back(m);
    c.m = divisors[rng.below(divisors.size())];
    c.b_imc = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_imc)));
    const auto n = 1 + rng.below(static_cast<std::uint64_t>(max_n));
    const std::int64_t Dw = pow2(c.b_w - 1) - 1, Ma = pow2(c.b_a) - 1;
    for (std::uint64_t i = 0; i < n; ++i) {
        c.weights.push_back(static_cast<std::int64_t>(rng.below(2 * Dw + 1)) - Dw);
        c.activations.push_back(static_cast<std::int64_t>(rng.below(Ma + 1)));
    }
    return c;
}

pim::MacGroupResult run_pim(const MacCase& c) {
    pim::PimConfig cfg;
    cfg.scheme = c.scheme;
    cfg.n_group = c.weights.size();
    cfg.b_imc = c.b_imc == 0 ? Resolution::infinite() : Resolution(c.b_imc);
    cfg.dac_bits = c.m;
    cfg.b_w = c.b_w;
    cfg.b_a = c.b_a;
    const Shape shape{c.weights.size()};
    const auto Q = quant::QTensor::from_codes(shape, {c.weights.begin(), c.weights.end()}, Resolution(c.b_w),
                                              quant::Range::unit_signed);
    const auto q = quant::QTensor::from_codes(shape, {c.activations.begin(), c.activations.end()}, Resolution(c.b_a),
                                              quant::Range::unit);
    const auto planes = quant::decompose_activation(q, c.m);
    switch (c.scheme) {
        case pim::Scheme::native: return pim::mac_native(Q, planes, cfg);
        case pim::Scheme::differential: return pim::mac_differential(Q, planes, cfg);
        case pim::Scheme::bit_serial: break;
    }
    return pim::mac_bit_serial(quant::decompose_weight_bits(Q, c.b_w), planes, cfg);
}

std::string to_string(const Rational& r) { return std::to_string(r.numerator()) + "/" + std::to_string(r.denominator()); }

std::vector<CaseFileEntry> load_case_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open oracle case file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(path.string() + ": " + e.what());
    }
    if (j.value("format", "") != "pimqat-oracle-cases" || j.value("version", 0) != 1)
        throw Error(path.string() + ": not a pimqat-oracle-cases v1 file");
    std::vector<CaseFileEntry> out;
    for (const auto& e : j.at("cases")) {
        CaseFileEntry c;
        c.mac.scheme = pim::scheme_from_string(e.at("scheme").get<std::string>());
        c.mac.b_w = e.at("b_w");
        c.mac.b_a = e.at("b_a");
        c.mac.m = e.at("m");
        c.mac.b_imc = e.at("b_imc");
        c.mac.weights = e.at("weights").get<std::vector<std::int64_t>>();
        c.mac.activations = e.at("activations").get<std::vector<std::int64_t>>();
        c.expected_value = e.at("value").get<std::string>();
        c.expected_codes = e.at("codes").get<std::vector<std::int64_t>>();
        out.push_back(std::move(c));
    }
    return out;
}

void save_case_file(const std::filesystem::path& path, const std::vector<MacCase>& cases) {
    nlohmann::json j;
    j["format"] = "pimqat-oracle-cases";
    j["version"] = 1;
    j["cases"] = nlohmann::json::array();
    for (const auto& c : cases) {
        const auto v = evaluate(c);
        j["cases"].push_back({{"scheme", pim::to_string(c.scheme)},
                              {"b_w", c.b_w},
                              {"b_a", c.b_a},
                              {"m", c.m},
                              {"b_imc", c.b_imc},
                              {"weights", c.weights},
                              {"activations", c.activations},
                              {"value", to_string(v.value)},
                              {"codes", v.codes}});
    }
    std::ofstream out(path);
    if (!out) throw Error("cannot write oracle case file " + path.string());
    out << j.dump(1) << "\n";
}

}  // namespace pimqat::oracle
