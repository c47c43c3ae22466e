#include "pimqat/nonideal.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

namespace pimqat::nonideal {

TransferCurve::TransferCurve(int bits, std::vector<double> levels) : bits_(bits), levels_(std::move(levels)) {
    require(bits >= 1 && bits <= 16, "TransferCurve: bits must be in [1, 16]");
    require(levels_.size() == (std::size_t{1} << bits),
            "TransferCurve: expected " + std::to_string(std::size_t{1} << bits) + " levels, got " +
                std::to_string(levels_.size()));
    for (double v : levels_) require(std::isfinite(v), "TransferCurve: non-finite level");
}

TransferCurve TransferCurve::identity(int bits) { return affine(bits, 1.0, 0.0); }

TransferCurve TransferCurve::affine(int bits, double gain, double offset) {
    std::vector<double> lv(std::size_t{1} << bits);
    for (std::size_t c = 0; c < lv.size(); ++c) lv[c] = gain * static_cast<double>(c) + offset;
    return TransferCurve(bits, std::move(lv));
}

double TransferCurve::operator()(double a) const {
    const double top = static_cast<double>(levels_.size() - 1);
    a = std::clamp(a, 0.0, top);
    const auto i = static_cast<std::size_t>(a);
    if (i >= levels_.size() - 1) return levels_.back();
    const double f = a - static_cast<double>(i);
    if (f == 0.0) return levels_[i];
    return levels_[i] + f * (levels_[i + 1] - levels_[i]);
}

std::int64_t apply_interface(double a, const TransferCurve* curve, double eps, std::int64_t lo, std::int64_t hi,
                             bool signed_levels) {
    double v = a;
    if (curve) v = signed_levels ? curve->eval_signed(a) : (*curve)(a);
    v += eps;
    const double r = round_half_away(v);
    if (!(r >= static_cast<double>(lo))) return lo;  // also catches NaN
    if (r > static_cast<double>(hi)) return hi;
    return static_cast<std::int64_t>(r);
}

std::int64_t apply_interface(double a, const TransferCurve* curve, const NoiseModel* noise, std::uint64_t key,
                             std::uint64_t index, Resolution b) {
    require(!b.is_infinite(), "apply_interface: converter resolution must be finite");
    const double eps = noise ? NoiseStream{noise->sigma_lsb, key, 0}(index) : 0.0;
    return apply_interface(a, curve, eps, 0, b.max_code());
}

CurveBank generate_variation_curves(int bits, std::size_t count, const VariationSpec& spec) {
    require(count >= 1, "generate_variation_curves: count must be at least 1");
    require(spec.sigma_gain >= 0.0 && spec.sigma_offset >= 0.0, "generate_variation_curves: negative sigma");
    Rng rng(spec.seed);
    CurveBank bank;
    for (std::size_t j = 0; j < count; ++j) {
        const double gain = rng.normal(1.0, spec.sigma_gain);
        const double offset = rng.normal(0.0, spec.sigma_offset);
        bank.curves.push_back(TransferCurve::affine(bits, gain, offset));
    }
    return bank;
}

namespace {

[[noreturn]] void parse_error(const std::string& source, std::size_t line, const std::string& what) {
    throw Error(source + ":" + std::to_string(line) + ": " + what);
}

std::vector<std::string_view> split_ws(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        std::size_t j = i;
        while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
        if (j > i) out.push_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

}  // namespace

CurveBank parse_curve_bank(std::string_view text, int bits, const std::string& source) {
    std::vector<std::string_view> lines;
    for (std::size_t pos = 0; pos <= text.size();) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        lines.push_back(text.substr(pos, nl - pos));
        pos = nl + 1;
    }
    while (!lines.empty() && split_ws(lines.back()).empty()) lines.pop_back();
    if (lines.empty()) parse_error(source, 1, "missing header `pim-curves v1 bits=<b> count=<n>`");

    const auto head = split_ws(lines[0]);
    int file_bits = -1;
    long count = -1;
    if (head.size() != 4 || head[0] != "pim-curves" || head[1] != "v1" || !head[2].starts_with("bits=") ||
        !head[3].starts_with("count="))
        parse_error(source, 1, "missing header `pim-curves v1 bits=<b> count=<n>`");
    auto num = [&](std::string_view s, auto& out) {
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
        if (ec != std::errc() || p != s.data() + s.size()) parse_error(source, 1, "malformed header field `" + std::string(s) + "`");
    };
    num(head[2].substr(5), file_bits);
    num(head[3].substr(6), count);
    if (file_bits != bits)
        parse_error(source, 1, "curve bits " + std::to_string(file_bits) + " do not match converter bits " + std::to_string(bits));
    if (count < 1) parse_error(source, 1, "count must be at least 1");
    if (static_cast<long>(lines.size()) - 1 != count)
        parse_error(source, lines.size(), "expected " + std::to_string(count) + " curve rows, found " + std::to_string(lines.size() - 1));

    const std::size_t width = std::size_t{1} << bits;
    CurveBank bank;
    for (std::size_t r = 1; r < lines.size(); ++r) {
        const auto fields = split_ws(lines[r]);
        if (fields.size() != width)
            parse_error(source, r + 1, "expected " + std::to_string(width) + " levels, found " + std::to_string(fields.size()));
        std::vector<double> lv(width);
        for (std::size_t c = 0; c < width; ++c) {
            const std::string f(fields[c]);
            char* end = nullptr;
            lv[c] = std::strtod(f.c_str(), &end);
            if (end != f.c_str() + f.size() || !std::isfinite(lv[c]))
                parse_error(source, r + 1, "non-numeric level `" + f + "` at column " + std::to_string(c + 1));
        }
        bank.curves.emplace_back(bits, std::move(lv));
    }
    return bank;
}

CurveBank load_curve_bank(const std::filesystem::path& path, int bits) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open curve file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_curve_bank(ss.str(), bits, path.string());
}

void save_curve_bank(const std::filesystem::path& path, const CurveBank& bank) {
    require(bank.size() >= 1, "save_curve_bank: empty bank");
    std::ofstream out(path);
    if (!out) throw Error("cannot write curve file " + path.string());
    out << "pim-curves v1 bits=" << bank.bits() << " count=" << bank.size() << "\n";
    char buf[32];
    for (const auto& c : bank.curves) {
        for (std::size_t i = 0; i < c.levels().size(); ++i) {
            auto [p, ec] = std::to_chars(buf, buf + sizeof buf, c.levels()[i]);
            if (i) out << ' ';
            out.write(buf, p - buf);
        }
        out << "\n";
    }
}

AffineFit fit_affine(const TransferCurve& c) {
    const auto& y = c.levels();
    const double n = static_cast<double>(y.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double x = static_cast<double>(i);
        sx += x;
        sy += y[i];
        sxx += x * x;
        sxy += x * y[i];
    }
    const double gain = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    return {gain, (sy - gain * sx) / n};
}

std::vector<ErrorStdRow> error_std_sweep(Resolution b, const CurveBank* curves, std::span<const double> sigmas,
                                         std::size_t samples, std::uint64_t seed) {
    require(samples >= 1000, "error_std_sweep: samples must be at least 1000");
    require(!b.is_infinite(), "error_std_sweep: converter resolution must be finite");
    if (curves) require(curves->bits() == b.bits(), "error_std_sweep: curve bits do not match converter bits");
    const double top = static_cast<double>(b.max_code());

    Rng rng(seed);
    std::vector<double> levels(samples);
    for (auto& a : levels) a = rng.uniform(0.0, top);
    const std::uint64_t noise_key = derive_seed(seed, 0x6e6f697365ULL);

    auto error_std = [&](double sigma) {
        const NoiseStream eps{sigma, noise_key, 0};
        double sum = 0.0, sum2 = 0.0;
        for (std::size_t i = 0; i < samples; ++i) {
            const TransferCurve* c = curves ? &curves->curves[i % curves->size()] : nullptr;
            const double e = static_cast<double>(apply_interface(levels[i], c, eps(i), 0, b.max_code())) - levels[i];
            sum += e;
            sum2 += e * e;
        }
        const double n = static_cast<double>(samples);
        const double mean = sum / n;
        return std::sqrt(std::max(0.0, sum2 / n - mean * mean));
    };

    const double base = error_std(0.0);
    std::vector<ErrorStdRow> rows;
    for (double s : sigmas) {
        require(s >= 0.0 && std::isfinite(s), "error_std_sweep: sigma must be finite and non-negative");
        const double e = s == 0.0 ? base : error_std(s);
        rows.push_back({s, e, e / base});
    }
    return rows;
}

}  // namespace pimqat::nonideal
