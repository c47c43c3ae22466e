#include "pimqat/diag.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace pimqat::diag {

std::size_t SweepTable::grid_size() const {
    std::size_t n = 1;
    for (const auto& v : axis_values) n *= v.size();
    return n;
}

std::vector<std::string> SweepTable::point(std::size_t r) const {
    std::vector<std::string> out(axis_values.size());
    for (std::size_t a = axis_values.size(); a-- > 0;) {
        out[a] = axis_values[a][r % axis_values[a].size()];
        r /= axis_values[a].size();
    }
    return out;
}

void SweepTable::check() const {
    require(axis_names.size() == axis_values.size(), "sweep table: axis names and values disagree");
    require(cells.size() == grid_size(), "sweep table " + study + ": " + std::to_string(cells.size()) +
                                             " rows for a grid of " + std::to_string(grid_size()));
    for (const auto& row : cells) require(row.size() == columns.size(), "sweep table: ragged row");
}

std::string SweepTable::to_csv() const {
    check();
    std::ostringstream out;
    bool first = true;
    for (const auto& n : axis_names) {
        out << (first ? "" : ",") << n;
        first = false;
    }
    for (const auto& c : columns) {
        out << (first ? "" : ",") << c;
        first = false;
    }
    out << "\n";
    for (std::size_t r = 0; r < cells.size(); ++r) {
        first = true;
        for (const auto& p : point(r)) {
            out << (first ? "" : ",") << p;
            first = false;
        }
        for (double v : cells[r]) {
            out << (first ? "" : ",") << format_double(v);
            first = false;
        }
        out << "\n";
    }
    return out.str();
}

json SweepTable::to_json() const {
    check();
    json axes = json::array();
    for (std::size_t a = 0; a < axis_names.size(); ++a) axes.push_back({{"name", axis_names[a]}, {"values", axis_values[a]}});
    return {{"study", study}, {"axes", axes}, {"columns", columns}, {"cells", cells}, {"meta", meta}};
}

SweepTable SweepTable::from_json(const json& j) {
    SweepTable t;
    try {
        t.study = j.at("study");
        for (const auto& a : j.at("axes")) {
            t.axis_names.push_back(a.at("name"));
            t.axis_values.push_back(a.at("values").get<std::vector<std::string>>());
        }
        t.columns = j.at("columns").get<std::vector<std::string>>();
        t.cells = j.at("cells").get<std::vector<std::vector<double>>>();
        t.meta = j.at("meta");
    } catch (const json::exception& e) {
        throw Error(std::string("sweep table: ") + e.what());
    }
    t.check();
    return t;
}

const std::string& SweepTable::config_hash() const { return meta.at("config_hash").get_ref<const std::string&>(); }

void set_meta(SweepTable& t, const json& config, std::uint64_t seed) {
    t.meta = {{"config", config}, {"config_hash", pimqat::config_hash(config)}, {"seed", seed}};
}

namespace {

std::string bits_label(int b) { return b == 0 ? "inf" : std::to_string(b); }

Resolution to_res(int b) { return b == 0 ? Resolution::infinite() : Resolution(b); }

struct Moments {
    double mean = 0.0, var = 0.0;
};

Moments moments(const std::vector<double>& v) {
    long double m = 0.0L;
    for (double x : v) m += x;
    m /= static_cast<long double>(v.size());
    long double s = 0.0L;
    for (double x : v) s += (x - m) * (x - m);
    return {static_cast<double>(m), static_cast<double>(s / static_cast<long double>(v.size()))};
}

// Single conv layer without BN so the captured output is eta * s * MAC.
nn::Layer toy_conv(pim::Scheme scheme, Resolution b_imc, std::size_t in, std::size_t out, std::size_t k, int b_w,
                   int b_a, int dac_bits) {
    nn::Layer L;
    L.kind = nn::LayerKind::conv;
    L.in_ch = in;
    L.out_ch = out;
    L.ksize = k;
    L.pad = k / 2;
    L.b_w = b_w;
    L.b_a = b_a;
    L.pim_layer = true;
    L.cfg.scheme = scheme;
    L.cfg.b_imc = b_imc;
    L.cfg.dac_bits = dac_bits;
    L.cfg.unit_in_channels = in;
    L.cfg.forward_scale = 1.0;
    L.has_bn = false;
    L.bn = nn::BNState(0);
    L.act = nn::Activation::identity;
    L.W = Tensor({out, in, k, k});
    return L;
}

Tensor uniform_images(Rng& rng, std::size_t B, std::size_t C, std::size_t H) {
    Tensor x({B, C, H, H});
    for (auto& v : x.data) v = rng.uniform();
    return x;
}

json scheme_json(pim::Scheme s) { return pim::to_string(s); }

}  // namespace

// ---------------------------------------------------------------- scale ratio

json ScaleRatioConfig::to_json() const {
    return {{"study", "scale_ratio"}, {"scheme", scheme_json(scheme)}, {"b_imc", b_imc}, {"in_channels", in_channels},
            {"out_channels", out_channels}, {"ksize", ksize}, {"image", image}, {"batch", batch}, {"b_w", b_w},
            {"b_a", b_a}, {"dac_bits", dac_bits}, {"repeats", repeats}, {"seed", seed}};
}

SweepTable scale_ratio_study(const ScaleRatioConfig& cfg) {
    require(cfg.batch >= 100, "scale_ratio_study: needs a batch of at least 100 samples");
    require(cfg.repeats >= 1 && !cfg.b_imc.empty(), "scale_ratio_study: empty grid");
    SweepTable t;
    t.study = "scale_ratio";
    t.axis_names = {"b_imc"};
    t.axis_values.emplace_back();
    t.columns = {"rho", "rho_sd", "rho_min", "rho_max"};
    for (int b : cfg.b_imc) {
        t.axis_values[0].push_back(bits_label(b));
        std::vector<double> rhos;
        for (std::size_t r = 0; r < cfg.repeats; ++r) {
            // Same draw for every b_imc so the curve is paired across resolutions.
            Rng rng(derive_seed(cfg.seed, r));
            nn::Layer L = toy_conv(cfg.scheme, to_res(b), cfg.in_channels, cfg.out_channels, cfg.ksize, cfg.b_w,
                                   cfg.b_a, cfg.dac_bits);
            nn::kaiming_init(L, rng);
            const Tensor x = uniform_images(rng, cfg.batch, cfg.in_channels, cfg.image);
            nn::ForwardContext ctx;
            ctx.want_exact = true;
            nn::forward_layer(L, x, 0, ctx);
            rhos.push_back(L.last_rho);
        }
        const auto m = moments(rhos);
        t.cells.push_back({m.mean, std::sqrt(m.var), *std::min_element(rhos.begin(), rhos.end()),
                           *std::max_element(rhos.begin(), rhos.end())});
    }
    set_meta(t, cfg.to_json(), cfg.seed);
    return t;
}

// ---------------------------------------------------------------- BN drift

json BnDriftConfig::to_json() const {
    return {{"study", "bn_drift"},
            {"scheme", scheme_json(scheme)},
            {"b_imc", b_imc},
            {"sigmas", sigmas},
            {"use_curves", use_curves},
            {"variation", {{"sigma_offset", variation.sigma_offset}, {"sigma_gain", variation.sigma_gain},
                           {"seed", variation.seed}}},
            {"curve_count", curve_count},
            {"in_channels", in_channels},
            {"out_channels", out_channels},
            {"ksize", ksize},
            {"image", image},
            {"batch", batch},
            {"unit_out_channels", unit_out_channels},
            {"b_w", b_w},
            {"b_a", b_a},
            {"seed", seed}};
}

SweepTable bn_drift_study(const BnDriftConfig& cfg, std::shared_ptr<const nonideal::CurveBank> bank) {
    require(cfg.b_imc >= 1, "bn_drift_study: needs a finite b_imc");
    if (cfg.use_curves && !bank)
        bank = std::make_shared<nonideal::CurveBank>(
            nonideal::generate_variation_curves(cfg.b_imc, cfg.curve_count, cfg.variation));
    Rng rng(cfg.seed);
    nn::Layer L = toy_conv(cfg.scheme, Resolution(cfg.b_imc), cfg.in_channels, cfg.out_channels, cfg.ksize, cfg.b_w,
                           cfg.b_a, 1);
    L.cfg.unit_out_channels = cfg.unit_out_channels;
    nn::kaiming_init(L, rng);
    const Tensor x = uniform_images(rng, cfg.batch, cfg.in_channels, cfg.image);

    const std::size_t C = cfg.out_channels, S = cfg.image * cfg.image;
    auto channel_stats = [&](const Tensor& y) {
        std::vector<Moments> out(C);
        for (std::size_t c = 0; c < C; ++c) {
            std::vector<double> v;
            v.reserve(cfg.batch * S);
            for (std::size_t b = 0; b < cfg.batch; ++b)
                for (std::size_t s = 0; s < S; ++s) v.push_back(y[(b * C + c) * S + s]);
            out[c] = moments(v);
        }
        return out;
    };

    nn::ForwardContext ctx;
    const auto ideal = channel_stats(nn::forward_layer(L, x, 0, ctx));

    SweepTable t;
    t.study = "bn_drift";
    t.axis_names = {"sigma"};
    t.axis_values.emplace_back();
    t.columns = {"mean_drift_avg", "mean_drift_max", "var_drift_avg", "var_drift_max", "var_change_signed"};
    for (double sigma : cfg.sigmas) {
        t.axis_values[0].push_back(format_double(sigma));
        auto ni = std::make_shared<nonideal::NonIdealModel>();
        if (cfg.use_curves) ni->curves = bank;
        ni->noise = {sigma, derive_seed(cfg.seed, 0x6e6f697365)};
        nn::EvalInterface iface{std::nullopt, ni};
        nn::ForwardContext nctx;
        nctx.iface = &iface;
        const auto real = channel_stats(nn::forward_layer(L, x, 0, nctx));
        double md_avg = 0, md_max = 0, vd_avg = 0, vd_max = 0, v_signed = 0;
        for (std::size_t c = 0; c < C; ++c) {
            const double md = std::abs(real[c].mean - ideal[c].mean) / std::max(std::abs(ideal[c].mean), 1e-300);
            const double vs = (real[c].var - ideal[c].var) / std::max(ideal[c].var, 1e-300);
            md_avg += md / static_cast<double>(C);
            md_max = std::max(md_max, md);
            vd_avg += std::abs(vs) / static_cast<double>(C);
            vd_max = std::max(vd_max, std::abs(vs));
            v_signed += vs / static_cast<double>(C);
        }
        t.cells.push_back({md_avg, md_max, vd_avg, vd_max, v_signed});
    }
    set_meta(t, cfg.to_json(), cfg.seed);
    return t;
}

// ---------------------------------------------------------------- gradient ratio

json GradRatioConfig::to_json() const {
    return {{"study", "gradient_ratio"}, {"blocks", blocks}, {"widths", widths}, {"scheme", scheme_json(scheme)},
            {"b_imc", b_imc}, {"xi_mode", xi_mode == nn::XiMode::fixed ? "fixed" : "measured"},
            {"xi_fixed", xi_fixed}, {"eta", eta}, {"gamma", gamma}, {"beta", beta}, {"batch", batch}, {"batches", batches},
            {"b_w", b_w}, {"b_a", b_a}, {"unit_in_channels", unit_in_channels}, {"seed", seed}};
}

SweepTable gradient_ratio_check(const GradRatioConfig& cfg) {
    require(cfg.blocks >= 4, "gradient_ratio_check: needs at least 4 blocks");
    require(cfg.batches >= 1 && cfg.batch >= 2, "gradient_ratio_check: empty sampling");
    std::vector<std::size_t> widths = cfg.widths;
    if (widths.empty()) widths.assign(cfg.blocks + 1, 144);
    require(widths.size() == cfg.blocks + 1, "gradient_ratio_check: widths needs blocks + 1 entries");

    std::vector<nn::Layer> stack;
    for (std::size_t l = 0; l < cfg.blocks; ++l) {
        nn::Layer L;
        L.kind = nn::LayerKind::dense;
        L.in_ch = widths[l];
        L.out_ch = widths[l + 1];
        L.b_w = cfg.b_w;
        L.b_a = cfg.b_a;
        L.pim_layer = true;
        L.cfg.scheme = cfg.scheme;
        L.cfg.b_imc = to_res(cfg.b_imc);
        L.cfg.unit_in_channels = std::min(cfg.unit_in_channels, widths[l]);
        L.cfg.forward_scale = cfg.eta;
        L.xi_mode = cfg.xi_mode;
        L.xi_fixed = cfg.xi_fixed;
        L.act = nn::Activation::identity;
        L.W = Tensor({widths[l + 1], widths[l]});
        L.bn = nn::BNState(widths[l + 1]);
        std::fill(L.bn.gamma.begin(), L.bn.gamma.end(), cfg.gamma);
        std::fill(L.bn.beta.begin(), L.bn.beta.end(), cfg.beta);
        stack.push_back(std::move(L));
    }

    const std::size_t nb = cfg.blocks;
    std::vector<double> measured(nb, 0.0), predicted(nb, 0.0), xi(nb, 0.0), rho(nb, 0.0);
    for (std::size_t it = 0; it < cfg.batches; ++it) {
        Rng rng(derive_seed(cfg.seed, it));
        for (auto& L : stack) nn::kaiming_init(L, rng);
        Tensor h({cfg.batch, widths[0]});
        for (auto& v : h.data) v = rng.normal(cfg.beta, cfg.gamma);
        nn::ForwardContext ctx;
        ctx.bn = nn::BnMode::batch;
        ctx.keep_cache = true;
        ctx.tick = it;
        for (std::size_t l = 0; l < nb; ++l) h = nn::forward_layer(stack[l], h, l, ctx);
        Tensor g(h.shape);
        for (auto& v : g.data) v = rng.normal();
        std::vector<double> var(nb + 1);
        var[nb] = moments(g.data).var;
        for (std::size_t l = nb; l-- > 0;) {
            g = nn::backward_layer(stack[l], g);
            var[l] = moments(g.data).var;
        }
        for (std::size_t l = 0; l < nb; ++l) {
            const double x = stack[l].last_xi, r = stack[l].last_rho;
            measured[l] += var[l] / var[l + 1] / static_cast<double>(cfg.batches);
            predicted[l] += (x / r) * (x / r) * static_cast<double>(widths[l + 1]) /
                            static_cast<double>(widths[l]) / static_cast<double>(cfg.batches);
            xi[l] += x / static_cast<double>(cfg.batches);
            rho[l] += r / static_cast<double>(cfg.batches);
        }
    }

    SweepTable t;
    t.study = "gradient_ratio";
    t.axis_names = {"layer"};
    t.axis_values.emplace_back();
    t.columns = {"measured", "predicted", "rel_error", "xi", "rho"};
    for (std::size_t l = 0; l < nb; ++l) {
        t.axis_values[0].push_back(std::to_string(l));
        t.cells.push_back({measured[l], predicted[l], std::abs(measured[l] / predicted[l] - 1.0), xi[l], rho[l]});
    }
    set_meta(t, cfg.to_json(), cfg.seed);
    return t;
}

double max_relative_error(const SweepTable& t) {
    const auto it = std::find(t.columns.begin(), t.columns.end(), "rel_error");
    require(it != t.columns.end(), "max_relative_error: table has no rel_error column");
    const auto k = static_cast<std::size_t>(it - t.columns.begin());
    double m = 0.0;
    for (const auto& row : t.cells) m = std::max(m, row[k]);
    return m;
}

// ---------------------------------------------------------------- noise / ENOB

json NoiseErrorConfig::to_json() const {
    return {{"study", "noise_error"}, {"b_imc", b_imc}, {"sigmas", sigmas}, {"samples", samples}, {"seed", seed}};
}

SweepTable noise_error_study(const NoiseErrorConfig& cfg, const nonideal::CurveBank* curves) {
    const auto rows = nonideal::error_std_sweep(Resolution(cfg.b_imc), curves, cfg.sigmas, cfg.samples, cfg.seed);
    SweepTable t;
    t.study = "noise_error";
    t.axis_names = {"sigma"};
    t.axis_values.emplace_back();
    t.columns = {"error_std", "normalized_std", "closed_form"};
    for (const auto& r : rows) {
        t.axis_values[0].push_back(format_double(r.sigma));
        t.cells.push_back({r.error_std, r.normalized_std, std::sqrt(1.0 + 12.0 * r.sigma * r.sigma)});
    }
    json meta = cfg.to_json();
    meta["curves"] = curves != nullptr;
    set_meta(t, meta, cfg.seed);
    return t;
}

}  // namespace pimqat::diag
