#include "pimqat/experiment.hpp"

#include <yaml-cpp/yaml.h>

#include <cctype>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <functional>
#include <limits>
#include <set>
#include <sstream>

#ifndef PIMQAT_VERSION
#define PIMQAT_VERSION "unknown"
#endif

namespace pimqat::exp {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- YAML

namespace {

json scalar_to_json(const YAML::Node& n) {
    const std::string& s = n.Scalar();
    if (n.Tag() == "!") return s;  // quoted
    if (s == "true" || s == "True") return true;
    if (s == "false" || s == "False") return false;
    if (s == "null" || s == "~" || s.empty()) return nullptr;
    const char* b = s.data();
    const char* e = b + s.size();
    std::int64_t i = 0;
    if (auto r = std::from_chars(b, e, i); r.ec == std::errc() && r.ptr == e) return i;
    std::uint64_t u = 0;
    if (auto r = std::from_chars(b, e, u); r.ec == std::errc() && r.ptr == e) return u;
    double d = 0.0;
    const bool numeric_start = std::isdigit(static_cast<unsigned char>(s[0])) || s[0] == '-' || s[0] == '+' || s[0] == '.';
    if (auto r = std::from_chars(b, e, d); numeric_start && r.ec == std::errc() && r.ptr == e && std::isfinite(d))
        return d;
    return s;
}

json node_to_json(const YAML::Node& n) {
    switch (n.Type()) {
        case YAML::NodeType::Null:
        case YAML::NodeType::Undefined:
            return nullptr;
        case YAML::NodeType::Scalar:
            return scalar_to_json(n);
        case YAML::NodeType::Sequence: {
            json a = json::array();
            for (const auto& c : n) a.push_back(node_to_json(c));
            return a;
        }
        case YAML::NodeType::Map: {
            json o = json::object();
            for (const auto& kv : n) {
                const auto key = kv.first.as<std::string>();
                if (o.contains(key)) throw Error("duplicate key '" + key + "'");
                o[key] = node_to_json(kv.second);
            }
            return o;
        }
    }
    return nullptr;
}

}  // namespace

json yaml_to_json(const std::string& yaml_text, const std::string& source) {
    try {
        return node_to_json(YAML::Load(yaml_text));
    } catch (const YAML::Exception& e) {
        throw Error(source + ": " + e.what());
    } catch (const Error& e) {
        throw Error(source + ": " + e.what());
    }
}

// ---------------------------------------------------------------- strict reader

namespace {

template <class T>
struct is_vector : std::false_type {};
template <class T>
struct is_vector<std::vector<T>> : std::true_type {};

template <class T>
T convert(const json& j, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
        if (!j.is_boolean()) throw Error(where + ": expected true or false");
        return j.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
        if (!j.is_string()) throw Error(where + ": expected a string");
        return j.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
        if (!j.is_number()) throw Error(where + ": expected a number");
        return j.get<T>();
    } else if constexpr (std::is_integral_v<T>) {
        if (!j.is_number_integer()) throw Error(where + ": expected an integer");
        if (j.is_number_unsigned()) {
            const auto v = j.get<std::uint64_t>();
            if (v > static_cast<std::uint64_t>(std::numeric_limits<T>::max())) throw Error(where + ": out of range");
            return static_cast<T>(v);
        }
        const auto v = j.get<std::int64_t>();
        if (std::is_unsigned_v<T> && v < 0) throw Error(where + ": must not be negative");
        if constexpr (std::is_signed_v<T>)
            if (v < std::numeric_limits<T>::min() || v > std::numeric_limits<T>::max())
                throw Error(where + ": out of range");
        return static_cast<T>(v);
    } else if constexpr (is_vector<T>::value) {
        if (!j.is_array()) throw Error(where + ": expected a list");
        T out;
        for (std::size_t i = 0; i < j.size(); ++i)
            out.push_back(convert<typename T::value_type>(j[i], where + "[" + std::to_string(i) + "]"));
        return out;
    } else {
        static_assert(sizeof(T) == 0, "unsupported field type");
    }
}

Resolution convert_res(const json& j, const std::string& where) {
    if (j.is_string() && j.get<std::string>() == "inf") return Resolution::infinite();
    if (!j.is_number_integer()) throw Error(where + ": expected a bit count or \"inf\"");
    const auto b = j.get<std::int64_t>();
    if (b < 1 || b > 16) throw Error(where + ": bit count must be in 1..16");
    return Resolution(static_cast<int>(b));
}

json res_json(Resolution r) { return r.is_infinite() ? json("inf") : json(r.bits()); }

pim::Scheme convert_scheme(const json& j, const std::string& where) {
    const auto s = convert<std::string>(j, where);
    try {
        return pim::scheme_from_string(s);
    } catch (const Error&) {
        throw Error(where + ": unknown scheme '" + s + "' (native, differential, bit_serial)");
    }
}

class Fields {
public:
    Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_null() && !j_.is_object()) throw Error(where_ + ": expected a mapping");
    }

    bool has(const std::string& k) {
        used_.insert(k);
        return j_.is_object() && j_.contains(k) && !j_.at(k).is_null();
    }
    const json& at(const std::string& k) const { return j_.at(k); }
    std::string path(const std::string& k) const { return where_.empty() ? k : where_ + "." + k; }

    template <class T>
    void get(const std::string& k, T& out) {
        if (has(k)) out = convert<T>(j_.at(k), path(k));
    }
    void res(const std::string& k, Resolution& out) {
        if (has(k)) out = convert_res(j_.at(k), path(k));
    }
    void scheme(const std::string& k, pim::Scheme& out) {
        if (has(k)) out = convert_scheme(j_.at(k), path(k));
    }
    Fields sub(const std::string& k) {
        used_.insert(k);
        static const json null_json;
        return Fields(j_.is_object() && j_.contains(k) ? j_.at(k) : null_json, path(k));
    }

    void done() const {
        if (!j_.is_object()) return;
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.count(it.key())) throw Error(path(it.key()) + ": unknown key");
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> used_;
};

/// b_imc in study configs: integer bits, 0 or "inf" for infinite.
int study_bits(const json& j, const std::string& where) {
    if (j.is_number_integer() && j.get<std::int64_t>() == 0) return 0;
    const auto r = convert_res(j, where);
    return r.is_infinite() ? 0 : r.bits();
}

}  // namespace

// ---------------------------------------------------------------- diag configs

diag::ScaleRatioConfig scale_ratio_from_json(const json& j) {
    diag::ScaleRatioConfig c;
    Fields f(j, "diag");
    f.has("study");
    f.scheme("scheme", c.scheme);
    if (f.has("b_imc")) {
        const auto& a = f.at("b_imc");
        if (!a.is_array()) throw Error("diag.b_imc: expected a list");
        c.b_imc.clear();
        for (std::size_t i = 0; i < a.size(); ++i) c.b_imc.push_back(study_bits(a[i], "diag.b_imc[" + std::to_string(i) + "]"));
    }
    f.get("in_channels", c.in_channels);
    f.get("out_channels", c.out_channels);
    f.get("ksize", c.ksize);
    f.get("image", c.image);
    f.get("batch", c.batch);
    f.get("b_w", c.b_w);
    f.get("b_a", c.b_a);
    f.get("dac_bits", c.dac_bits);
    f.get("repeats", c.repeats);
    f.get("seed", c.seed);
    f.done();
    return c;
}

diag::BnDriftConfig bn_drift_from_json(const json& j) {
    diag::BnDriftConfig c;
    Fields f(j, "diag");
    f.has("study");
    f.scheme("scheme", c.scheme);
    if (f.has("b_imc")) c.b_imc = study_bits(f.at("b_imc"), "diag.b_imc");
    f.get("sigmas", c.sigmas);
    f.get("use_curves", c.use_curves);
    auto v = f.sub("variation");
    v.get("sigma_offset", c.variation.sigma_offset);
    v.get("sigma_gain", c.variation.sigma_gain);
    v.get("seed", c.variation.seed);
    v.done();
    f.get("curve_count", c.curve_count);
    f.get("in_channels", c.in_channels);
    f.get("out_channels", c.out_channels);
    f.get("ksize", c.ksize);
    f.get("image", c.image);
    f.get("batch", c.batch);
    f.get("unit_out_channels", c.unit_out_channels);
    f.get("b_w", c.b_w);
    f.get("b_a", c.b_a);
    f.get("seed", c.seed);
    f.done();
    return c;
}

diag::GradRatioConfig grad_ratio_from_json(const json& j) {
    diag::GradRatioConfig c;
    Fields f(j, "diag");
    f.has("study");
    f.get("blocks", c.blocks);
    f.get("widths", c.widths);
    f.scheme("scheme", c.scheme);
    if (f.has("b_imc")) c.b_imc = study_bits(f.at("b_imc"), "diag.b_imc");
    if (f.has("xi_mode")) {
        const auto m = convert<std::string>(f.at("xi_mode"), "diag.xi_mode");
        if (m != "measured" && m != "fixed") throw Error("diag.xi_mode: expected measured or fixed");
        c.xi_mode = m == "fixed" ? nn::XiMode::fixed : nn::XiMode::measured;
    }
    f.get("xi_fixed", c.xi_fixed);
    f.get("eta", c.eta);
    f.get("gamma", c.gamma);
    f.get("beta", c.beta);
    f.get("batch", c.batch);
    f.get("batches", c.batches);
    f.get("b_w", c.b_w);
    f.get("b_a", c.b_a);
    f.get("unit_in_channels", c.unit_in_channels);
    f.get("seed", c.seed);
    f.done();
    return c;
}

diag::NoiseErrorConfig noise_error_from_json(const json& j) {
    diag::NoiseErrorConfig c;
    Fields f(j, "diag");
    f.has("study");
    if (f.has("b_imc")) c.b_imc = study_bits(f.at("b_imc"), "diag.b_imc");
    f.get("sigmas", c.sigmas);
    f.get("samples", c.samples);
    f.get("seed", c.seed);
    f.done();
    return c;
}

namespace {

json normalize_diag(json j, std::uint64_t seed) {
    if (!j.is_object()) throw Error("diag: expected a mapping");
    if (!j.contains("study") || !j["study"].is_string())
        throw Error("diag.study: required (scale_ratio, bn_drift, gradient_ratio, noise_error)");
    if (!j.contains("seed") || j["seed"].is_null()) j["seed"] = seed;
    const std::string s = j["study"];
    if (s == "scale_ratio") return scale_ratio_from_json(j).to_json();
    if (s == "bn_drift") return bn_drift_from_json(j).to_json();
    if (s == "gradient_ratio") return grad_ratio_from_json(j).to_json();
    if (s == "noise_error") return noise_error_from_json(j).to_json();
    throw Error("diag.study: unknown study '" + s + "'");
}

const std::set<std::string> dataset_kinds{"cifar10_binary", "synthetic_blobs", "synthetic_moons",
                                          "synthetic_patterns"};

}  // namespace

// ---------------------------------------------------------------- config

Config config_from_json(const json& j) {
    Config c;
    Fields top(j, "");
    if (!top.has("schema")) throw Error("schema: required (current version " + std::to_string(schema_version) + ")");
    int schema = 0;
    top.get("schema", schema);
    if (schema != schema_version)
        throw Error("schema: unsupported version " + std::to_string(schema) + " (expected " +
                    std::to_string(schema_version) + ")");
    top.get("seed", c.seed);

    auto d = top.sub("dataset");
    d.get("kind", c.dataset.kind);
    if (!dataset_kinds.count(c.dataset.kind)) throw Error("dataset.kind: unknown kind '" + c.dataset.kind + "'");
    d.get("path", c.dataset.path);
    d.get("train_size", c.dataset.train_size);
    d.get("test_size", c.dataset.test_size);
    d.get("classes", c.dataset.classes);
    d.get("features", c.dataset.features);
    d.get("separation", c.dataset.separation);
    d.get("noise", c.dataset.noise);
    d.get("channels", c.dataset.channels);
    d.get("image_size", c.dataset.image_size);
    d.done();
    if (c.dataset.kind == "cifar10_binary") {
        c.dataset.classes = 10;
        c.dataset.channels = 3;
        c.dataset.image_size = 32;
    }
    if (c.dataset.kind == "synthetic_moons") c.dataset.classes = 2;
    require(c.dataset.classes >= 2, "dataset.classes: at least 2");

    auto m = top.sub("model");
    m.get("arch", c.model.arch);
    require(c.model.arch == "mlp" || c.model.arch == "cnn4", "model.arch: expected mlp or cnn4");
    m.get("width", c.model.width);
    m.get("hidden", c.model.hidden);
    m.get("b_w", c.model.b_w);
    m.get("b_a", c.model.b_a);
    m.done();
    require(c.model.width >= 1 && !c.model.hidden.empty(), "model: empty layers");
    require(c.model.b_w >= 2 && c.model.b_w <= 8 && c.model.b_a >= 1 && c.model.b_a <= 8,
            "model: b_w must be in 2..8 and b_a in 1..8");

    auto p = top.sub("pim");
    p.get("enabled", c.pim.pim);
    p.scheme("scheme", c.pim.scheme);
    p.res("b_imc", c.pim.b_imc);
    p.get("dac_bits", c.pim.dac_bits);
    p.get("unit_in_channels", c.pim.unit_in_channels);
    p.get("unit_out_channels", c.pim.unit_out_channels);
    if (p.has("eta")) {
        const auto& e = p.at("eta");
        if (!(e.is_string() && e.get<std::string>() == "auto")) c.pim.eta = convert<double>(e, "pim.eta");
    }
    if (p.has("xi")) {
        const auto& x = p.at("xi");
        if (!(x.is_string() && x.get<std::string>() == "measured")) {
            c.pim.xi_mode = nn::XiMode::fixed;
            c.pim.xi_fixed = convert<double>(x, "pim.xi");
        }
    }
    p.done();
    require(c.pim.dac_bits >= 1 && c.model.b_a % c.pim.dac_bits == 0, "pim.dac_bits: must divide model.b_a");
    require(c.pim.unit_in_channels >= 1 && c.pim.unit_out_channels >= 1, "pim: unit sizes must be positive");
    require(!c.pim.eta || *c.pim.eta > 0.0, "pim.eta: must be positive");

    auto t = top.sub("train");
    t.get("epochs", c.train.epochs);
    t.get("batch_size", c.train.batch_size);
    t.get("lr", c.train.lr0);
    t.get("milestones", c.train.lr_milestones);
    t.get("lr_decay", c.train.lr_decay);
    t.get("momentum", c.train.momentum);
    t.get("weight_decay", c.train.weight_decay);
    c.augment_set = t.has("augment");
    t.get("augment", c.train.augment);
    t.done();
    const bool cifar = c.dataset.kind == "cifar10_binary";
    if (!c.augment_set) c.train.augment = cifar;
    require(!c.train.augment || cifar, "train.augment: augmentation applies to cifar10_binary only");
    c.train.seed = c.seed;
    c.train.validate();

    auto i = top.sub("interface");
    if (i.has("b_imc")) {
        Resolution r;
        i.res("b_imc", r);
        c.iface.b_imc = r;
    }
    i.get("noise_sigma", c.iface.noise_sigma);
    require(c.iface.noise_sigma >= 0.0, "interface.noise_sigma: must not be negative");
    if (i.has("noise_seed")) {
        std::uint64_t s = 0;
        i.get("noise_seed", s);
        c.iface.noise_seed = s;
    }
    i.get("curves", c.iface.curves);
    c.iface.variation = i.has("variation");
    auto v = i.sub("variation");
    v.get("sigma_offset", c.iface.variation_spec.sigma_offset);
    v.get("sigma_gain", c.iface.variation_spec.sigma_gain);
    v.get("count", c.iface.variation_count);
    v.get("seed", c.iface.variation_spec.seed);
    v.done();
    i.done();
    require(!(c.iface.variation && !c.iface.curves.empty()), "interface: give either curves or variation, not both");
    require(c.iface.variation_count >= 1, "interface.variation.count: at least 1");

    auto cal = top.sub("calibrate");
    cal.get("batches", c.calib.num_batches);
    cal.get("batch_size", c.calib.batch_size);
    cal.done();
    c.calib.seed = derive_seed(c.seed, 0x63616c6962);
    require(c.calib.num_batches >= 1 && c.calib.batch_size >= 2, "calibrate: needs batches >= 1 and batch_size >= 2");

    auto ev = top.sub("eval");
    ev.get("batch_size", c.eval_batch_size);
    ev.done();
    require(c.eval_batch_size >= 1, "eval.batch_size: at least 1");

    auto s = top.sub("sweep");
    if (s.has("b_imc")) {
        const auto& a = s.at("b_imc");
        if (!a.is_array()) throw Error("sweep.b_imc: expected a list");
        for (std::size_t k = 0; k < a.size(); ++k)
            c.sweep.b_imc.push_back(convert_res(a[k], "sweep.b_imc[" + std::to_string(k) + "]"));
    }
    s.get("sigma", c.sweep.sigma);
    if (s.has("scheme")) {
        const auto& a = s.at("scheme");
        if (!a.is_array()) throw Error("sweep.scheme: expected a list");
        for (std::size_t k = 0; k < a.size(); ++k)
            c.sweep.scheme.push_back(convert_scheme(a[k], "sweep.scheme[" + std::to_string(k) + "]"));
    }
    s.get("b_train", c.sweep.b_train);
    s.done();
    require(c.sweep.b_imc.empty() || c.sweep.b_train.empty(), "sweep: b_imc and b_train are exclusive axes");
    for (double x : c.sweep.sigma) require(x >= 0.0, "sweep.sigma: must not be negative");
    for (int b : c.sweep.b_train) require(b >= 1 && b <= 16, "sweep.b_train: bit count must be in 1..16");
    if (!c.sweep.b_train.empty()) require(c.iface.b_imc.has_value(), "sweep.b_train: needs interface.b_imc (b_infer)");

    if (top.has("diag")) c.diag = normalize_diag(top.at("diag"), c.seed);
    top.done();
    return c;
}

json Config::to_json() const {
    json sweep_j = {{"b_imc", json::array()}, {"sigma", sweep.sigma}, {"scheme", json::array()}, {"b_train", sweep.b_train}};
    for (auto r : sweep.b_imc) sweep_j["b_imc"].push_back(res_json(r));
    for (auto s : sweep.scheme) sweep_j["scheme"].push_back(pim::to_string(s));
    json variation = nullptr;
    if (iface.variation)
        variation = {{"sigma_offset", iface.variation_spec.sigma_offset},
                     {"sigma_gain", iface.variation_spec.sigma_gain},
                     {"count", iface.variation_count},
                     {"seed", iface.variation_spec.seed}};
    return {
        {"schema", schema_version},
        {"seed", seed},
        {"dataset",
         {{"kind", dataset.kind}, {"path", dataset.path}, {"train_size", dataset.train_size},
          {"test_size", dataset.test_size}, {"classes", dataset.classes}, {"features", dataset.features},
          {"separation", dataset.separation}, {"noise", dataset.noise}, {"channels", dataset.channels},
          {"image_size", dataset.image_size}}},
        {"model",
         {{"arch", model.arch}, {"width", model.width}, {"hidden", model.hidden}, {"b_w", model.b_w},
          {"b_a", model.b_a}}},
        {"pim",
         {{"enabled", pim.pim}, {"scheme", pim::to_string(pim.scheme)}, {"b_imc", res_json(pim.b_imc)},
          {"dac_bits", pim.dac_bits}, {"unit_in_channels", pim.unit_in_channels},
          {"unit_out_channels", pim.unit_out_channels}, {"eta", pim.eta ? json(*pim.eta) : json("auto")},
          {"xi", pim.xi_mode == nn::XiMode::fixed ? json(pim.xi_fixed) : json("measured")}}},
        {"train",
         {{"epochs", train.epochs}, {"batch_size", train.batch_size}, {"lr", train.lr0},
          {"milestones", train.lr_milestones}, {"lr_decay", train.lr_decay}, {"momentum", train.momentum},
          {"weight_decay", train.weight_decay}, {"augment", train.augment}}},
        {"interface",
         {{"b_imc", iface.b_imc ? res_json(*iface.b_imc) : json(nullptr)}, {"noise_sigma", iface.noise_sigma},
          {"noise_seed", iface.noise_seed ? json(*iface.noise_seed) : json(nullptr)}, {"curves", iface.curves},
          {"variation", variation}}},
        {"calibrate", {{"batches", calib.num_batches}, {"batch_size", calib.batch_size}}},
        {"eval", {{"batch_size", eval_batch_size}}},
        {"sweep", sweep_j},
        {"diag", diag},
    };
}

Config load_config(const fs::path& path) { return parse_config_text(read_text(path), path.string()); }

Config parse_config_text(const std::string& yaml_text, const std::string& source) {
    const json j = yaml_to_json(yaml_text, source);
    try {
        return config_from_json(j);
    } catch (const Error& e) {
        throw Error(source + ": " + e.what());
    }
}

std::string version_string() { return PIMQAT_VERSION; }

// ---------------------------------------------------------------- building blocks

Datasets load_datasets(const Config& cfg) {
    const auto& d = cfg.dataset;
    const std::uint64_t gen_seed = derive_seed(cfg.seed, 0x64617461);
    Datasets out;
    if (d.kind == "cifar10_binary") {
        fs::path dir = data::find_cifar10(d.path);
        if (dir.empty()) dir = d.path;  // load_cifar10 reports what is missing and where to get it
        const auto train_all = data::load_cifar10(dir, true);
        const auto test_all = data::load_cifar10(dir, false);
        out.train = d.train_size ? data::balanced_subset(train_all, d.train_size, derive_seed(gen_seed, 1)) : train_all;
        out.test = d.test_size ? data::balanced_subset(test_all, d.test_size, derive_seed(gen_seed, 2)) : test_all;
        return out;
    }
    require(d.train_size >= 2 && d.test_size >= 1, "dataset: synthetic sets need train_size >= 2 and test_size >= 1");
    const std::size_t n = d.train_size + d.test_size;
    data::Dataset all;
    if (d.kind == "synthetic_blobs")
        all = data::make_blobs(n, d.classes, d.features, d.separation, gen_seed);
    else if (d.kind == "synthetic_moons")
        all = data::make_moons(n, d.noise, gen_seed);
    else
        all = data::make_pattern_images(n, d.classes, d.channels, d.image_size, d.noise, gen_seed);
    // Generators cycle through the classes, so both halves stay balanced.
    auto [tr, te] = data::split(all, d.train_size);
    out.train = std::move(tr);
    out.test = std::move(te);
    return out;
}

nn::Model build_model(const Config& cfg, const data::Dataset& sample, std::optional<Resolution> b_train) {
    nn::PimSpec spec = cfg.pim;
    if (b_train) spec.b_imc = *b_train;
    const std::uint64_t seed = derive_seed(cfg.seed, 0x6d6f64656c);
    const auto classes = static_cast<std::size_t>(sample.classes);
    if (cfg.model.arch == "cnn4") {
        require(sample.images && sample.sample_shape.size() == 3, "model.arch cnn4: needs an image dataset");
        return nn::make_cnn4(sample.sample_shape[0], cfg.model.width, classes, spec, seed, cfg.model.b_w, cfg.model.b_a);
    }
    return nn::make_mlp(sample.sample_size(), cfg.model.hidden, classes, spec, seed, cfg.model.b_w, cfg.model.b_a);
}

namespace {

Resolution trained_b_imc(const Config& cfg) { return cfg.pim.pim ? cfg.pim.b_imc : Resolution::infinite(); }

Resolution infer_b_imc(const Config& cfg) { return cfg.iface.b_imc.value_or(trained_b_imc(cfg)); }

bool nonideal_active(const Config& cfg) {
    return cfg.iface.noise_sigma > 0.0 || cfg.iface.variation || !cfg.iface.curves.empty();
}

}  // namespace

nn::EvalInterface build_interface(const Config& cfg) {
    nn::EvalInterface it = ideal_interface(cfg);
    if (!nonideal_active(cfg)) return it;
    const Resolution b = infer_b_imc(cfg);
    require(!b.is_infinite(), "interface: curves and noise need a finite b_imc");
    auto ni = std::make_shared<nonideal::NonIdealModel>();
    if (!cfg.iface.curves.empty())
        ni->curves = std::make_shared<nonideal::CurveBank>(nonideal::load_curve_bank(cfg.iface.curves, b.bits()));
    else if (cfg.iface.variation)
        ni->curves = std::make_shared<nonideal::CurveBank>(
            nonideal::generate_variation_curves(b.bits(), cfg.iface.variation_count, cfg.iface.variation_spec));
    ni->noise.sigma_lsb = cfg.iface.noise_sigma;
    ni->noise.seed = cfg.iface.noise_seed.value_or(derive_seed(cfg.seed, 0x6e6f697365));
    it.nonideal = std::move(ni);
    return it;
}

nn::EvalInterface ideal_interface(const Config& cfg) {
    nn::EvalInterface it;
    if (cfg.iface.b_imc) it.b_imc = *cfg.iface.b_imc;
    return it;
}

bool interface_differs(const Config& cfg) { return nonideal_active(cfg) || !(infer_b_imc(cfg) == trained_b_imc(cfg)); }

train::TrainConfig train_config(const Config& cfg) {
    auto t = cfg.train;
    t.seed = cfg.seed;
    return t;
}

json report_header(const Config& cfg, const std::string& command) {
    const auto cj = cfg.to_json();
    return {{"command", command},
            {"config_hash", config_hash(cj)},
            {"seed", cfg.seed},
            {"version", version_string()},
            {"config", cj},
            {"settings",
             {{"scheme", pim::to_string(cfg.pim.scheme)},
              {"pim_training", cfg.pim.pim},
              {"b_train", res_json(trained_b_imc(cfg))},
              {"b_infer", res_json(infer_b_imc(cfg))},
              {"b_w", cfg.model.b_w},
              {"b_a", cfg.model.b_a},
              {"eta", cfg.pim.eta ? *cfg.pim.eta : pim::default_forward_scale(cfg.pim.scheme, trained_b_imc(cfg))},
              {"xi", cfg.pim.xi_mode == nn::XiMode::fixed ? json(cfg.pim.xi_fixed) : json("measured")},
              {"noise_sigma", cfg.iface.noise_sigma},
              {"curves", cfg.iface.variation ? "variation" : cfg.iface.curves.empty() ? "none" : "file"}}}};
}

fs::path run_dir(const Config& cfg, const fs::path& out) { return out / cfg.hash(); }

// ---------------------------------------------------------------- commands

namespace {

json epochs_json(const train::TrainReport& rep) {
    json a = json::array();
    for (const auto& e : rep.epochs)
        a.push_back({{"epoch", e.epoch},
                     {"lr", e.lr},
                     {"train_loss", e.train_loss},
                     {"train_acc", e.train_acc},
                     {"test_acc", e.test_acc ? json(*e.test_acc) : json(nullptr)}});
    return a;
}

std::string epochs_csv(const train::TrainReport& rep) {
    std::ostringstream os;
    os << "epoch,lr,train_loss,train_acc,test_acc\n";
    for (const auto& e : rep.epochs)
        os << e.epoch << ',' << format_double(e.lr) << ',' << format_double(e.train_loss) << ','
           << format_double(e.train_acc) << ',' << (e.test_acc ? format_double(*e.test_acc) : "") << '\n';
    return os.str();
}

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// Wall-clock lives beside the report so the report itself stays reproducible.
void write_timing(const fs::path& dir, const std::string& command, double seconds) {
    write_text(dir / (command + "_timing.json"), canonical_dump({{"command", command}, {"wall_clock_s", seconds}}));
}

train::EvalOptions eval_opts(const Config& cfg, const nn::EvalInterface* it) { return {cfg.eval_batch_size, it, 0}; }

fs::path checkpoint_or_default(const Config& cfg, const fs::path& out, const fs::path& checkpoint) {
    const auto p = checkpoint.empty() ? run_dir(cfg, out) / "model.ckpt" : checkpoint;
    require(fs::exists(p), "checkpoint " + p.string() + " not found (run `train` with this config or pass --checkpoint)");
    return p;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace

json run_pipeline(const Config& cfg, nn::Model* model_out) {
    const auto ds = load_datasets(cfg);
    nn::Model m = build_model(cfg, ds.train);
    const auto rep = train::train(m, train_config(cfg), ds.train, &ds.test);
    json r = report_header(cfg, "pipeline");
    r["epochs"] = epochs_json(rep);
    json fin = {{"diverged", rep.diverged}, {"diverged_epoch", rep.diverged_epoch}, {"error", rep.error}};
    if (!rep.diverged) {
        fin["trained_accuracy"] = train::evaluate(m, ds.test, eval_opts(cfg, nullptr));
        if (interface_differs(cfg)) {
            const auto it = build_interface(cfg);
            fin["interface_accuracy"] = train::evaluate(m, ds.test, eval_opts(cfg, &it));
            train::bn_calibrate(m, ds.train, cfg.calib, &it);
            fin["calibrated_accuracy"] = train::evaluate(m, ds.test, eval_opts(cfg, &it));
            fin["accuracy"] = fin["calibrated_accuracy"];
        } else {
            fin["accuracy"] = fin["trained_accuracy"];
        }
    }
    r["final"] = fin;
    if (model_out) *model_out = std::move(m);
    return r;
}

json cmd_train(const Config& cfg, const fs::path& out) {
    Stopwatch sw;
    const auto dir = run_dir(cfg, out);
    const auto ds = load_datasets(cfg);
    nn::Model m = build_model(cfg, ds.train);
    const auto rep = train::train(m, train_config(cfg), ds.train, &ds.test);
    json r = report_header(cfg, "train");
    r["epochs"] = epochs_json(rep);
    r["final"] = {{"diverged", rep.diverged},
                  {"diverged_epoch", rep.diverged_epoch},
                  {"error", rep.error},
                  {"test_accuracy", rep.final_test_acc ? json(*rep.final_test_acc) : json(nullptr)}};
    write_text(dir / "train_report.json", canonical_dump(r));
    write_text(dir / "train_metrics.csv", epochs_csv(rep));
    if (!rep.diverged) nn::save_checkpoint(m, dir / "model.ckpt");
    write_timing(dir, "train", sw.seconds());
    return r;
}

json cmd_eval(const Config& cfg, const fs::path& out, const fs::path& checkpoint) {
    Stopwatch sw;
    const auto dir = run_dir(cfg, out);
    const auto ckpt = checkpoint_or_default(cfg, out, checkpoint);
    const auto text = read_text(ckpt);
    nn::Model m = nn::checkpoint_from_json(text);
    const auto ds = load_datasets(cfg);
    const auto it = build_interface(cfg);
    json r = report_header(cfg, "eval");
    r["checkpoint_fnv1a"] = hex64(fnv1a(text));
    r["final"] = {{"trained_accuracy", train::evaluate(m, ds.test, eval_opts(cfg, nullptr))},
                  {"accuracy", train::evaluate(m, ds.test, eval_opts(cfg, &it))}};
    write_text(dir / "eval_report.json", canonical_dump(r));
    write_timing(dir, "eval", sw.seconds());
    return r;
}

json cmd_calibrate(const Config& cfg, const fs::path& out, const fs::path& checkpoint) {
    Stopwatch sw;
    const auto dir = run_dir(cfg, out);
    const auto ckpt = checkpoint_or_default(cfg, out, checkpoint);
    const auto text = read_text(ckpt);
    nn::Model m = nn::checkpoint_from_json(text);
    const auto ds = load_datasets(cfg);
    const auto it = build_interface(cfg);
    const auto ideal = ideal_interface(cfg);
    json r = report_header(cfg, "calibrate");
    r["checkpoint_fnv1a"] = hex64(fnv1a(text));
    json fin;
    fin["reference_accuracy"] = train::evaluate(m, ds.test, eval_opts(cfg, &ideal));
    fin["uncalibrated_accuracy"] = train::evaluate(m, ds.test, eval_opts(cfg, &it));
    train::bn_calibrate(m, ds.train, cfg.calib, &it);
    fin["calibrated_accuracy"] = train::evaluate(m, ds.test, eval_opts(cfg, &it));
    r["final"] = fin;
    nn::save_checkpoint(m, dir / "model_calibrated.ckpt");
    write_text(dir / "calibrate_report.json", canonical_dump(r));
    write_timing(dir, "calibrate", sw.seconds());
    return r;
}

std::vector<SweepChild> expand_sweep(const Config& cfg, std::vector<std::string>& axis_names,
                                     std::vector<std::vector<std::string>>& axis_values) {
    require(!cfg.sweep.empty(), "sweep: no axes given (b_imc, sigma, scheme, b_train)");
    using Apply = std::function<void(Config&, std::size_t)>;
    std::vector<Apply> apply;
    axis_names.clear();
    axis_values.clear();
    const auto& s = cfg.sweep;
    if (!s.b_imc.empty()) {
        axis_names.push_back("b_imc");
        axis_values.emplace_back();
        for (auto r : s.b_imc) axis_values.back().push_back(r.str());
        apply.push_back([&s](Config& c, std::size_t i) {
            c.pim.b_imc = s.b_imc[i];
            c.iface.b_imc.reset();
        });
    }
    if (!s.sigma.empty()) {
        axis_names.push_back("sigma");
        axis_values.emplace_back();
        for (double v : s.sigma) axis_values.back().push_back(format_double(v));
        apply.push_back([&s](Config& c, std::size_t i) { c.iface.noise_sigma = s.sigma[i]; });
    }
    if (!s.scheme.empty()) {
        axis_names.push_back("scheme");
        axis_values.emplace_back();
        for (auto v : s.scheme) axis_values.back().push_back(pim::to_string(v));
        apply.push_back([&s](Config& c, std::size_t i) { c.pim.scheme = s.scheme[i]; });
    }
    if (!s.b_train.empty()) {
        axis_names.push_back("b_train");
        axis_values.emplace_back();
        for (int v : s.b_train) axis_values.back().push_back(std::to_string(v));
        apply.push_back([&s](Config& c, std::size_t i) { c.pim.b_imc = Resolution(s.b_train[i]); });
    }
    std::size_t total = 1;
    for (const auto& v : axis_values) total *= v.size();
    std::vector<SweepChild> out;
    for (std::size_t r = 0; r < total; ++r) {
        SweepChild ch{cfg, {}};
        ch.config.sweep = {};
        std::size_t rem = r;
        std::vector<std::size_t> idx(axis_values.size());
        for (std::size_t a = axis_values.size(); a-- > 0;) {
            idx[a] = rem % axis_values[a].size();
            rem /= axis_values[a].size();
        }
        for (std::size_t a = 0; a < idx.size(); ++a) {
            apply[a](ch.config, idx[a]);
            ch.point.push_back(axis_values[a][idx[a]]);
        }
        out.push_back(std::move(ch));
    }
    return out;
}

json cmd_sweep(const Config& cfg, const fs::path& out) {
    Stopwatch sw;
    const auto dir = run_dir(cfg, out);
    diag::SweepTable t;
    t.study = "sweep";
    t.columns = {"accuracy", "trained_accuracy", "interface_accuracy", "diverged"};
    const auto children = expand_sweep(cfg, t.axis_names, t.axis_values);
    json child_list = json::array();
    for (const auto& ch : children) {
        const auto h = ch.config.hash();
        json r = run_pipeline(ch.config);
        r["command"] = "sweep-child";
        r["parent_config_hash"] = cfg.hash();
        r["point"] = ch.point;
        write_text(dir / "children" / h / "report.json", canonical_dump(r));
        const auto& f = r["final"];
        const bool div = f["diverged"].get<bool>();
        // A diverged child has no accuracy; 0 keeps the table numeric and the flag marks it.
        auto acc = [&](const char* k) { return !div && f.contains(k) ? f[k].get<double>() : 0.0; };
        t.cells.push_back({acc("accuracy"), acc("trained_accuracy"),
                           f.contains("interface_accuracy") ? acc("interface_accuracy") : acc("trained_accuracy"),
                           div ? 1.0 : 0.0});
        child_list.push_back({{"point", ch.point}, {"config_hash", h}});
    }
    diag::set_meta(t, cfg.to_json(), cfg.seed);
    write_text(dir / "grid.json", canonical_dump(t.to_json()));
    write_text(dir / "grid.csv", t.to_csv());
    json r = report_header(cfg, "sweep");
    r["children"] = child_list;
    r["grid"] = t.to_json();
    write_text(dir / "sweep_report.json", canonical_dump(r));
    write_timing(dir, "sweep", sw.seconds());
    return r;
}

json cmd_diag(const Config& cfg, const fs::path& out) {
    require(!cfg.diag.is_null(), "diag: config has no diag section");
    Stopwatch sw;
    const auto dir = run_dir(cfg, out);
    const std::string study = cfg.diag.at("study");
    diag::SweepTable t;
    if (study == "scale_ratio")
        t = diag::scale_ratio_study(scale_ratio_from_json(cfg.diag));
    else if (study == "bn_drift")
        t = diag::bn_drift_study(bn_drift_from_json(cfg.diag));
    else if (study == "gradient_ratio")
        t = diag::gradient_ratio_check(grad_ratio_from_json(cfg.diag));
    else
        t = diag::noise_error_study(noise_error_from_json(cfg.diag));
    write_text(dir / ("diag_" + study + ".json"), canonical_dump(t.to_json()));
    write_text(dir / ("diag_" + study + ".csv"), t.to_csv());
    json r = report_header(cfg, "diag");
    r["table"] = t.to_json();
    write_text(dir / "diag_report.json", canonical_dump(r));
    write_timing(dir, "diag", sw.seconds());
    return r;
}

}  // namespace pimqat::exp
