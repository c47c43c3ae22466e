// pimqat: experiment runner.
//
//   pimqat train     --config run.yaml --out runs
//   pimqat eval      --config run.yaml --out runs [--checkpoint m.ckpt]
//   pimqat calibrate --config run.yaml --out runs [--checkpoint m.ckpt]
//   pimqat sweep     --config sweep.yaml --out runs
//   pimqat diag      --config study.yaml --out runs
//   pimqat gen-curves --bits 7 --count 32 --sigma-offset 2.04 --sigma-gain 0.024 --out curves.txt
//   pimqat oracle    [--cases data/oracle_cases.json] [--generate 100 --out cases.json]

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <thread>

#include "pimqat/experiment.hpp"
#include "pimqat/oracle.hpp"
#include "pimqat/pim.hpp"

using namespace pimqat;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::string out = "runs";
    std::optional<std::uint64_t> seed;
    unsigned threads = std::max(1u, std::thread::hardware_concurrency());
    std::string checkpoint;
};

void add_common(CLI::App* sub, Common& c, bool checkpoint) {
    sub->add_option("--config", c.config, "YAML experiment config")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", c.out, "output root; artifacts go to <out>/<config_hash>/");
    sub->add_option("--seed", c.seed, "overrides the config seed");
    sub->add_option("--threads", c.threads, "worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
    if (checkpoint) sub->add_option("--checkpoint", c.checkpoint, "model checkpoint (default <run dir>/model.ckpt)");
}

exp::Config load(const Common& c) {
    json j = exp::yaml_to_json(read_text(c.config), c.config);
    if (c.seed) {
        if (!j.is_object()) j = json::object();
        j["seed"] = *c.seed;
    }
    try {
        return exp::config_from_json(j);
    } catch (const Error& e) {
        throw Error(c.config + ": " + e.what());
    }
}

void print_final(const json& r) {
    std::cout << "config_hash " << r.at("config_hash").get<std::string>() << "\n";
    if (r.contains("final"))
        for (const auto& [k, v] : r.at("final").items()) std::cout << "  " << k << " " << v.dump() << "\n";
}

int run_oracle(const std::string& cases, std::size_t generate, const std::string& out, std::uint64_t seed) {
    if (generate > 0) {
        std::vector<oracle::MacCase> v;
        for (std::size_t i = 0; i < generate; ++i) v.push_back(oracle::random_case(derive_seed(seed, i), 16, 4, 8));
        oracle::save_case_file(out, v);
        std::cout << "wrote " << generate << " cases to " << out << "\n";
        return 0;
    }
    const auto entries = oracle::load_case_file(cases);
    std::size_t bad = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        const auto o = oracle::evaluate(e.mac);
        const auto r = oracle::run_pim(e.mac);
        const bool ok = oracle::to_string(o.value) == e.expected_value && o.codes == e.expected_codes &&
                        r.value_pim == boost::rational_cast<double>(o.value) && oracle::flat_codes(r) == o.codes;
        if (!ok) {
            ++bad;
            std::cerr << "case " << i << " (" << pim::to_string(e.mac.scheme) << ", b_imc " << e.mac.b_imc
                      << "): expected " << e.expected_value << ", oracle " << oracle::to_string(o.value) << ", pim "
                      << r.value_pim << "\n";
        }
    }
    std::cout << entries.size() - bad << "/" << entries.size() << " cases match\n";
    return bad == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PIM-aware quantization-aware training experiments"};
    app.require_subcommand(1);

    Common c;
    auto* train = app.add_subcommand("train", "train a model and save its checkpoint");
    add_common(train, c, false);
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint under the configured interface");
    add_common(eval, c, true);
    auto* calib = app.add_subcommand("calibrate", "recompute BN statistics under the configured interface");
    add_common(calib, c, true);
    auto* sweep = app.add_subcommand("sweep", "train and evaluate every point of the sweep grid");
    add_common(sweep, c, false);
    auto* diag = app.add_subcommand("diag", "run the analysis study in the diag section");
    add_common(diag, c, false);

    int bits = 7;
    std::size_t count = 32;
    double sigma_offset = 2.04, sigma_gain = 0.024;
    std::uint64_t curve_seed = 0;
    std::string curve_out = "curves.txt";
    auto* gen = app.add_subcommand("gen-curves", "write a bank of synthetic gain/offset transfer curves");
    gen->add_option("--bits", bits, "converter bits")->check(CLI::Range(1, 16));
    gen->add_option("--count", count, "number of curves")->check(CLI::PositiveNumber);
    gen->add_option("--sigma-offset", sigma_offset, "offset std in LSB");
    gen->add_option("--sigma-gain", sigma_gain, "relative gain std");
    gen->add_option("--seed", curve_seed, "RNG seed");
    gen->add_option("--out", curve_out, "output file");

    std::string cases = "data/oracle_cases.json", oracle_out = "oracle_cases.json";
    std::size_t generate = 0;
    std::uint64_t oracle_seed = 0;
    auto* orc = app.add_subcommand("oracle", "check the PIM MACs against the exact-rational oracle on a case file");
    orc->add_option("--cases", cases, "case file to check");
    orc->add_option("--generate", generate, "write this many random cases instead of checking");
    orc->add_option("--out", oracle_out, "output file for --generate");
    orc->add_option("--seed", oracle_seed, "seed for --generate");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            const auto bank = nonideal::generate_variation_curves(bits, count, {sigma_offset, sigma_gain, curve_seed});
            nonideal::save_curve_bank(curve_out, bank);
            std::cout << "wrote " << count << " curves to " << curve_out << "\n";
            return 0;
        }
        if (*orc) return run_oracle(cases, generate, oracle_out, oracle_seed);

        pim::set_num_threads(c.threads);
        const auto cfg = load(c);
        json r;
        if (*train)
            r = exp::cmd_train(cfg, c.out);
        else if (*eval)
            r = exp::cmd_eval(cfg, c.out, c.checkpoint);
        else if (*calib)
            r = exp::cmd_calibrate(cfg, c.out, c.checkpoint);
        else if (*sweep)
            r = exp::cmd_sweep(cfg, c.out);
        else
            r = exp::cmd_diag(cfg, c.out);
        std::cout << "wrote " << exp::run_dir(cfg, c.out).string() << "\n";
        print_final(r);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
