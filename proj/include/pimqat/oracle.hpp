#pragma once
// Exact-rational evaluation of the three PIM MAC equations. Shares no
// arithmetic with the pim module; used to cross-check it bit-for-bit.

#include <boost/rational.hpp>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pimqat/pim.hpp"

namespace pimqat::oracle {

using Rational = boost::rational<std::int64_t>;

struct MacCase {
    pim::Scheme scheme = pim::Scheme::bit_serial;
    int b_w = 4, b_a = 4, m = 1;
    int b_imc = 0;  ///< 0 = infinite
    std::vector<std::int64_t> weights;      ///< signed codes
    std::vector<std::int64_t> activations;  ///< unsigned codes
};

struct MacValue {
    Rational value;  ///< recombined PIM output
    Rational exact;  ///< sum Q_i q_i
    std::vector<std::int64_t> codes;  ///< conversion order of the pim module
};

/// Round half away from zero on a rational.
std::int64_t round_rational(const Rational& x);

MacValue evaluate(const MacCase& c);

/// Random small instance (N <= max_n, bit-widths <= max_bits).
MacCase random_case(std::uint64_t seed, int max_n, int max_bits, int max_imc);

struct CaseFileEntry {
    MacCase mac;
    std::string expected_value;  ///< "num/den"
    std::vector<std::int64_t> expected_codes;
};

std::vector<CaseFileEntry> load_case_file(const std::filesystem::path& path);
void save_case_file(const std::filesystem::path& path, const std::vector<MacCase>& cases);

/// The same case evaluated by the pim module's group-level MAC.
pim::MacGroupResult run_pim(const MacCase& c);

/// Flattened codes of a pim result, in oracle order.
inline std::vector<std::int64_t> flat_codes(const pim::MacGroupResult& r) {
    std::vector<std::int64_t> out;
    if (r.adc_codes.size() == 2) {
        for (std::size_t l = 0; l < r.adc_codes[0].size(); ++l) {
            out.push_back(r.adc_codes[0][l]);
            out.push_back(r.adc_codes[1][l]);
        }
    } else if (r.adc_codes.size() == 1) {
        out = r.adc_codes[0];
    }
    return out;
}

std::string to_string(const Rational& r);

}  // namespace pimqat::oracle
