#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace pimqat {

/// Raised for contract violations (bad shapes, malformed files, invalid
/// configuration). Messages are meant to be shown to the user verbatim.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

/// Bit-width of a quantizer or converter; "infinite" means no quantization.
class Resolution {
public:
    constexpr Resolution() = default;
    constexpr explicit Resolution(int bits) : bits_(bits) {}

    static constexpr Resolution infinite() { return Resolution(); }

    constexpr bool is_infinite() const { return bits_ == 0; }
    constexpr int bits() const { return bits_; }

    /// 2^bits - 1, the largest unsigned code.
    constexpr std::int64_t max_code() const { return (std::int64_t{1} << bits_) - 1; }

    friend constexpr bool operator==(Resolution, Resolution) = default;

    std::string str() const { return is_infinite() ? "inf" : std::to_string(bits_); }

private:
    int bits_ = 0;  // 0 encodes infinite
};

/// Round half away from zero, the tie rule used by every quantizer and ADC.
inline double round_half_away(double x) { return std::round(x); }

/// Exact integer form of round(num / den) with ties away from zero; den > 0.
constexpr std::int64_t div_round_half_away(std::int64_t num, std::int64_t den) {
    if (num >= 0) return (2 * num + den) / (2 * den);
    return -((2 * -num + den) / (2 * den));
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ (splitmix64(b) + 0x632BE59BD9B4E019ULL));
}

/// Derive an independent child seed, e.g. per layer or per sweep cell.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    return hash_combine(seed, tag);
}

/// Uniform double in (0, 1] from 53 high bits.
constexpr double unit_interval_open0(std::uint64_t bits) {
    return (static_cast<double>(bits >> 11) + 1.0) * (1.0 / 9007199254740992.0);
}

}  // namespace pimqat
