#pragma once
// Config hashing and small JSON/CSV helpers shared by reports and tables.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

namespace pimqat {

using json = nlohmann::json;

/// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Hash of the canonical (key-sorted, compact) serialization, as 16 hex digits.
/// Key order in the source document does not matter.
std::string config_hash(const json& config);

/// Deterministic JSON text: sorted keys, fixed indentation, trailing newline.
std::string canonical_dump(const json& j, int indent = 2);

void write_text(const std::filesystem::path& p, const std::string& text);
std::string read_text(const std::filesystem::path& p);

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

}  // namespace pimqat
