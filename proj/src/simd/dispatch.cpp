#include <cstdlib>
#include <string_view>

#include "pimqat/common.hpp"
#include "pimqat/simd/kernels.hpp"

namespace pimqat::simd {

bool avx2_supported() {
#if defined(PIMQAT_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma") &&
           __builtin_cpu_supports("popcnt");
#else
    return false;
#endif
}

#if !defined(PIMQAT_HAVE_AVX2)
const KernelTable& avx2_kernels() { throw Error("AVX2 kernels were not compiled in"); }
#endif

namespace {

const KernelTable& select() {
    const char* env = std::getenv("PIMQAT_KERNELS");
    const std::string_view choice = env ? env : "";
    if (choice == "scalar") return scalar_kernels();
    if (choice == "avx2") {
        require(avx2_supported(), "PIMQAT_KERNELS=avx2 requested but the CPU lacks AVX2/FMA");
        return avx2_kernels();
    }
    return avx2_supported() ? avx2_kernels() : scalar_kernels();
}

}  // namespace

const KernelTable& active_kernels() {
    static const KernelTable& table = select();
    return table;
}

}  // namespace pimqat::simd
