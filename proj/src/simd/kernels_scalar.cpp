#include <algorithm>
#include <bit>

#include "pimqat/simd/kernels.hpp"

namespace pimqat::simd {
namespace {

void gemm_u8s8(const std::uint8_t* A, const std::int8_t* W, std::int32_t* Y, std::size_t P,
               std::size_t O, std::size_t K) {
    for (std::size_t p = 0; p < P; ++p) {
        const std::uint8_t* a = A + p * K;
        for (std::size_t o = 0; o < O; ++o) {
            const std::int8_t* w = W + o * K;
            std::int32_t acc = 0;
            for (std::size_t k = 0; k < K; ++k) acc += static_cast<std::int32_t>(a[k]) * w[k];
            Y[p * O + o] = acc;
        }
    }
}

void pack_bitplanes(const std::uint8_t* codes, std::size_t n, int nbits, std::uint64_t* out) {
    const int stride = plane_stride(nbits);
    const int words = words_for(n);
    std::fill(out, out + static_cast<std::size_t>(words) * stride, std::uint64_t{0});
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned v = codes[i];
        std::uint64_t* word = out + (i / 64) * stride;
        const std::uint64_t bit = std::uint64_t{1} << (i % 64);
        for (int j = 0; j < nbits; ++j)
            if ((v >> j) & 1u) word[j] |= bit;
    }
}

void and_popcount(const std::uint64_t* act, const std::uint64_t* wt, std::size_t O, int nk, int nj,
                  int words, std::int32_t* out) {
    const int stride = plane_stride(nj);
    for (std::size_t o = 0; o < O; ++o) {
        for (int k = 0; k < nk; ++k) {
            const std::uint64_t* wrow = wt + (o * nk + k) * words;
            std::int32_t* dst = out + (o * nk + k) * nj;
            for (int j = 0; j < nj; ++j) {
                std::int32_t c = 0;
                for (int w = 0; w < words; ++w) c += std::popcount(act[w * stride + j] & wrow[w]);
                dst[j] = c;
            }
        }
    }
}

void gemm_tn_f64_u8(const double* G, const std::uint8_t* A, double* C, std::size_t P, std::size_t O,
                    std::size_t K) {
    for (std::size_t p = 0; p < P; ++p) {
        const std::uint8_t* a = A + p * K;
        for (std::size_t o = 0; o < O; ++o) {
            const double g = G[p * O + o];
            double* c = C + o * K;
            for (std::size_t k = 0; k < K; ++k) c[k] += g * static_cast<double>(a[k]);
        }
    }
}

void gemm_nn_f64(const double* G, const double* B, double* C, std::size_t P, std::size_t O,
                 std::size_t K) {
    for (std::size_t p = 0; p < P; ++p) {
        double* c = C + p * K;
        std::fill(c, c + K, 0.0);
        for (std::size_t o = 0; o < O; ++o) {
            const double g = G[p * O + o];
            const double* b = B + o * K;
            for (std::size_t k = 0; k < K; ++k) c[k] += g * b[k];
        }
    }
}

}  // namespace

const KernelTable& scalar_kernels() {
    static const KernelTable table{"scalar", gemm_u8s8, pack_bitplanes, and_popcount,
                                   gemm_tn_f64_u8, gemm_nn_f64};
    return table;
}

}  // namespace pimqat::simd
