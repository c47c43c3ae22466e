// Compiled with -mavx2 -mfma -mpopcnt; only reached through the dispatcher
// after a CPUID check.

#include <algorithm>
#include <bit>
#include <cstring>
#include <vector>

#include <immintrin.h>

#include "pimqat/simd/kernels.hpp"

namespace pimqat::simd {
namespace {

inline std::int32_t hsum_epi32(__m256i v) {
    __m128i s = _mm_add_epi32(_mm256_castsi256_si128(v), _mm256_extracti128_si256(v, 1));
    s = _mm_add_epi32(s, _mm_shuffle_epi32(s, _MM_SHUFFLE(1, 0, 3, 2)));
    s = _mm_add_epi32(s, _mm_shuffle_epi32(s, _MM_SHUFFLE(2, 3, 0, 1)));
    return _mm_cvtsi128_si32(s);
}

void gemm_u8s8(const std::uint8_t* A, const std::int8_t* W, std::int32_t* Y, std::size_t P,
               std::size_t O, std::size_t K) {
    const std::size_t K16 = K & ~std::size_t{15};
    for (std::size_t p = 0; p < P; ++p) {
        const std::uint8_t* a = A + p * K;
        for (std::size_t o = 0; o < O; ++o) {
            const std::int8_t* w = W + o * K;
            __m256i acc = _mm256_setzero_si256();
            std::size_t k = 0;
            for (; k < K16; k += 16) {
                const __m256i a16 = _mm256_cvtepu8_epi16(
                    _mm_loadu_si128(reinterpret_cast<const __m128i*>(a + k)));
                const __m256i w16 = _mm256_cvtepi8_epi16(
                    _mm_loadu_si128(reinterpret_cast<const __m128i*>(w + k)));
                acc = _mm256_add_epi32(acc, _mm256_madd_epi16(a16, w16));
            }
            std::int32_t s = hsum_epi32(acc);
            for (; k < K; ++k) s += static_cast<std::int32_t>(a[k]) * w[k];
            Y[p * O + o] = s;
        }
    }
}

void pack_bitplanes(const std::uint8_t* codes, std::size_t n, int nbits, std::uint64_t* out) {
    const int stride = plane_stride(nbits);
    const int words = words_for(n);
    std::fill(out, out + static_cast<std::size_t>(words) * stride, std::uint64_t{0});
    std::size_t i = 0;
    // 32 codes per step; a step never straddles a 64-bit word.
    for (; i + 32 <= n; i += 32) {
        const __m256i v = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(codes + i));
        std::uint64_t* word = out + (i / 64) * stride;
        const unsigned shift = static_cast<unsigned>(i % 64);
        for (int j = 0; j < nbits; ++j) {
            // Moves bit j of every byte into that byte's sign bit.
            const __m256i moved = _mm256_sll_epi16(v, _mm_cvtsi32_si128(7 - j));
            const auto mask = static_cast<std::uint32_t>(_mm256_movemask_epi8(moved));
            word[j] |= static_cast<std::uint64_t>(mask) << shift;
        }
    }
    for (; i < n; ++i) {
        const unsigned v = codes[i];
        std::uint64_t* word = out + (i / 64) * stride;
        const std::uint64_t bit = std::uint64_t{1} << (i % 64);
        for (int j = 0; j < nbits; ++j)
            if ((v >> j) & 1u) word[j] |= bit;
    }
}

inline __m256i popcount_epi64(__m256i x) {
    const __m256i lut = _mm256_setr_epi8(0, 1, 1, 2, 1, 2, 2, 3, 1, 2, 2, 3, 2, 3, 3, 4, 0, 1, 1, 2,
                                         1, 2, 2, 3, 1, 2, 2, 3, 2, 3, 3, 4);
    const __m256i low = _mm256_set1_epi8(0x0f);
    const __m256i lo = _mm256_and_si256(x, low);
    const __m256i hi = _mm256_and_si256(_mm256_srli_epi16(x, 4), low);
    const __m256i cnt = _mm256_add_epi8(_mm256_shuffle_epi8(lut, lo), _mm256_shuffle_epi8(lut, hi));
    return _mm256_sad_epu8(cnt, _mm256_setzero_si256());
}

void and_popcount(const std::uint64_t* act, const std::uint64_t* wt, std::size_t O, int nk, int nj,
                  int words, std::int32_t* out) {
    const int stride = plane_stride(nj);
    alignas(32) std::uint64_t lanes[4];
    for (std::size_t o = 0; o < O; ++o) {
        for (int k = 0; k < nk; ++k) {
            const std::uint64_t* wrow = wt + (o * nk + k) * words;
            std::int32_t* dst = out + (o * nk + k) * nj;
            for (int jc = 0; jc < stride; jc += 4) {
                __m256i acc = _mm256_setzero_si256();
                for (int w = 0; w < words; ++w) {
                    const __m256i a = _mm256_loadu_si256(
                        reinterpret_cast<const __m256i*>(act + w * stride + jc));
                    const __m256i b = _mm256_set1_epi64x(static_cast<long long>(wrow[w]));
                    acc = _mm256_add_epi64(acc, popcount_epi64(_mm256_and_si256(a, b)));
                }
                _mm256_store_si256(reinterpret_cast<__m256i*>(lanes), acc);
                const int lim = std::min(4, nj - jc);
                for (int t = 0; t < lim; ++t) dst[jc + t] = static_cast<std::int32_t>(lanes[t]);
            }
        }
    }
}

void gemm_tn_f64_u8(const double* G, const std::uint8_t* A, double* C, std::size_t P, std::size_t O,
                    std::size_t K) {
    std::vector<double> row(K);
    const std::size_t K4 = K & ~std::size_t{3};
    for (std::size_t p = 0; p < P; ++p) {
        const std::uint8_t* a = A + p * K;
        std::size_t k = 0;
        for (; k + 4 <= K; k += 4) {
            std::uint32_t packed;
            std::memcpy(&packed, a + k, 4);
            const __m128i bytes = _mm_cvtsi32_si128(static_cast<int>(packed));
            _mm256_storeu_pd(row.data() + k, _mm256_cvtepi32_pd(_mm_cvtepu8_epi32(bytes)));
        }
        for (; k < K; ++k) row[k] = a[k];
        for (std::size_t o = 0; o < O; ++o) {
            const double g = G[p * O + o];
            const __m256d gv = _mm256_set1_pd(g);
            double* c = C + o * K;
            std::size_t q = 0;
            for (; q < K4; q += 4) {
                const __m256d acc = _mm256_loadu_pd(c + q);
                _mm256_storeu_pd(c + q, _mm256_fmadd_pd(gv, _mm256_loadu_pd(row.data() + q), acc));
            }
            for (; q < K; ++q) c[q] += g * row[q];
        }
    }
}

void gemm_nn_f64(const double* G, const double* B, double* C, std::size_t P, std::size_t O,
                 std::size_t K) {
    const std::size_t K4 = K & ~std::size_t{3};
    for (std::size_t p = 0; p < P; ++p) {
        double* c = C + p * K;
        std::fill(c, c + K, 0.0);
        for (std::size_t o = 0; o < O; ++o) {
            const double g = G[p * O + o];
            const __m256d gv = _mm256_set1_pd(g);
            const double* b = B + o * K;
            std::size_t q = 0;
            for (; q < K4; q += 4) {
                const __m256d acc = _mm256_loadu_pd(c + q);
                _mm256_storeu_pd(c + q, _mm256_fmadd_pd(gv, _mm256_loadu_pd(b + q), acc));
            }
            for (; q < K; ++q) c[q] += g * b[q];
        }
    }
}

}  // namespace

const KernelTable& avx2_kernels() {
    static const KernelTable table{"avx2", gemm_u8s8, pack_bitplanes, and_popcount, gemm_tn_f64_u8,
                                   gemm_nn_f64};
    return table;
}

}  // namespace pimqat::simd
