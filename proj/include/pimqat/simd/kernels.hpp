#pragma once
// Data-parallel inner loops behind the PIM and dense layers.
//
// Every kernel has a scalar reference implementation and an AVX2 variant with
// identical signatures. Integer kernels must agree bit-for-bit; the f64 GEMMs
// may differ in the last bits (FMA contraction, lane order).

#include <cstddef>
#include <cstdint>

namespace pimqat::simd {

/// Row stride (in u64 words) between consecutive words of a packed plane set.
/// Bit-planes are stored word-major: out[w * stride + j] holds bits of plane j.
constexpr int plane_stride(int nbits) { return (nbits + 3) & ~3; }

constexpr int words_for(std::size_t n) { return static_cast<int>((n + 63) / 64); }

struct KernelTable {
    const char* name;

    /// Y[p*O + o] = sum_k A[p*K + k] * W[o*K + k]  (exact, int32).
    void (*gemm_u8s8)(const std::uint8_t* A, const std::int8_t* W, std::int32_t* Y,
                      std::size_t P, std::size_t O, std::size_t K);

    /// Pack bits 0..nbits-1 of n byte codes into bit-planes, layout
    /// out[w * plane_stride(nbits) + j]; bit i of plane j sits in word i/64.
    /// Writes words_for(n) * plane_stride(nbits) words, zero-filled.
    void (*pack_bitplanes)(const std::uint8_t* codes, std::size_t n, int nbits, std::uint64_t* out);

    /// out[(o*nk + k)*nj + j] = sum_w popcount(act[w*plane_stride(nj) + j] & wt[(o*nk + k)*words + w])
    void (*and_popcount)(const std::uint64_t* act, const std::uint64_t* wt, std::size_t O, int nk,
                         int nj, int words, std::int32_t* out);

    /// C[o*K + k] += sum_p G[p*O + o] * A[p*K + k]
    void (*gemm_tn_f64_u8)(const double* G, const std::uint8_t* A, double* C, std::size_t P,
                           std::size_t O, std::size_t K);

    /// C[p*K + k] = sum_o G[p*O + o] * B[o*K + k]
    void (*gemm_nn_f64)(const double* G, const double* B, double* C, std::size_t P, std::size_t O,
                        std::size_t K);
};

const KernelTable& scalar_kernels();

/// Only valid when avx2_supported() is true.
const KernelTable& avx2_kernels();

bool avx2_supported();

/// Kernel set chosen at first use: AVX2 when the CPU has AVX2+FMA+POPCNT,
/// scalar otherwise. PIMQAT_KERNELS=scalar|avx2 overrides the choice.
const KernelTable& active_kernels();

}  // namespace pimqat::simd
