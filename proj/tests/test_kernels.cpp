#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "pimqat/random.hpp"
#include "pimqat/simd/kernels.hpp"

using namespace pimqat;
using namespace pimqat::simd;

namespace {

const KernelTable* avx2_or_skip() {
    if (!avx2_supported()) return nullptr;
    return &avx2_kernels();
}

std::vector<std::uint8_t> random_u8(Rng& rng, std::size_t n, int bits) {
    std::vector<std::uint8_t> v(n);
    for (auto& x : v) x = static_cast<std::uint8_t>(rng.below(std::uint64_t{1} << bits));
    return v;
}

}  // namespace

TEST(Kernels, GemmU8S8MatchesScalar) {
    const auto* fast = avx2_or_skip();
    if (!fast) GTEST_SKIP() << "no AVX2";
    Rng rng(1);
    for (std::size_t K : {1u, 15u, 16u, 17u, 144u, 301u}) {
        const std::size_t P = 7, O = 5;
        auto A = random_u8(rng, P * K, 8);
        std::vector<std::int8_t> W(O * K);
        for (auto& w : W) w = static_cast<std::int8_t>(static_cast<int>(rng.below(255)) - 127);
        std::vector<std::int32_t> y0(P * O), y1(P * O);
        scalar_kernels().gemm_u8s8(A.data(), W.data(), y0.data(), P, O, K);
        fast->gemm_u8s8(A.data(), W.data(), y1.data(), P, O, K);
        EXPECT_EQ(y0, y1) << "K=" << K;
    }
}

TEST(Kernels, PackBitplanesMatchesScalar) {
    const auto* fast = avx2_or_skip();
    if (!fast) GTEST_SKIP() << "no AVX2";
    Rng rng(2);
    for (std::size_t n : {1u, 31u, 32u, 63u, 64u, 65u, 200u, 1000u}) {
        for (int bits = 1; bits <= 8; ++bits) {
            auto codes = random_u8(rng, n, bits);
            const std::size_t len = static_cast<std::size_t>(words_for(n)) * plane_stride(bits);
            std::vector<std::uint64_t> a(len, 7), b(len, 9);
            scalar_kernels().pack_bitplanes(codes.data(), n, bits, a.data());
            fast->pack_bitplanes(codes.data(), n, bits, b.data());
            EXPECT_EQ(a, b) << "n=" << n << " bits=" << bits;
        }
    }
}

TEST(Kernels, PackBitplanesLayout) {
    std::vector<std::uint8_t> codes(70, 0);
    codes[3] = 0b101;
    codes[66] = 0b010;
    std::vector<std::uint64_t> out(2 * plane_stride(3));
    scalar_kernels().pack_bitplanes(codes.data(), codes.size(), 3, out.data());
    const int s = plane_stride(3);
    EXPECT_EQ(out[0], std::uint64_t{1} << 3);
    EXPECT_EQ(out[1], 0u);
    EXPECT_EQ(out[2], std::uint64_t{1} << 3);
    EXPECT_EQ(out[s + 1], std::uint64_t{1} << 2);
    EXPECT_EQ(out[s + 0], 0u);
}

TEST(Kernels, AndPopcountMatchesScalarAndNaiveCount) {
    Rng rng(3);
    for (std::size_t n : {9u, 64u, 144u, 250u}) {
        for (int nj : {1, 3, 4, 5, 8}) {
            const int nk = 4;
            const std::size_t O = 3;
            auto codes = random_u8(rng, n, nj);
            const int words = words_for(n);
            std::vector<std::uint64_t> act(static_cast<std::size_t>(words) * plane_stride(nj));
            scalar_kernels().pack_bitplanes(codes.data(), n, nj, act.data());
            std::vector<std::uint8_t> wbits(O * nk * n);
            for (auto& b : wbits) b = static_cast<std::uint8_t>(rng.below(2));
            std::vector<std::uint64_t> wt(O * nk * words, 0);
            for (std::size_t r = 0; r < O * nk; ++r)
                for (std::size_t i = 0; i < n; ++i)
                    if (wbits[r * n + i]) wt[r * words + i / 64] |= std::uint64_t{1} << (i % 64);

            std::vector<std::int32_t> ref(O * nk * nj);
            for (std::size_t r = 0; r < O * nk; ++r)
                for (int j = 0; j < nj; ++j) {
                    int c = 0;
                    for (std::size_t i = 0; i < n; ++i) c += wbits[r * n + i] & ((codes[i] >> j) & 1);
                    ref[r * nj + j] = c;
                }
            std::vector<std::int32_t> s(ref.size(), -1);
            scalar_kernels().and_popcount(act.data(), wt.data(), O, nk, nj, words, s.data());
            EXPECT_EQ(s, ref);
            if (const auto* fast = avx2_or_skip()) {
                std::vector<std::int32_t> f(ref.size(), -1);
                fast->and_popcount(act.data(), wt.data(), O, nk, nj, words, f.data());
                EXPECT_EQ(f, ref) << "n=" << n << " nj=" << nj;
            }
        }
    }
}

TEST(Kernels, F64GemmsAgreeWithinRounding) {
    const auto* fast = avx2_or_skip();
    if (!fast) GTEST_SKIP() << "no AVX2";
    Rng rng(4);
    const std::size_t P = 13, O = 6, K = 37;
    std::vector<double> G(P * O), B(O * K);
    for (auto& g : G) g = rng.normal();
    for (auto& b : B) b = rng.normal();
    auto A = random_u8(rng, P * K, 8);

    std::vector<double> c0(O * K, 0.5), c1(O * K, 0.5);
    scalar_kernels().gemm_tn_f64_u8(G.data(), A.data(), c0.data(), P, O, K);
    fast->gemm_tn_f64_u8(G.data(), A.data(), c1.data(), P, O, K);
    for (std::size_t i = 0; i < c0.size(); ++i) EXPECT_NEAR(c0[i], c1[i], 1e-9 * (1 + std::abs(c0[i])));

    std::vector<double> d0(P * K), d1(P * K);
    scalar_kernels().gemm_nn_f64(G.data(), B.data(), d0.data(), P, O, K);
    fast->gemm_nn_f64(G.data(), B.data(), d1.data(), P, O, K);
    for (std::size_t i = 0; i < d0.size(); ++i) EXPECT_NEAR(d0[i], d1[i], 1e-12 * (1 + std::abs(d0[i])));
}

TEST(Kernels, ActiveTableIsValid) {
    const auto& k = active_kernels();
    EXPECT_TRUE(std::string(k.name) == "scalar" || std::string(k.name) == "avx2");
}
