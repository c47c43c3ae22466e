#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "pimqat/data.hpp"

using namespace pimqat;
using namespace pimqat::data;

namespace {

std::vector<std::uint8_t> fake_cifar(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::uint8_t> bytes(n * cifar10_record_bytes);
    for (std::size_t i = 0; i < n; ++i) {
        bytes[i * cifar10_record_bytes] = static_cast<std::uint8_t>(i % 10);
        for (std::size_t k = 1; k < cifar10_record_bytes; ++k)
            bytes[i * cifar10_record_bytes + k] = static_cast<std::uint8_t>(rng.below(256));
    }
    return bytes;
}

}  // namespace

TEST(Cifar10, FullBatchParses) {
    const auto bytes = fake_cifar(10000, 1);
    const Dataset d = parse_cifar10(bytes, "mem");
    ASSERT_EQ(d.size(), 10000u);
    EXPECT_EQ(d.sample_shape, (Shape{3, 32, 32}));
    EXPECT_EQ(d.labels[37], 7);
    EXPECT_EQ(d.codes[37 * 3072 + 100], bytes[37 * cifar10_record_bytes + 101]);
}

TEST(Cifar10, RejectsTruncatedFileAndBadLabel) {
    auto bytes = fake_cifar(3, 2);
    bytes.pop_back();
    EXPECT_THROW(parse_cifar10(bytes, "mem"), Error);
    bytes = fake_cifar(3, 2);
    bytes[cifar10_record_bytes] = 11;
    try {
        parse_cifar10(bytes, "f.bin");
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("record 1"), std::string::npos);
    }
}

TEST(Cifar10, MissingDirectoryExplainsDownload) {
    try {
        load_cifar10("/nonexistent/cifar", true);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("cifar-10-binary.tar.gz"), std::string::npos);
    }
}

TEST(Cifar10, LoadsBatchFilesFromDirectory) {
    const auto dir = std::filesystem::temp_directory_path() / "pimqat_cifar_test";
    std::filesystem::create_directories(dir);
    for (int i = 1; i <= 5; ++i) {
        std::ofstream f(dir / ("data_batch_" + std::to_string(i) + ".bin"), std::ios::binary);
        const auto b = fake_cifar(20, i);
        f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    }
    {
        std::ofstream f(dir / "test_batch.bin", std::ios::binary);
        const auto b = fake_cifar(30, 9);
        f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    }
    EXPECT_EQ(load_cifar10(dir, true).size(), 100u);
    EXPECT_EQ(load_cifar10(dir, false).size(), 30u);
    EXPECT_EQ(find_cifar10(dir), dir);
    std::filesystem::remove_all(dir);
}

TEST(Batch, CodeMapsToUnitValue) {
    Dataset d;
    d.sample_shape = {3};
    d.codes = {0, 255, 51};
    d.labels = {1};
    d.classes = 2;
    const std::vector<std::size_t> idx{0};
    const auto b = make_batch(d, idx, 0, 1, false, nullptr);
    EXPECT_EQ(b.x[0], 0.0);
    EXPECT_EQ(b.x[1], 1.0);
    EXPECT_EQ(b.x[2], 0.2);
}

TEST(Batch, AugmentationIsShiftedOrFlippedCopy) {
    const Dataset d = parse_cifar10(fake_cifar(4, 3), "mem");
    std::vector<std::size_t> idx{0, 1, 2, 3};
    Rng rng(5);
    const auto b = make_batch(d, idx, 0, 4, true, &rng);
    for (std::size_t s = 0; s < 4; ++s) {
        bool matched = false;
        for (long dy = -4; dy <= 4 && !matched; ++dy)
            for (long dx = -4; dx <= 4 && !matched; ++dx)
                for (int flip = 0; flip < 2 && !matched; ++flip) {
                    bool ok = true;
                    for (std::size_t c = 0; c < 3 && ok; ++c)
                        for (long y = 0; y < 32 && ok; ++y)
                            for (long x = 0; x < 32 && ok; ++x) {
                                const long sy = y + dy, sx = (flip ? 31 - x : x) + dx;
                                const double want = (sy < 0 || sy > 31 || sx < 0 || sx > 31)
                                                        ? 0.0
                                                        : d.codes[s * 3072 + (c * 32 + sy) * 32 + sx] / 255.0;
                                ok = b.x[s * 3072 + (c * 32 + y) * 32 + x] == want;
                            }
                    matched = ok;
                }
        EXPECT_TRUE(matched) << "sample " << s;
    }
}

TEST(Subset, BalancedAndSeeded) {
    const Dataset d = parse_cifar10(fake_cifar(1000, 4), "mem");
    const Dataset a = balanced_subset(d, 500, 11), b = balanced_subset(d, 500, 11), c = balanced_subset(d, 500, 12);
    EXPECT_EQ(a.codes, b.codes);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_NE(a.codes, c.codes);
    std::map<int, int> counts;
    for (int y : a.labels) ++counts[y];
    ASSERT_EQ(counts.size(), 10u);
    for (auto [k, v] : counts) EXPECT_EQ(v, 50) << k;
    EXPECT_THROW(balanced_subset(d, 1001, 1), Error);
}

TEST(Synthetic, GeneratorsAreDeterministicAndLabelled) {
    const auto a = make_blobs(200, 3, 5, 4.0, 7), b = make_blobs(200, 3, 5, 4.0, 7);
    EXPECT_EQ(a.codes, b.codes);
    EXPECT_EQ(a.sample_shape, (Shape{5}));
    EXPECT_EQ(std::count(a.labels.begin(), a.labels.end(), 2), 66);
    const auto m = make_moons(100, 0.1, 1);
    EXPECT_EQ(m.codes.size(), 200u);
    const auto p = make_pattern_images(40, 4, 3, 8, 0.05, 2);
    EXPECT_EQ(p.codes.size(), 40u * 3 * 64);
    EXPECT_TRUE(p.images);
}
