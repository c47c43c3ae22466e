#pragma once
// Labelled datasets stored as 8-bit codes, with the batching and augmentation
// used by the trainer.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pimqat/random.hpp"
#include "pimqat/tensor.hpp"

namespace pimqat::data {

/// N samples of `sample_shape`, each element an 8-bit code mapped to code / 255.
struct Dataset {
    Shape sample_shape;
    std::vector<std::uint8_t> codes;
    std::vector<int> labels;
    int classes = 0;
    bool images = false;  ///< [C, H, W] samples; enables crop/flip augmentation

    std::size_t size() const { return labels.size(); }
    std::size_t sample_size() const { return shape_numel(sample_shape); }
};

/// Bytes per CIFAR-10 binary record: one label byte then 3x32x32 pixels.
inline constexpr std::size_t cifar10_record_bytes = 1 + 3 * 32 * 32;

/// Parses one CIFAR-10 binary batch held in memory.
Dataset parse_cifar10(const std::vector<std::uint8_t>& bytes, const std::string& source);

/// Loads data_batch_1..5.bin (train) or test_batch.bin from `dir`. A missing
/// directory or file raises an error that says where to get the data.
Dataset load_cifar10(const std::filesystem::path& dir, bool train);

/// Looks in $PIMQAT_CIFAR10_DIR, then `fallback`. Returns an empty path when
/// neither contains the batch files.
std::filesystem::path find_cifar10(const std::filesystem::path& fallback = "data/cifar-10-batches-bin");

/// Gaussian clusters, one per class, with centres spread `separation` standard
/// deviations apart along random directions; features rescaled to codes.
Dataset make_blobs(std::size_t n, int classes, std::size_t features, double separation, std::uint64_t seed);

/// Two interleaved half circles with Gaussian jitter, 2 features.
Dataset make_moons(std::size_t n, double noise, std::uint64_t seed);

/// Toy image task: class-specific oriented gratings plus noise, [C, size, size].
Dataset make_pattern_images(std::size_t n, int classes, std::size_t channels, std::size_t size, double noise,
                            std::uint64_t seed);

/// Class-balanced subset of n samples chosen by seed; order shuffled by seed.
Dataset balanced_subset(const Dataset& d, std::size_t n, std::uint64_t seed);

/// Splits off the first `n` samples and the rest.
std::pair<Dataset, Dataset> split(const Dataset& d, std::size_t n);

struct Batch {
    Tensor x;
    std::vector<int> y;
};

/// Gathers samples `idx[begin, end)` as values in [0, 1]. With `augment`, image
/// samples are zero-padded by 4, randomly cropped back and randomly flipped.
Batch make_batch(const Dataset& d, const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end,
                 bool augment, Rng* rng);

}  // namespace pimqat::data
