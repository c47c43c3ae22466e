#include "pimqat/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <numbers>

namespace pimqat::data {

namespace {

const char* const kCifarHint =
    "download the binary version from https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz, extract it, and "
    "point $PIMQAT_CIFAR10_DIR (or dataset.path) at the cifar-10-batches-bin directory";

std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("cannot open " + p.string() + "; " + kCifarHint);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint8_t to_code(double v, double lo, double hi) {
    const double t = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
    return static_cast<std::uint8_t>(round_half_away(255.0 * t));
}

// Shared min/max rescaling of real features into codes.
Dataset codes_from_features(const std::vector<double>& f, std::size_t features, std::vector<int> labels,
                            int classes) {
    const auto [lo, hi] = std::minmax_element(f.begin(), f.end());
    const double a = *lo, b = *hi > *lo ? *hi : *lo + 1.0;
    Dataset d;
    d.sample_shape = {features};
    d.codes.resize(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) d.codes[i] = to_code(f[i], a, b);
    d.labels = std::move(labels);
    d.classes = classes;
    return d;
}

}  // namespace

Dataset parse_cifar10(const std::vector<std::uint8_t>& bytes, const std::string& source) {
    if (bytes.empty() || bytes.size() % cifar10_record_bytes != 0)
        throw Error(source + ": size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                    std::to_string(cifar10_record_bytes) + "-byte CIFAR-10 record");
    const std::size_t n = bytes.size() / cifar10_record_bytes;
    Dataset d;
    d.sample_shape = {3, 32, 32};
    d.classes = 10;
    d.images = true;
    d.labels.resize(n);
    d.codes.resize(n * 3072);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* rec = bytes.data() + i * cifar10_record_bytes;
        if (rec[0] > 9) throw Error(source + ": record " + std::to_string(i) + " has label " + std::to_string(rec[0]));
        d.labels[i] = rec[0];
        std::copy(rec + 1, rec + cifar10_record_bytes, d.codes.begin() + static_cast<std::ptrdiff_t>(i * 3072));
    }
    return d;
}

Dataset load_cifar10(const std::filesystem::path& dir, bool train) {
    if (dir.empty() || !std::filesystem::is_directory(dir))
        throw Error("CIFAR-10 not found at `" + dir.string() + "`; " + kCifarHint);
    std::vector<std::string> files;
    if (train)
        for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
    else
        files.push_back("test_batch.bin");
    Dataset out;
    for (const auto& f : files) {
        const auto p = dir / f;
        Dataset part = parse_cifar10(read_file(p), p.string());
        if (out.labels.empty()) {
            out = std::move(part);
        } else {
            out.codes.insert(out.codes.end(), part.codes.begin(), part.codes.end());
            out.labels.insert(out.labels.end(), part.labels.begin(), part.labels.end());
        }
    }
    return out;
}

std::filesystem::path find_cifar10(const std::filesystem::path& fallback) {
    auto ok = [](const std::filesystem::path& p) {
        return !p.empty() && std::filesystem::exists(p / "test_batch.bin") &&
               std::filesystem::exists(p / "data_batch_1.bin");
    };
    if (const char* env = std::getenv("PIMQAT_CIFAR10_DIR"); env && ok(env)) return env;
    if (ok(fallback)) return fallback;
    return {};
}

Dataset make_blobs(std::size_t n, int classes, std::size_t features, double separation, std::uint64_t seed) {
    require(classes >= 2 && features >= 1, "make_blobs: need >= 2 classes and >= 1 feature");
    Rng rng(seed);
    std::vector<double> centres(static_cast<std::size_t>(classes) * features);
    for (int c = 0; c < classes; ++c) {
        double norm = 0.0;
        std::vector<double> dir(features);
        for (auto& v : dir) {
            v = rng.normal();
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (std::size_t f = 0; f < features; ++f) centres[c * features + f] = separation * dir[f] / norm;
    }
    std::vector<double> f(n * features);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i % static_cast<std::size_t>(classes));
        labels[i] = c;
        for (std::size_t k = 0; k < features; ++k) f[i * features + k] = centres[c * features + k] + rng.normal();
    }
    return codes_from_features(f, features, std::move(labels), classes);
}

Dataset make_moons(std::size_t n, double noise, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> f(n * 2);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i % 2);
        const double t = std::numbers::pi * rng.uniform();
        const double x = c == 0 ? std::cos(t) : 1.0 - std::cos(t);
        const double y = c == 0 ? std::sin(t) : 0.5 - std::sin(t);
        f[2 * i] = x + noise * rng.normal();
        f[2 * i + 1] = y + noise * rng.normal();
        labels[i] = c;
    }
    return codes_from_features(f, 2, std::move(labels), 2);
}

Dataset make_pattern_images(std::size_t n, int classes, std::size_t channels, std::size_t size, double noise,
                            std::uint64_t seed) {
    require(classes >= 2 && channels >= 1 && size >= 4, "make_pattern_images: bad geometry");
    Rng rng(seed);
    Dataset d;
    d.sample_shape = {channels, size, size};
    d.classes = classes;
    d.images = true;
    d.labels.resize(n);
    d.codes.resize(n * d.sample_size());
    for (std::size_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i % static_cast<std::size_t>(classes));
        d.labels[i] = c;
        const double angle = std::numbers::pi * c / classes;
        const double freq = 2.0 * std::numbers::pi * (2.0 + c % 3) / static_cast<double>(size);
        const double phase = 2.0 * std::numbers::pi * rng.uniform();
        for (std::size_t ch = 0; ch < channels; ++ch) {
            const double tint = 0.6 + 0.4 * std::cos(angle + static_cast<double>(ch));
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x) {
                    const double u = std::cos(angle) * x + std::sin(angle) * y;
                    const double v = 0.5 + 0.35 * tint * std::sin(freq * u + phase) + noise * rng.normal();
                    d.codes[((i * channels + ch) * size + y) * size + x] = to_code(v, 0.0, 1.0);
                }
        }
    }
    return d;
}

Dataset balanced_subset(const Dataset& d, std::size_t n, std::uint64_t seed) {
    require(d.classes > 0, "balanced_subset: dataset has no classes");
    require(n <= d.size(), "balanced_subset: requested " + std::to_string(n) + " of " + std::to_string(d.size()));
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(d.classes));
    for (std::size_t i = 0; i < d.size(); ++i) by_class[static_cast<std::size_t>(d.labels[i])].push_back(i);
    Rng rng(seed);
    for (auto& v : by_class) rng.shuffle(v.begin(), v.end());

    // Round-robin over classes gives counts differing by at most one.
    std::vector<std::size_t> pick;
    pick.reserve(n);
    for (std::size_t r = 0; pick.size() < n; ++r) {
        bool any = false;
        for (auto& v : by_class) {
            if (r < v.size() && pick.size() < n) {
                pick.push_back(v[r]);
                any = true;
            }
        }
        if (!any) break;
    }
    rng.shuffle(pick.begin(), pick.end());

    Dataset out;
    out.sample_shape = d.sample_shape;
    out.classes = d.classes;
    out.images = d.images;
    const std::size_t ss = d.sample_size();
    out.codes.resize(pick.size() * ss);
    out.labels.resize(pick.size());
    for (std::size_t i = 0; i < pick.size(); ++i) {
        std::copy_n(d.codes.begin() + static_cast<std::ptrdiff_t>(pick[i] * ss), ss,
                    out.codes.begin() + static_cast<std::ptrdiff_t>(i * ss));
        out.labels[i] = d.labels[pick[i]];
    }
    return out;
}

std::pair<Dataset, Dataset> split(const Dataset& d, std::size_t n) {
    require(n <= d.size(), "split: index past the end");
    Dataset a, b;
    a.sample_shape = b.sample_shape = d.sample_shape;
    a.classes = b.classes = d.classes;
    a.images = b.images = d.images;
    const auto cut = static_cast<std::ptrdiff_t>(n * d.sample_size());
    a.codes.assign(d.codes.begin(), d.codes.begin() + cut);
    b.codes.assign(d.codes.begin() + cut, d.codes.end());
    a.labels.assign(d.labels.begin(), d.labels.begin() + static_cast<std::ptrdiff_t>(n));
    b.labels.assign(d.labels.begin() + static_cast<std::ptrdiff_t>(n), d.labels.end());
    return {std::move(a), std::move(b)};
}

Batch make_batch(const Dataset& d, const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end,
                 bool augment, Rng* rng) {
    require(begin < end && end <= idx.size(), "make_batch: empty or out-of-range batch");
    const std::size_t B = end - begin, ss = d.sample_size();
    Shape shape{B};
    shape.insert(shape.end(), d.sample_shape.begin(), d.sample_shape.end());
    Batch out{Tensor(shape), std::vector<int>(B)};
    const bool aug = augment && d.images;
    require(!aug || rng, "make_batch: augmentation needs a generator");
    for (std::size_t b = 0; b < B; ++b) {
        const std::size_t i = idx[begin + b];
        out.y[b] = d.labels[i];
        const std::uint8_t* src = d.codes.data() + i * ss;
        double* dst = out.x.data.data() + b * ss;
        if (!aug) {
            for (std::size_t k = 0; k < ss; ++k) dst[k] = src[k] / 255.0;
            continue;
        }
        const std::size_t C = d.sample_shape[0], H = d.sample_shape[1], W = d.sample_shape[2];
        const long dy = static_cast<long>(rng->below(9)) - 4, dx = static_cast<long>(rng->below(9)) - 4;
        const bool flip = rng->below(2) == 1;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x) {
                    const long sy = static_cast<long>(y) + dy;
                    const long sx0 = static_cast<long>(flip ? W - 1 - x : x) + dx;
                    double v = 0.0;
                    if (sy >= 0 && sy < static_cast<long>(H) && sx0 >= 0 && sx0 < static_cast<long>(W))
                        v = src[(c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx0)] / 255.0;
                    dst[(c * H + y) * W + x] = v;
                }
    }
    return out;
}

}  // namespace pimqat::data
