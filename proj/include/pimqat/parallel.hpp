#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace pimqat {

/// Splits [0, n) into at most `threads` contiguous chunks and runs fn(begin, end, chunk)
/// on each. Callers only write disjoint outputs, so results do not depend on the split.
template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
    const std::size_t chunks = std::min<std::size_t>(std::max(1u, threads), n);
    if (chunks <= 1) {
        if (n) fn(std::size_t{0}, n, std::size_t{0});
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(chunks);
    for (std::size_t c = 0; c < chunks; ++c) {
        const std::size_t b = n * c / chunks, e = n * (c + 1) / chunks;
        pool.emplace_back([&, b, e, c] {
            try {
                fn(b, e, c);
            } catch (...) {
                errors[c] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace pimqat
