#pragma once

// Deterministic work splitting. Every index handed to the body must write a
// disjoint set of outputs, so results never depend on the worker count.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace dcf::parallel {

namespace detail {

inline std::size_t env_thread_cap() {
    const char* raw = std::getenv("DCF_THREADS");
    if (raw == nullptr || *raw == '\0') {
        return 0;
    }
    try {
        const long v = std::stol(raw);
        return v > 0 ? static_cast<std::size_t>(v) : 0;
    } catch (...) {
        return 0;
    }
}

inline std::atomic<bool>& strict_flag() {
    static std::atomic<bool> flag{false};
    return flag;
}

}  // namespace detail

/// Forces single-threaded execution everywhere.
inline void set_strict(bool strict) { detail::strict_flag().store(strict); }
inline bool strict() { return detail::strict_flag().load(); }

inline std::size_t max_threads() {
    if (strict()) {
        return 1;
    }
    std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    const std::size_t cap = detail::env_thread_cap();
    return cap > 0 ? std::min(hw, cap) : hw;
}

/// Runs body(i) for i in [0, n) over contiguous static partitions.
template <typename Body>
void for_each_index(std::size_t n, Body&& body, std::size_t min_per_worker = 1) {
    const std::size_t workers =
        std::min(max_threads(), std::max<std::size_t>(1, n / std::max<std::size_t>(1, min_per_worker)));
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            body(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 1; w < workers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) {
            break;
        }
        pool.emplace_back([&body, begin, end] {
            for (std::size_t i = begin; i < end; ++i) {
                body(i);
            }
        });
    }
    for (std::size_t i = 0; i < std::min(n, chunk); ++i) {
        body(i);
    }
    for (auto& t : pool) {
        t.join();
    }
}

}  // namespace dcf::parallel
