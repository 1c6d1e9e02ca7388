// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "smora/parallel.hpp"

#include <algorithm>
#include <exception>
#include <mutex>
#include <thread>

namespace smora {

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t, std::size_t)>& fn) {
    if (n == 0) return;
    threads = std::clamp<std::size_t>(threads, 1, n);
    if (threads == 1) {
        fn(0, n);
        return;
    }
    const std::size_t chunk = (n + threads - 1) / threads;
    std::exception_ptr error;
    std::mutex error_mutex;
    auto run = [&](std::size_t begin, std::size_t end) {
        try {
            fn(begin, end);
        } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
        }
    };
    {
        std::vector<std::jthread> workers;
        workers.reserve(threads - 1);
        for (std::size_t w = 1; w < threads; ++w) {
            const std::size_t begin = w * chunk;
            if (begin >= n) break;
            workers.emplace_back(run, begin, std::min(n, begin + chunk));
        }
        run(0, std::min(n, chunk));
    }
    if (error) std::rethrow_exception(error);
}

std::atomic<std::size_t> AllocationCounter::current_{0};
std::atomic<std::size_t> AllocationCounter::peak_{0};

void AllocationCounter::on_alloc(std::size_t bytes) noexcept {
    const std::size_t now = current_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    std::size_t prev = peak_.load(std::memory_order_relaxed);
    while (now > prev && !peak_.compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
    }
}

void AllocationCounter::on_free(std::size_t bytes) noexcept { current_.fetch_sub(bytes, std::memory_order_relaxed); }

std::size_t AllocationCounter::current() noexcept { return current_.load(std::memory_order_relaxed); }

std::size_t AllocationCounter::peak() noexcept { return peak_.load(std::memory_order_relaxed); }

void AllocationCounter::reset_peak() noexcept { peak_.store(current_.load(std::memory_order_relaxed)); }

}  // namespace smora
