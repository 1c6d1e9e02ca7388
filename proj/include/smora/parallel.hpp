// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <limits>
#include <new>
#include <vector>

namespace smora {

/// Splits [0, n) into `threads` contiguous chunks and runs `fn(begin, end)`
/// on each, the first chunk on the calling thread. Exceptions from workers
/// are rethrown on the caller.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t, std::size_t)>& fn);

/// Process-wide byte counter for allocations made through
/// `CountingAllocator`. Used to measure kernel intermediates.
class AllocationCounter {
public:
    static void on_alloc(std::size_t bytes) noexcept;
    static void on_free(std::size_t bytes) noexcept;
    [[nodiscard]] static std::size_t current() noexcept;
    [[nodiscard]] static std::size_t peak() noexcept;
    /// Resets the peak to the current live byte count.
    static void reset_peak() noexcept;

private:
    static std::atomic<std::size_t> current_;
    static std::atomic<std::size_t> peak_;
};

template <typename T>
struct CountingAllocator {
    using value_type = T;

    CountingAllocator() noexcept = default;
    template <typename U>
    CountingAllocator(const CountingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        if (n > std::numeric_limits<std::size_t>::max() / sizeof(T)) throw std::bad_array_new_length();
        T* p = static_cast<T*>(::operator new(n * sizeof(T)));
        AllocationCounter::on_alloc(n * sizeof(T));
        return p;
    }
    void deallocate(T* p, std::size_t n) noexcept {
        AllocationCounter::on_free(n * sizeof(T));
        ::operator delete(p);
    }

    template <typename U>
    bool operator==(const CountingAllocator<U>&) const noexcept {
        return true;
    }
};

template <typename T>
using TrackedVector = std::vector<T, CountingAllocator<T>>;

}  // namespace smora
