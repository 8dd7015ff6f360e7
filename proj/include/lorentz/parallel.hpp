#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace lorentz {

/// Worker count: LORENTZ_LAB_THREADS if set (>= 1), else hardware concurrency.
inline unsigned thread_count()
{
    unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("LORENTZ_LAB_THREADS")) {
        try {
            long v = std::stol(env);
            if (v >= 1) return static_cast<unsigned>(v);
        } catch (...) {
        }
    }
    return hw;
}

/*!
 * Run fn(i) for i in [0, n) on up to thread_count() threads.
 *
 * Work is handed out in contiguous chunks through an atomic cursor. Callers
 * write results into per-index slots and reduce afterwards in index order, so
 * the outcome does not depend on scheduling. The first exception thrown by
 * any worker is rethrown on the calling thread.
 */
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t chunk = 0)
{
    if (n == 0) return;
    const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(thread_count(), n));
    if (chunk == 0) chunk = std::max<std::size_t>(1, n / (8 * workers));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }

    std::atomic<std::size_t> cursor{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto body = [&] {
        for (;;) {
            std::size_t begin = cursor.fetch_add(chunk);
            if (begin >= n) return;
            std::size_t end = std::min(n, begin + chunk);
            try {
                for (std::size_t i = begin; i < end; ++i) fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                cursor.store(n);
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (unsigned w = 1; w < workers; ++w) pool.emplace_back(body);
    body();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace lorentz
