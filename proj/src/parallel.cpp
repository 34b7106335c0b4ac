// SPDX-License-Identifier: Apache-2.0
#include "splatfill/parallel.hpp"

#include <atomic>

namespace splatfill {

namespace {
std::atomic<int> g_workers{0}; // 0 = use hardware concurrency
}

int worker_count() {
    int n = g_workers.load();
    if (n > 0) return n;
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

void set_worker_count(int n) { g_workers.store(n > 0 ? n : 0); }

void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
    if (n == 0) return;
    size_t workers = std::min<size_t>(static_cast<size_t>(worker_count()), n);
    if (workers <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::atomic<size_t> next{0};
    for (size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                size_t i = next.fetch_add(1);
                if (i >= n) break;
                fn(i);
            }
        });
    }
    for (auto& t : pool) t.join();
}

} // namespace splatfill
