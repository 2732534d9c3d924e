#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace gevit {

// Worker count: GEVIT_THREADS caps it, hardware concurrency is the default.
inline int worker_count() {
    unsigned hw = std::thread::hardware_concurrency();
    int n = hw == 0 ? 1 : static_cast<int>(hw);
    if (const char* env = std::getenv("GEVIT_THREADS")) {
        int cap = std::atoi(env);
        if (cap >= 1) n = std::min(n, cap);
    }
    return n;
}

// Static index partition; each worker owns a contiguous range, so results
// written per-index are identical to a sequential run.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
    int workers = std::min(worker_count(), n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    int chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        int lo = w * chunk;
        int hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (int i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace gevit
