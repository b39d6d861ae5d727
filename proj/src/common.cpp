#include "ttf/common.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace ttf {

int thread_count() {
    static const int cached = [] {
        if (const char* env = std::getenv("TTF_THREADS")) {
            const long v = std::strtol(env, nullptr, 10);
            if (v >= 1) return static_cast<int>(std::min<long>(v, 16));
        }
        const unsigned hw = std::thread::hardware_concurrency();
        return static_cast<int>(std::clamp(hw, 1u, 16u));
    }();
    return cached;
}

void parallel_chunks(int n_chunks, const std::function<void(int)>& fn) {
    const int workers = std::min(thread_count(), n_chunks);
    if (workers <= 1) {
        for (int c = 0; c < n_chunks; ++c) fn(c);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const int c = next.fetch_add(1);
                if (c >= n_chunks) break;
                fn(c);
            }
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace ttf
