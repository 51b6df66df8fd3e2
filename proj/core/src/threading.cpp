#include "attnflow/threading.hpp"

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace attnflow {

int resolve_thread_count() {
    const char* env = std::getenv("ATTNFLOW_THREADS");
    if (!env || !*env) return 1;
    const int n = std::atoi(env);
    return n < 1 ? 1 : n;
}

ThreadPool::ThreadPool(int workers) : workers_(workers < 1 ? 1 : workers) {}

void ThreadPool::parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
    if (workers_ <= 1 || n <= 1) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::int64_t> next{0};
    std::atomic<bool> failed{false};
    std::string first_error;
    std::mutex err_mutex;

    auto body = [&] {
        for (;;) {
            const std::int64_t i = next.fetch_add(1);
            if (i >= n || failed.load()) return;
            try {
                fn(i);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> g(err_mutex);
                if (!failed.exchange(true)) first_error = e.what();
                return;
            }
        }
    };
    std::vector<std::thread> threads;
    const int spawn = int(std::min<std::int64_t>(workers_, n)) - 1;
    threads.reserve(std::size_t(spawn));
    for (int i = 0; i < spawn; ++i) threads.emplace_back(body);
    body();
    for (auto& t : threads) t.join();
    if (failed.load()) throw std::runtime_error(first_error);
}

}  // namespace attnflow
