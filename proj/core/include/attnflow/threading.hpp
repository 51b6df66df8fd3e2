#pragma once

#include <cstdint>
#include <functional>

namespace attnflow {

// Worker count resolved from ATTNFLOW_THREADS (default 1, which keeps every
// computation on the calling thread).
int resolve_thread_count();

// Minimal fork-join pool. parallel_for blocks until every index is done;
// with one worker it degenerates to a serial loop on the calling thread.
class ThreadPool {
public:
    explicit ThreadPool(int workers);
    void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);
    int size() const { return workers_; }

private:
    int workers_;
};

}  // namespace attnflow
