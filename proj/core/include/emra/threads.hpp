#pragma once

#include <cstddef>
#include <functional>

namespace emra {

// Number of worker threads: hardware concurrency, capped by the EMRA_THREADS
// environment variable when set. Always at least 1.
int worker_count();

// Runs fn(worker_id, begin, end) over disjoint chunks of [0, n) on
// worker_count() threads. Chunk boundaries depend only on n and the worker
// count, so writes to per-index slots stay deterministic.
void parallel_for(std::size_t n,
                  const std::function<void(int, std::size_t, std::size_t)>& fn);

}  // namespace emra
