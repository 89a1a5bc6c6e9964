#pragma once

#include <cstddef>
#include <functional>

namespace tempo {

// Number of worker threads kernels may use. Defaults to the hardware
// concurrency; the TEMPO_THREADS environment variable caps it.
size_t max_threads();

// Runs fn(begin, end) over a partition of [0, n). Chunks are fixed by (n,
// thread count) only, so any per-chunk output is deterministic regardless of
// scheduling. Falls back to a single inline call for small n.
void parallel_for(size_t n, const std::function<void(size_t, size_t)>& fn,
                  size_t grain = 1);

}  // namespace tempo
