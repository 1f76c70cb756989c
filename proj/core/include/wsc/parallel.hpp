// Slot-based parallel loop. Every job writes only into its own output slot
// and draws randomness from its own counter-based substream, so results are
// identical for any worker count, including one.
#pragma once

#include <cstddef>
#include <functional>

namespace wsc {

// Resolution order: explicit argument (> 0), WSCBENCH_THREADS environment
// variable, hardware concurrency. Always at least 1.
int resolve_thread_count(int requested);

void parallel_for(std::size_t job_count, int threads,
                  const std::function<void(std::size_t)>& job);

}  // namespace wsc
