#pragma once

#include <cstddef>
#include <functional>

namespace granflow {

/// Worker count from GRANFLOW_WORKERS, else the hardware concurrency (>= 1).
int worker_count();

/// Runs body(i) for i in [0, n) on up to worker_count() threads. Each index is
/// processed exactly once; callers write results into per-index slots and reduce
/// them afterwards in index order, so results do not depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace granflow
