#pragma once

#include <cstddef>
#include <functional>

namespace primroute {

/// Process-wide worker count used by parallel_for (at least 1).
void set_worker_count(std::size_t workers);
std::size_t worker_count();

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Each index is
/// handled exactly once; callers write results into per-index slots so the
/// outcome does not depend on scheduling. The first exception is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace primroute
