#pragma once

#include <cstddef>
#include <functional>

namespace sing {

/// Worker count: SING_THREADS if set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
std::size_t thread_count();

/// Runs `body(i)` for i in [0, count) over contiguous chunks. Callers write
/// into pre-sized, index-addressed outputs so results never depend on
/// scheduling. If any iteration throws, the exception from the lowest
/// failing index is rethrown.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace sing
