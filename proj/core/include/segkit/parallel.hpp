#pragma once

#include <cstddef>
#include <functional>

namespace segkit {

// Worker cap: SEGKIT_THREADS if set to a positive integer, otherwise the
// hardware concurrency.
std::size_t worker_count();

// Runs fn(i) for i in [0, n). Indices are split into contiguous chunks, one
// per worker; fn must write only to locations owned by index i so that the
// result is independent of the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace segkit
