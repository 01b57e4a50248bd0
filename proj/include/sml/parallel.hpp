#pragma once

#include <cstddef>
#include <exception>
#include <functional>

namespace sml {

// Worker cap: SML_THREADS env var if set, else hardware concurrency.
std::size_t worker_count();

// Run f(0..n-1) across workers. Results must be written to per-index slots so
// serial and parallel execution are indistinguishable. Nested calls from
// inside a worker run serially.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& f);

}  // namespace sml
