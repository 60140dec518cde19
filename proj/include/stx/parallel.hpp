#pragma once

#include <cstddef>
#include <functional>

namespace stx {

// Worker cap used by data-parallel loops. Defaults to STX_THREADS or 1.
std::size_t thread_count();
void set_thread_count(std::size_t n);

// Runs body(i) for i in [0, n) over contiguous static chunks. Each index is
// visited exactly once, so writes to per-index slots are partition independent.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace stx
