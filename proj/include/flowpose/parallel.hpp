#pragma once

// Serial and OpenMP execution of independent index ranges. Both backends run
// the same per-index body, so results are bit-identical; only scheduling
// differs.

#include <cstddef>
#include <exception>
#include <mutex>
#include <string>

namespace flowpose {

enum class Backend { Serial, OpenMP };

inline const char* to_string(Backend b) { return b == Backend::Serial ? "serial" : "openmp"; }

void set_thread_count(int n);
int thread_count();

// Calls body(i) for i in [0, n). An exception thrown by any body is rethrown
// after the loop; with several failures the one at the lowest index wins.
template <class F>
void parallel_for(std::size_t n, Backend backend, F&& body) {
  if (backend == Backend::Serial || n < 2) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::exception_ptr first;
  std::size_t first_index = n;
  std::mutex mu;
  const long long count = static_cast<long long>(n);
#pragma omp parallel for schedule(dynamic, 1)
  for (long long i = 0; i < count; ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
      std::lock_guard<std::mutex> lock(mu);
      if (static_cast<std::size_t>(i) < first_index) {
        first_index = static_cast<std::size_t>(i);
        first = std::current_exception();
      }
    }
  }
  if (first) std::rethrow_exception(first);
}

}  // namespace flowpose
