#include "fpnet/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fpnet {

namespace {

int detect_threads() {
  if (const char* env = std::getenv("FPNET_THREADS")) {
    try {
      int n = std::stoi(env);
      if (n > 0) return n;
    } catch (...) {
    }
  }
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

std::atomic<int>& threads_slot() {
  static std::atomic<int> slot{detect_threads()};
  return slot;
}

}  // namespace

int thread_count() { return threads_slot().load(std::memory_order_relaxed); }

void set_thread_count(int n) { threads_slot().store(n > 0 ? n : 1, std::memory_order_relaxed); }

namespace detail {

void parallel_for_impl(std::size_t n, void (*thunk)(void*, std::size_t), void* ctx) {
#ifdef _OPENMP
  const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (std::int64_t i = 0; i < count; ++i) thunk(ctx, static_cast<std::size_t>(i));
#else
  for (std::size_t i = 0; i < n; ++i) thunk(ctx, i);
#endif
}

}  // namespace detail
}  // namespace fpnet
