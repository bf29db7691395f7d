#pragma once

#include <cstddef>
#include <cstdint>

namespace fpnet {

// Worker count for data-parallel kernels. Reads FPNET_THREADS on first use;
// falls back to the OpenMP default.
int thread_count();
void set_thread_count(int n);

namespace detail {
void parallel_for_impl(std::size_t n, void (*thunk)(void*, std::size_t), void* ctx);
}

// Runs fn(i) for i in [0, n). Each index is processed by exactly one worker,
// so any per-output reduction written inside fn is partition independent.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  if (n == 0) return;
  if (n == 1 || thread_count() <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  auto thunk = [](void* ctx, std::size_t i) { (*static_cast<Fn*>(ctx))(i); };
  detail::parallel_for_impl(n, thunk, const_cast<void*>(static_cast<const void*>(&fn)));
}

}  // namespace fpnet
