// SPDX-License-Identifier: Apache-2.0
#include "cnxt/parallel.hpp"

#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cnxt {

namespace {
std::atomic<std::size_t> g_threads{0};
}

void set_num_threads(std::size_t threads) {
  g_threads = threads;
#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(static_cast<int>(threads));
#endif
}

std::size_t num_threads() {
#ifdef _OPENMP
  const std::size_t cap = g_threads.load();
  return cap > 0 ? cap : static_cast<std::size_t>(omp_get_max_threads());
#else
  return 1;
#endif
}

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body) {
  const std::size_t threads = num_threads();
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
#ifdef _OPENMP
  const auto n = static_cast<long long>(count);
#pragma omp parallel for schedule(static) num_threads(static_cast<int>(threads))
  for (long long i = 0; i < n; ++i) body(static_cast<std::size_t>(i));
#else
  for (std::size_t i = 0; i < count; ++i) body(i);
#endif
}

}  // namespace cnxt
