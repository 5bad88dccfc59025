#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace ddpf {

// Worker count resolution: DDPF_WORKERS env var wins, otherwise hardware
// concurrency. Always at least 1.
inline int default_workers() {
  if (const char* env = std::getenv("DDPF_WORKERS")) {
    int w = std::atoi(env);
    if (w >= 1) return w;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

// Static block partition of [0, n). Each worker owns a contiguous index
// range and must only write state belonging to its own indices; results are
// then independent of the worker count and of scheduling.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& body, int workers = -1) {
  if (workers < 1) workers = default_workers();
  std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(w);
  std::size_t chunk = (n + w - 1) / w;
  std::exception_ptr first_error;
  std::mutex error_mutex;
  for (std::size_t t = 0; t < w; ++t) {
    std::size_t lo = t * chunk;
    std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &body, &first_error, &error_mutex] {
      try {
        for (std::size_t i = lo; i < hi; ++i) body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace ddpf
