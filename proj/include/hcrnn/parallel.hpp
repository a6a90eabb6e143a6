#pragma once

// Fixed-partition fan-out. Work is cut into the same chunks regardless of
// how many workers run them, so reductions done chunk by chunk in index
// order give identical results for any worker count.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace hcrnn {

/// min(hardware threads, HCRNN_THREADS) with a floor of one.
inline std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("HCRNN_THREADS")) {
    try {
      const long cap = std::stol(env);
      if (cap >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
    } catch (const std::exception&) {
    }
  }
  return n;
}

/// Calls fn(i) for i in [0, n) on up to `workers` threads. The first
/// exception thrown by any call is rethrown after all workers stop.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t workers = worker_count()) {
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto run = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

struct Chunk {
  std::size_t begin, end;
};

/// Splits [0, n) into at most `chunks` contiguous nonempty pieces.
inline std::vector<Chunk> fixed_chunks(std::size_t n, std::size_t chunks) {
  std::vector<Chunk> out;
  if (n == 0) return out;
  chunks = std::max<std::size_t>(1, std::min(chunks, n));
  for (std::size_t c = 0; c < chunks; ++c) out.push_back({c * n / chunks, (c + 1) * n / chunks});
  return out;
}

}  // namespace hcrnn
