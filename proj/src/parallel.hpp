#pragma once

#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace oet::detail {

// Runs f(i) for i in [0, n) across a small worker pool. Work items must be
// independent; callers get determinism by writing results into slot i. The
// first exception is rethrown on the calling thread.
template <class F>
void parallel_for(std::size_t n, F&& f, unsigned max_threads = 0) {
  if (n == 0) return;
  unsigned workers = max_threads ? max_threads : std::thread::hardware_concurrency();
  if (workers == 0) workers = 1;
  workers = std::min<unsigned>(workers, 8);
  workers = std::min<unsigned>(workers, static_cast<unsigned>(n));

  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;

  auto run = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        f(i);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };

  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned t = 0; t < workers; ++t) pool.emplace_back(run);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace oet::detail
