#pragma once

#include <condition_variable>
#include <mutex>

namespace oet {

// Counting semaphore bounding in-flight remote requests per target handle.
class Semaphore {
 public:
  explicit Semaphore(int count) : count_(count) {}

  void acquire() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return count_ > 0; });
    --count_;
  }

  void release() {
    {
      std::lock_guard lock(mu_);
      ++count_;
    }
    cv_.notify_one();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  int count_;
};

struct SemaphoreGuard {
  explicit SemaphoreGuard(Semaphore* s) : sem(s) {
    if (sem) sem->acquire();
  }
  ~SemaphoreGuard() {
    if (sem) sem->release();
  }
  SemaphoreGuard(const SemaphoreGuard&) = delete;
  SemaphoreGuard& operator=(const SemaphoreGuard&) = delete;

  Semaphore* sem;
};

}  // namespace oet
