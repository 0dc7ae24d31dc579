#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace trajkit {

// Fork-join pool shared by the math kernels. Size is capped by the
// TRAJKIT_THREADS environment variable. parallel_for called from inside a
// worker runs inline, so nested parallelism degrades to sequential instead
// of deadlocking.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  int size() const { return static_cast<int>(workers_.size()) + 1; }

  void parallel_for(int n, const std::function<void(int)>& fn) {
    if (n <= 0) return;
    if (workers_.empty() || n == 1 || in_worker()) {
      for (int i = 0; i < n; ++i) fn(i);
      return;
    }
    std::unique_lock<std::mutex> lk(mu_);
    task_ = &fn;
    next_.store(0, std::memory_order_relaxed);
    limit_ = n;
    pending_ = static_cast<int>(workers_.size());
    ++generation_;
    cv_start_.notify_all();
    lk.unlock();

    run_range(fn);  // calling thread participates

    lk.lock();
    cv_done_.wait(lk, [&] { return pending_ == 0; });
    task_ = nullptr;
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

 private:
  ThreadPool() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw <= 0) hw = 1;
    int n = hw;
    if (const char* env = std::getenv("TRAJKIT_THREADS")) {
      int cap = std::atoi(env);
      if (cap >= 1) n = cap < n ? cap : n;
    }
    for (int i = 0; i + 1 < n; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
      cv_start_.notify_all();
    }
    for (auto& t : workers_) t.join();
  }

  static bool& in_worker() {
    thread_local bool flag = false;
    return flag;
  }

  void run_range(const std::function<void(int)>& fn) {
    for (;;) {
      int i = next_.fetch_add(1, std::memory_order_relaxed);
      if (i >= limit_) break;
      fn(i);
    }
  }

  void worker_loop() {
    in_worker() = true;
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(int)>* task = nullptr;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_start_.wait(lk, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        task = task_;
      }
      if (task) run_range(*task);
      {
        std::lock_guard<std::mutex> lk(mu_);
        if (--pending_ == 0) cv_done_.notify_all();
      }
    }
  }

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_start_, cv_done_;
  const std::function<void(int)>* task_ = nullptr;
  std::atomic<int> next_{0};
  int limit_ = 0;
  int pending_ = 0;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
};

inline void parallel_for(int n, const std::function<void(int)>& fn) {
  ThreadPool::instance().parallel_for(n, fn);
}

}  // namespace trajkit
