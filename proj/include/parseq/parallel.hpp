#pragma once

#include <condition_variable>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace parseq {

// Fixed-size pool running index-parallel loops. Each index is handled by
// exactly one worker and callers write only to per-index slots, so results
// never depend on the worker count.
class WorkerPool {
 public:
  explicit WorkerPool(std::size_t threads = 1) : size_(threads == 0 ? 1 : threads) {
    for (std::size_t i = 1; i < size_; ++i) workers_.emplace_back([this, i] { worker_loop(i); });
  }

  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  ~WorkerPool() {
    {
      std::lock_guard lock(mutex_);
      stop_ = true;
    }
    wake_.notify_all();
    for (auto& w : workers_) w.join();
  }

  std::size_t size() const noexcept { return size_; }

  // Calls fn(i) for i in [0, n). Blocks until all calls return; rethrows the
  // first exception raised by any call.
  void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    if (size_ == 1 || n <= 1) {
      for (std::size_t i = 0; i < n; ++i) fn(i);
      return;
    }
    std::unique_lock lock(run_mutex_);
    {
      std::lock_guard guard(mutex_);
      job_ = &fn;
      job_n_ = n;
      pending_ = size_ - 1;
      error_ = nullptr;
      ++generation_;
    }
    wake_.notify_all();
    run_slice(0, fn, n);
    std::unique_lock guard(mutex_);
    done_.wait(guard, [this] { return pending_ == 0; });
    job_ = nullptr;
    if (error_) std::rethrow_exception(error_);
  }

 private:
  // Static round-robin split: worker w takes indices w, w+size, w+2*size, ...
  void run_slice(std::size_t w, const std::function<void(std::size_t)>& fn, std::size_t n) {
    try {
      for (std::size_t i = w; i < n; i += size_) fn(i);
    } catch (...) {
      std::lock_guard guard(mutex_);
      if (!error_) error_ = std::current_exception();
    }
  }

  void worker_loop(std::size_t w) {
    std::size_t seen = 0;
    for (;;) {
      const std::function<void(std::size_t)>* job = nullptr;
      std::size_t n = 0;
      {
        std::unique_lock guard(mutex_);
        wake_.wait(guard, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        job = job_;
        n = job_n_;
      }
      run_slice(w, *job, n);
      {
        std::lock_guard guard(mutex_);
        if (--pending_ == 0) done_.notify_one();
      }
    }
  }

  std::size_t size_;
  std::vector<std::thread> workers_;
  std::mutex run_mutex_;
  std::mutex mutex_;
  std::condition_variable wake_;
  std::condition_variable done_;
  const std::function<void(std::size_t)>* job_ = nullptr;
  std::size_t job_n_ = 0;
  std::size_t pending_ = 0;
  std::size_t generation_ = 0;
  std::exception_ptr error_;
  bool stop_ = false;
};

// PARSEQ_THREADS if set to a positive integer, otherwise 1.
inline std::size_t default_thread_count() {
  if (const char* env = std::getenv("PARSEQ_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (...) {
    }
  }
  return 1;
}

}  // namespace parseq
