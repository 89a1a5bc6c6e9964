#include "tempo/parallel.hpp"

#include <algorithm>
#include <condition_variable>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace tempo {
namespace {

size_t read_thread_cap() {
  size_t n = std::thread::hardware_concurrency();
  if (n == 0) n = 1;
  if (const char* env = std::getenv("TEMPO_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) n = std::min<size_t>(n, static_cast<size_t>(v));
  }
  return n;
}

// Lazily started pool of max_threads()-1 workers; the calling thread always
// executes one chunk itself.
class Pool {
 public:
  static Pool& instance() {
    static Pool pool(max_threads());
    return pool;
  }

  void run(size_t chunks, const std::function<void(size_t)>& chunk_fn) {
    std::unique_lock<std::mutex> lock(mu_);
    chunk_fn_ = &chunk_fn;
    next_ = 0;
    total_ = chunks;
    pending_ = chunks;
    error_ = nullptr;
    ++generation_;
    wake_.notify_all();
    lock.unlock();

    work_off_queue();

    lock.lock();
    done_.wait(lock, [&] { return pending_ == 0; });
    chunk_fn_ = nullptr;
    if (error_) {
      std::exception_ptr e = error_;
      error_ = nullptr;
      lock.unlock();
      std::rethrow_exception(e);
    }
  }

 private:
  explicit Pool(size_t threads) {
    for (size_t i = 0; i + 1 < threads; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      stop_ = true;
      wake_.notify_all();
    }
    for (auto& w : workers_) w.join();
  }

  void work_off_queue() {
    for (;;) {
      size_t idx;
      {
        std::lock_guard<std::mutex> lock(mu_);
        if (next_ >= total_) return;
        idx = next_++;
      }
      // The first exception wins; remaining chunks still run to completion so
      // the caller can rethrow once every worker is quiescent.
      try {
        (*chunk_fn_)(idx);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu_);
        if (!error_) error_ = std::current_exception();
      }
      std::lock_guard<std::mutex> lock(mu_);
      if (--pending_ == 0) done_.notify_all();
    }
  }

  void worker_loop() {
    uint64_t seen = 0;
    for (;;) {
      {
        std::unique_lock<std::mutex> lock(mu_);
        wake_.wait(lock, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
      }
      work_off_queue();
    }
  }

  std::mutex mu_;
  std::condition_variable wake_, done_;
  std::vector<std::thread> workers_;
  const std::function<void(size_t)>* chunk_fn_ = nullptr;
  size_t next_ = 0, total_ = 0, pending_ = 0;
  uint64_t generation_ = 0;
  bool stop_ = false;
  std::exception_ptr error_ = nullptr;
};

}  // namespace

size_t max_threads() {
  static const size_t cap = read_thread_cap();
  return cap;
}

void parallel_for(size_t n, const std::function<void(size_t, size_t)>& fn,
                  size_t grain) {
  if (n == 0) return;
  const size_t threads = max_threads();
  if (threads == 1 || n <= grain) {
    fn(0, n);
    return;
  }
  const size_t chunks = std::min(threads, (n + grain - 1) / grain);
  const size_t per = (n + chunks - 1) / chunks;
  Pool::instance().run(chunks, [&](size_t c) {
    const size_t begin = c * per;
    const size_t end = std::min(n, begin + per);
    if (begin < end) fn(begin, end);
  });
}

}  // namespace tempo
