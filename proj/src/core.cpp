#include "ocld/core.hpp"

#include <exception>
#include <thread>

namespace ocld {

void parallel_for_ranges(int n, int n_threads,
                         const std::function<void(int, int)>& fn) {
  if (n <= 0) return;
  if (n_threads <= 1 || n == 1) {
    fn(0, n);
    return;
  }
  const int workers = std::min(n_threads, n);
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    const int lo = static_cast<int>(static_cast<int64_t>(n) * w / workers);
    const int hi = static_cast<int>(static_cast<int64_t>(n) * (w + 1) / workers);
    pool.emplace_back([lo, hi, w, &fn, &errors]() {
      try {
        fn(lo, hi);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void parallel_for(int n, int n_threads, const std::function<void(int)>& fn) {
  parallel_for_ranges(n, n_threads, [&fn](int lo, int hi) {
    for (int i = lo; i < hi; ++i) fn(i);
  });
}

}  // namespace ocld
