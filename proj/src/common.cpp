#include "common.hpp"

#include <atomic>
#include <charconv>
#include <cstdlib>
#include <mutex>
#include <thread>

namespace ivafuse {

const char* err_name(Err e) {
  switch (e) {
    case Err::NotWav: return "NotWav";
    case Err::UnsupportedEncoding: return "UnsupportedEncoding";
    case Err::TruncatedFile: return "TruncatedFile";
    case Err::TooShort: return "TooShort";
    case Err::ShapeMismatch: return "ShapeMismatch";
    case Err::RankDeficient: return "RankDeficient";
    case Err::DegenerateNullspace: return "DegenerateNullspace";
    case Err::SingularCovariance: return "SingularCovariance";
    case Err::SingularDemixing: return "SingularDemixing";
    case Err::NonFiniteLoss: return "NonFiniteLoss";
    case Err::Io: return "Io";
    case Err::Usage: return "Usage";
    case Err::Numeric: return "Numeric";
  }
  return "Unknown";
}

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("IVAFUSE_THREADS")) {
    int v = std::atoi(env);
    if (v > 0) return v;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  threads = resolve_threads(threads);
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::size_t nw = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  pool.reserve(nw);
  for (std::size_t w = 0; w < nw; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace ivafuse
