#ifndef IVAFUSE_COMMON_HPP
#define IVAFUSE_COMMON_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace ivafuse {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

enum class Err {
  // audio
  NotWav,
  UnsupportedEncoding,
  TruncatedFile,
  TooShort,
  // features
  ShapeMismatch,
  RankDeficient,
  // iva
  DegenerateNullspace,
  SingularCovariance,
  SingularDemixing,
  // trainer
  NonFiniteLoss,
  // generic
  Io,
  Usage,
  Numeric,
};

const char* err_name(Err e);

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& msg)
      : std::runtime_error(std::string(err_name(code)) + ": " + msg), code_(code) {}
  Err code() const { return code_; }

 private:
  Err code_;
};

[[noreturn]] inline void fail(Err code, const std::string& msg) { throw Error(code, msg); }

using Rng = std::mt19937_64;

// splitmix64; used to derive independent child seeds from (seed, stream ids)
// so parallel work items stay deterministic regardless of scheduling.
inline std::uint64_t mix_seed(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t child_seed(std::uint64_t base, std::uint64_t stream) {
  return mix_seed(base ^ mix_seed(stream + 0x51ed2701ULL));
}

inline Rng make_rng(std::uint64_t seed) { return Rng(mix_seed(seed)); }

// Worker count: explicit argument wins, then IVAFUSE_THREADS, then hardware.
int resolve_threads(int requested = 0);

// Runs fn(i) for i in [0, n). Items must be independent; results keyed by i.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

std::string format_double(double v);  // shortest round-trip text, stable across runs

}  // namespace ivafuse

#endif
