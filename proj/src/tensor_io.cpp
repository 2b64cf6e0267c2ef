#include "tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace ivafuse {

namespace {

constexpr std::uint32_t kVersion = 1;

void put_u32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

void put_f32(std::ofstream& f, double v) {
  put_u32(f, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

std::uint32_t get_u32(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (!f) fail(Err::TruncatedFile, path);
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
         std::uint32_t(b[3]) << 24;
}

double get_f32(std::ifstream& f, const std::string& path) {
  return std::bit_cast<float>(get_u32(f, path));
}

void check_magic(std::ifstream& f, const char* magic, const std::string& path) {
  char got[4];
  f.read(got, 4);
  if (!f || std::memcmp(got, magic, 4) != 0)
    fail(Err::Io, path + ": bad magic, expected " + magic);
}

}  // namespace

void write_tensor(const std::string& path, const FeatureTensor& x) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(Err::Io, "cannot open " + path + " for write");
  f.write("IVFT", 4);
  put_u32(f, kVersion);
  put_u32(f, static_cast<std::uint32_t>(x.N()));
  put_u32(f, static_cast<std::uint32_t>(x.T()));
  put_u32(f, static_cast<std::uint32_t>(x.K()));
  for (int k = 0; k < x.K(); ++k)
    for (int t = 0; t < x.T(); ++t)
      for (int n = 0; n < x.N(); ++n) put_f32(f, x.slabs[k](n, t));
  if (!f) fail(Err::Io, "write failed: " + path);
}

FeatureTensor read_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Err::Io, "cannot open " + path);
  check_magic(f, "IVFT", path);
  std::uint32_t version = get_u32(f, path);
  if (version != kVersion) fail(Err::Io, path + ": unsupported version");
  std::uint32_t N = get_u32(f, path), T = get_u32(f, path), K = get_u32(f, path);
  if (N == 0 || T == 0 || K == 0) fail(Err::Io, path + ": zero dimension");
  FeatureTensor x;
  for (std::uint32_t k = 0; k < K; ++k) {
    Mat slab(N, T);
    for (std::uint32_t t = 0; t < T; ++t)
      for (std::uint32_t n = 0; n < N; ++n) slab(n, t) = get_f32(f, path);
    x.slabs.push_back(std::move(slab));
  }
  return x;
}

void write_demixing(const std::string& path, const std::vector<Mat>& w) {
  if (w.empty()) fail(Err::ShapeMismatch, "empty demixing tensor");
  const int N = static_cast<int>(w[0].rows());
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(Err::Io, "cannot open " + path + " for write");
  f.write("IVFW", 4);
  put_u32(f, kVersion);
  put_u32(f, static_cast<std::uint32_t>(N));
  put_u32(f, static_cast<std::uint32_t>(w.size()));
  for (const Mat& m : w)
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < N; ++j) put_f32(f, m(i, j));
  if (!f) fail(Err::Io, "write failed: " + path);
}

std::vector<Mat> read_demixing(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Err::Io, "cannot open " + path);
  check_magic(f, "IVFW", path);
  std::uint32_t version = get_u32(f, path);
  if (version != kVersion) fail(Err::Io, path + ": unsupported version");
  std::uint32_t N = get_u32(f, path), K = get_u32(f, path);
  if (N == 0 || K == 0) fail(Err::Io, path + ": zero dimension");
  std::vector<Mat> w;
  for (std::uint32_t k = 0; k < K; ++k) {
    Mat m(N, N);
    for (std::uint32_t i = 0; i < N; ++i)
      for (std::uint32_t j = 0; j < N; ++j) m(i, j) = get_f32(f, path);
    w.push_back(std::move(m));
  }
  return w;
}

}  // namespace ivafuse
