#include "audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace ivafuse {

namespace {

std::uint32_t rd_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}

std::uint16_t rd_u16(const unsigned char* p) {
  return std::uint16_t(p[0] | p[1] << 8);
}

void wr_u32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

void wr_u16(std::ofstream& f, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  f.write(reinterpret_cast<const char*>(b), 2);
}

}  // namespace

void FrameConfig::validate() const {
  if (frame_len <= 0 || frame_shift <= 0 || frame_shift > frame_len)
    fail(Err::Usage, "need 0 < frame_shift <= frame_len");
  if (target_frames < 1) fail(Err::Usage, "target_frames must be >= 1");
  if (preemphasis < 0.0 || preemphasis >= 1.0) fail(Err::Usage, "need 0 <= preemphasis < 1");
  if (vad_energy_ratio < 0.0) fail(Err::Usage, "vad_energy_ratio must be >= 0");
}

std::vector<double> load_wav(const std::string& path, int expect_rate) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Err::Io, "cannot open " + path);
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (raw.size() < 12 || std::memcmp(raw.data(), "RIFF", 4) != 0 ||
      std::memcmp(raw.data() + 8, "WAVE", 4) != 0)
    fail(Err::NotWav, path);

  bool have_fmt = false;
  std::uint16_t fmt_tag = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::uint32_t data_len = 0;

  std::size_t pos = 12;
  while (pos + 8 <= raw.size()) {
    const unsigned char* hdr = raw.data() + pos;
    std::uint32_t len = rd_u32(hdr + 4);
    std::size_t body = pos + 8;
    if (body + len > raw.size()) fail(Err::TruncatedFile, path);
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (len < 16) fail(Err::TruncatedFile, path + ": fmt chunk");
      fmt_tag = rd_u16(raw.data() + body);
      channels = rd_u16(raw.data() + body + 2);
      rate = rd_u32(raw.data() + body + 4);
      bits = rd_u16(raw.data() + body + 14);
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data = raw.data() + body;
      data_len = len;
    }
    pos = body + len + (len & 1);  // chunks are word-aligned
  }

  if (!have_fmt || data == nullptr) fail(Err::NotWav, path + ": missing fmt/data");
  if (fmt_tag != 1 || bits != 16)
    fail(Err::UnsupportedEncoding, path + ": need PCM16, got tag " +
                                       std::to_string(fmt_tag) + "/" + std::to_string(bits) +
                                       " bits");
  if (channels != 1)
    fail(Err::UnsupportedEncoding, path + ": need mono, got " + std::to_string(channels));
  if (expect_rate > 0 && rate != static_cast<std::uint32_t>(expect_rate))
    fail(Err::UnsupportedEncoding,
         path + ": need " + std::to_string(expect_rate) + " Hz, got " + std::to_string(rate));

  std::size_t n = data_len / 2;
  if (n == 0) fail(Err::TooShort, path + ": no samples");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::int16_t s = static_cast<std::int16_t>(data[2 * i] | data[2 * i + 1] << 8);
    out[i] = s / 32768.0;
  }
  return out;
}

void write_wav(const std::string& path, const std::vector<double>& samples, int rate) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(Err::Io, "cannot open " + path + " for write");
  std::uint32_t data_len = static_cast<std::uint32_t>(samples.size() * 2);
  f.write("RIFF", 4);
  wr_u32(f, 36 + data_len);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  wr_u32(f, 16);
  wr_u16(f, 1);  // PCM
  wr_u16(f, 1);  // mono
  wr_u32(f, static_cast<std::uint32_t>(rate));
  wr_u32(f, static_cast<std::uint32_t>(rate) * 2);
  wr_u16(f, 2);
  wr_u16(f, 16);
  f.write("data", 4);
  wr_u32(f, data_len);
  for (double v : samples) {
    double c = std::clamp(v, -1.0, 32767.0 / 32768.0);
    std::int16_t s = static_cast<std::int16_t>(std::lrint(c * 32768.0));
    unsigned char b[2] = {static_cast<unsigned char>(s & 0xff),
                          static_cast<unsigned char>((s >> 8) & 0xff)};
    f.write(reinterpret_cast<const char*>(b), 2);
  }
  if (!f) fail(Err::Io, "write failed: " + path);
}

std::vector<double> apply_vad(const std::vector<double>& x, const FrameConfig& cfg) {
  if (x.empty()) fail(Err::TooShort, "empty signal");
  std::size_t flen = static_cast<std::size_t>(cfg.frame_len);
  std::size_t nf = (x.size() + flen - 1) / flen;

  std::vector<double> energy(nf);
  double mean = 0.0;
  for (std::size_t t = 0; t < nf; ++t) {
    std::size_t b = t * flen, e = std::min(b + flen, x.size());
    double acc = 0.0;
    for (std::size_t i = b; i < e; ++i) acc += x[i] * x[i];
    energy[t] = acc / static_cast<double>(e - b);
    mean += energy[t];
  }
  mean /= static_cast<double>(nf);
  double thr = cfg.vad_energy_ratio * mean;

  std::vector<double> kept;
  kept.reserve(x.size());
  for (std::size_t t = 0; t < nf; ++t) {
    if (energy[t] < thr) continue;
    std::size_t b = t * flen, e = std::min(b + flen, x.size());
    kept.insert(kept.end(), x.begin() + b, x.begin() + e);
  }
  if (kept.empty()) return x;
  return kept;
}

std::vector<double> fix_duration(const std::vector<double>& x, const FrameConfig& cfg,
                                 std::uint64_t seed) {
  if (x.empty()) fail(Err::TooShort, "empty signal");
  std::size_t t = static_cast<std::size_t>(cfg.fixed_samples());
  if (x.size() == t) return x;
  if (x.size() > t) {
    Rng rng = make_rng(seed);
    std::uniform_int_distribution<std::size_t> off(0, x.size() - t);
    std::size_t o = off(rng);
    return std::vector<double>(x.begin() + o, x.begin() + o + t);
  }
  std::vector<double> out;
  out.reserve(t);
  while (out.size() < t) {
    std::size_t take = std::min(x.size(), t - out.size());
    out.insert(out.end(), x.begin(), x.begin() + take);
  }
  return out;
}

std::vector<double> pre_emphasis(const std::vector<double>& x, double alpha) {
  std::vector<double> y(x.size());
  double prev = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = x[i] - alpha * prev;
    prev = x[i];
  }
  return y;
}

Vec hamming_window(int len) {
  Vec w(len);
  for (int u = 0; u < len; ++u)
    w(u) = 0.54 - 0.46 * std::cos(2.0 * M_PI * u / (len - 1));
  return w;
}

Mat frame_and_window(const std::vector<double>& x, const FrameConfig& cfg) {
  cfg.validate();
  std::size_t need = static_cast<std::size_t>(cfg.fixed_samples());
  if (x.size() < need)
    fail(Err::TooShort,
         "have " + std::to_string(x.size()) + " samples, need " + std::to_string(need));
  std::vector<double> y = pre_emphasis(x, cfg.preemphasis);
  Vec w = hamming_window(cfg.frame_len);
  Mat out(cfg.frame_len, cfg.target_frames);
  for (int t = 0; t < cfg.target_frames; ++t)
    for (int u = 0; u < cfg.frame_len; ++u)
      out(u, t) = y[static_cast<std::size_t>(t) * cfg.frame_shift + u] * w(u);
  return out;
}

}  // namespace ivafuse
