#ifndef IVAFUSE_AUDIO_HPP
#define IVAFUSE_AUDIO_HPP

#include "common.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ivafuse {

// Frame geometry used throughout: 25 ms windows every 10 ms at 16 kHz.
constexpr int kSampleRate = 16000;
constexpr int kFrameLen = 400;   // U
constexpr int kFrameHop = 160;   // V
constexpr int kNumFrames = 300;  // T
// Samples required for exactly kNumFrames full windows.
constexpr int kFixedSamples = (kNumFrames - 1) * kFrameHop + kFrameLen;  // 48240

struct FrameConfig {
  int frame_len = kFrameLen;    // U
  int frame_shift = kFrameHop;  // V
  int target_frames = kNumFrames;
  double preemphasis = 0.97;
  double vad_energy_ratio = 0.05;

  int fixed_samples() const { return (target_frames - 1) * frame_shift + frame_len; }
  void validate() const;
};

// PCM16 mono WAV reader. Rejects anything else; samples scaled to [-1, 1)
// by 1/32768. expect_rate <= 0 accepts any rate.
std::vector<double> load_wav(const std::string& path, int expect_rate = kSampleRate);

void write_wav(const std::string& path, const std::vector<double>& samples,
               int rate = kSampleRate);

// Silence removal: splits the signal into non-overlapping chunks of
// frame_len samples (one shorter tail chunk allowed) and keeps those whose
// per-sample energy is at least vad_energy_ratio times the mean. Falls back
// to the whole signal when nothing survives.
std::vector<double> apply_vad(const std::vector<double>& x, const FrameConfig& cfg);

// Crops (seeded, uniform offset) or cyclically repeats to exactly
// cfg.fixed_samples().
std::vector<double> fix_duration(const std::vector<double>& x, const FrameConfig& cfg,
                                 std::uint64_t seed);

// y(u) = x(u) - alpha * x(u-1), x(-1) = 0.
std::vector<double> pre_emphasis(const std::vector<double>& x, double alpha);

Vec hamming_window(int len = kFrameLen);

// Pre-emphasizes the whole signal, then slices overlapping frames and
// applies the Hamming window. Column t holds frame t (U x T result).
Mat frame_and_window(const std::vector<double>& x, const FrameConfig& cfg);

}  // namespace ivafuse

#endif
