#ifndef IVAFUSE_CONFIG_HPP
#define IVAFUSE_CONFIG_HPP

#include "audio.hpp"
#include "iva.hpp"
#include "nn.hpp"

#include <cstdint>
#include <string>

namespace ivafuse {

// Flat run configuration. Every knob is addressable as a key=value pair,
// either from a config file or a CLI flag; unknown keys are rejected.
struct RunConfig {
  // framing
  int frame_len = kFrameLen;
  int frame_shift = kFrameHop;
  int target_frames = kNumFrames;
  double preemphasis = 0.97;
  double vad_energy_ratio = 0.05;
  int sample_rate = kSampleRate;
  // features
  int lpc_order = kLpcOrder;
  int n_mels = kNumMels;
  int n_ceps = kNumCeps;
  // per-sentence separation
  double iva_eta0 = 1.0;
  double iva_eta_decay = 0.9;
  double iva_eta_min = 1e-6;
  double iva_cost_tol = 1e-9;
  int iva_max_iters = 100;
  bool shared_demixing = false;
  // network (F1/F2 = 0 picks the variant default)
  std::string variant = "pcnn-i";
  int n1 = 3, n2 = 5, n3 = 3;
  int C1 = 32, C2 = 32, C3 = 64;
  int D = 3;
  int F1 = 0, F2 = 0;
  // training
  std::string feature_mode = "y_pair";  // y_pair|y_tensor|x_tensor|x1|x2
  int batch_size = 32;
  int epochs = 10;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  int threads = 0;

  void set(const std::string& key, const std::string& value);
  void load_file(const std::string& path);
  std::string dump() const;

  FrameConfig frame() const;
  IvaConfig iva() const;
  // Input dims follow the feature mode; validates mode/variant pairing.
  NetworkSpec network(int n_classes) const;
  void validate() const;
};

}  // namespace ivafuse

#endif
