#ifndef IVAFUSE_FEATURES_HPP
#define IVAFUSE_FEATURES_HPP

#include "common.hpp"

#include <vector>

namespace ivafuse {

constexpr int kLpcOrder = 13;   // R
constexpr int kNumMels = 39;
constexpr int kNumCeps = 13;
constexpr int kDeltaWindow = 2;

// K feature matrices sharing one N x T shape; slab k holds x^[k](t) as
// column t.
struct FeatureTensor {
  std::vector<Mat> slabs;

  int K() const { return static_cast<int>(slabs.size()); }
  int N() const { return slabs.empty() ? 0 : static_cast<int>(slabs[0].rows()); }
  int T() const { return slabs.empty() ? 0 : static_cast<int>(slabs[0].cols()); }
};

struct WhiteningTransform {
  std::vector<Mat> P;    // per-slab N x N
  std::vector<Vec> mu;   // per-slab mean
};

// Temporal regression derivative, window w, edge frames replicated.
Mat delta(const Mat& f, int w = kDeltaWindow);

// Per frame: autocorrelation-method LPC via Levinson-Durbin, then delta and
// delta-delta stacked below -> 3R x T. Frames are columns of `frames`.
// A frame with zero energy yields a zero column.
Mat lpc_features(const Mat& frames, int order = kLpcOrder);

// Per frame: power spectrum (FFT, zero-padded to the next power of two),
// triangular mel filterbank, floored log, orthonormal DCT-II keeping the
// first n_ceps coefficients, then delta and delta-delta -> 3*n_ceps x T.
Mat mfcc_features(const Mat& frames, int sample_rate, int n_mels = kNumMels,
                  int n_ceps = kNumCeps);

FeatureTensor build_tensor(const std::vector<Mat>& slabs);

// Centers and decorrelates each slab with an eigendecomposition of its
// sample covariance (1/T normalization); eigenvalues floored at 1e-10.
// More than N/2 floored eigenvalues is RankDeficient.
std::pair<FeatureTensor, WhiteningTransform> whiten(const FeatureTensor& x);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

}  // namespace ivafuse

#endif
