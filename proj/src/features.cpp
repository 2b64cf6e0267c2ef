#include "features.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <complex>

namespace ivafuse {

namespace {

constexpr double kLogFloor = 1e-10;
constexpr double kEigFloor = 1e-10;

int next_pow2(int n) {
  int p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Iterative radix-2 FFT, in place. len must be a power of two.
void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    double ang = -2.0 * M_PI / static_cast<double>(len);
    std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        std::complex<double> u = a[i + j];
        std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

// Levinson-Durbin on autocorrelations r(0..R). Returns forward prediction
// coefficients a_1..a_R with x(u) ~ sum_l a_l x(u-l).
Vec levinson(const Vec& r, int order) {
  Vec a = Vec::Zero(order);
  double err = r(0);
  Vec prev = Vec::Zero(order);
  for (int m = 0; m < order; ++m) {
    if (err <= 0.0) break;  // perfectly predictable already; rest stays zero
    double acc = r(m + 1);
    for (int l = 0; l < m; ++l) acc -= a(l) * r(m - l);
    double k = acc / err;
    prev = a;
    a(m) = k;
    for (int l = 0; l < m; ++l) a(l) = prev(l) - k * prev(m - 1 - l);
    err *= (1.0 - k * k);
  }
  return a;
}

}  // namespace

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Mat delta(const Mat& f, int w) {
  const int T = static_cast<int>(f.cols());
  if (T <= 2 * w) fail(Err::ShapeMismatch, "delta needs T > 2w");
  double denom = 0.0;
  for (int i = 1; i <= w; ++i) denom += 2.0 * i * i;
  Mat d(f.rows(), T);
  for (int t = 0; t < T; ++t) {
    Vec acc = Vec::Zero(f.rows());
    for (int i = 1; i <= w; ++i) {
      int hi = std::min(t + i, T - 1);
      int lo = std::max(t - i, 0);
      acc += i * (f.col(hi) - f.col(lo));
    }
    d.col(t) = acc / denom;
  }
  return d;
}

Mat lpc_features(const Mat& frames, int order) {
  const int U = static_cast<int>(frames.rows());
  const int T = static_cast<int>(frames.cols());
  if (order >= U) fail(Err::ShapeMismatch, "LPC order must be < frame length");

  Mat base(order, T);
  for (int t = 0; t < T; ++t) {
    Vec r(order + 1);
    for (int lag = 0; lag <= order; ++lag) {
      double acc = 0.0;
      for (int u = lag; u < U; ++u) acc += frames(u, t) * frames(u - lag, t);
      r(lag) = acc;
    }
    base.col(t) = r(0) > 0.0 ? levinson(r, order) : Vec::Zero(order);
  }

  Mat d1 = delta(base);
  Mat d2 = delta(d1);
  Mat out(3 * order, T);
  out.topRows(order) = base;
  out.middleRows(order, order) = d1;
  out.bottomRows(order) = d2;
  return out;
}

Mat mfcc_features(const Mat& frames, int sample_rate, int n_mels, int n_ceps) {
  const int U = static_cast<int>(frames.rows());
  const int T = static_cast<int>(frames.cols());
  if (n_ceps > n_mels) fail(Err::ShapeMismatch, "n_ceps must be <= n_mels");

  const int nfft = next_pow2(U);
  const int nbins = nfft / 2 + 1;
  const double f_max = sample_rate / 2.0;

  // Triangular filters on exact bin frequencies; edges equally spaced in mel.
  Vec edges(n_mels + 2);
  double m_hi = hz_to_mel(f_max);
  for (int j = 0; j < n_mels + 2; ++j) edges(j) = mel_to_hz(m_hi * j / (n_mels + 1));
  Mat fb = Mat::Zero(n_mels, nbins);
  for (int j = 0; j < n_mels; ++j) {
    double lo = edges(j), mid = edges(j + 1), hi = edges(j + 2);
    for (int b = 0; b < nbins; ++b) {
      double f = static_cast<double>(b) * sample_rate / nfft;
      if (f > lo && f < mid)
        fb(j, b) = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi)
        fb(j, b) = (hi - f) / (hi - mid);
    }
  }

  Mat dct(n_ceps, n_mels);
  for (int i = 0; i < n_ceps; ++i) {
    double scale = std::sqrt((i == 0 ? 1.0 : 2.0) / n_mels);
    for (int j = 0; j < n_mels; ++j)
      dct(i, j) = scale * std::cos(M_PI * i * (2.0 * j + 1.0) / (2.0 * n_mels));
  }

  Mat base(n_ceps, T);
  std::vector<std::complex<double>> buf(nfft);
  for (int t = 0; t < T; ++t) {
    for (int u = 0; u < U; ++u) buf[u] = frames(u, t);
    std::fill(buf.begin() + U, buf.end(), std::complex<double>(0.0, 0.0));
    fft(buf);
    Vec power(nbins);
    for (int b = 0; b < nbins; ++b) power(b) = std::norm(buf[b]);
    Vec mel_log = (fb * power).cwiseMax(kLogFloor).array().log();
    base.col(t) = dct * mel_log;
  }

  Mat d1 = delta(base);
  Mat d2 = delta(d1);
  Mat out(3 * n_ceps, T);
  out.topRows(n_ceps) = base;
  out.middleRows(n_ceps, n_ceps) = d1;
  out.bottomRows(n_ceps) = d2;
  return out;
}

FeatureTensor build_tensor(const std::vector<Mat>& slabs) {
  if (slabs.empty()) fail(Err::ShapeMismatch, "need at least one slab");
  for (const Mat& s : slabs)
    if (s.rows() != slabs[0].rows() || s.cols() != slabs[0].cols())
      fail(Err::ShapeMismatch, "slab shapes differ");
  return FeatureTensor{slabs};
}

std::pair<FeatureTensor, WhiteningTransform> whiten(const FeatureTensor& x) {
  const int N = x.N(), T = x.T();
  if (T <= N) fail(Err::ShapeMismatch, "whiten needs T > N");

  FeatureTensor out;
  WhiteningTransform w;
  for (const Mat& slab : x.slabs) {
    Vec mu = slab.rowwise().mean();
    Mat centered = slab.colwise() - mu;
    Mat cov = centered * centered.transpose() / static_cast<double>(T);
    Eigen::SelfAdjointEigenSolver<Mat> eig(cov);
    Vec lam = eig.eigenvalues();
    int floored = 0;
    for (int i = 0; i < N; ++i)
      if (lam(i) < kEigFloor) {
        lam(i) = kEigFloor;
        ++floored;
      }
    if (floored > N / 2)
      fail(Err::RankDeficient, std::to_string(floored) + " of " + std::to_string(N) +
                                   " eigenvalues at floor");
    Mat P = lam.cwiseSqrt().cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
    out.slabs.push_back(P * centered);
    w.P.push_back(P);
    w.mu.push_back(mu);
  }
  return {out, w};
}

}  // namespace ivafuse
