#include "synth.hpp"

#include "audio.hpp"

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace fs = std::filesystem;

namespace ivafuse {

namespace {

Mat random_orthogonal(int N, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Mat g(N, N);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) g(i, j) = gauss(rng);
  Eigen::HouseholderQR<Mat> qr(g);
  return qr.householderQ();
}

double amari_index(const Mat& g) {
  const int N = static_cast<int>(g.rows());
  if (N == 1) return 0.0;
  double acc = 0.0;
  for (int i = 0; i < N; ++i) {
    double mx = g.row(i).maxCoeff();
    acc += mx > 0.0 ? g.row(i).sum() / mx - 1.0 : N - 1.0;
  }
  for (int j = 0; j < N; ++j) {
    double mx = g.col(j).maxCoeff();
    acc += mx > 0.0 ? g.col(j).sum() / mx - 1.0 : N - 1.0;
  }
  return acc / (2.0 * N * (N - 1));
}

// One all-pole resonator pair applied in place.
void biquad_pole(std::vector<double>& x, double freq, double radius, int rate) {
  double theta = 2.0 * M_PI * freq / rate;
  double a1 = 2.0 * radius * std::cos(theta);
  double a2 = -radius * radius;
  double y1 = 0.0, y2 = 0.0;
  for (double& v : x) {
    double y = v + a1 * y1 + a2 * y2;
    y2 = y1;
    y1 = y;
    v = y;
  }
}

}  // namespace

SynthMixture gen_scv_mixture(int N, int K, int T, std::uint64_t seed) {
  if (N < 1 || K < 1) fail(Err::Usage, "need N, K >= 1");
  if (T < 10 * N * K) fail(Err::Usage, "need T >= 10*N*K");
  Rng rng = make_rng(child_seed(seed, 0));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Distinct per-component correlation levels spread over [0.5, 0.98]; the
  // covariance diversity across n is what makes the model identifiable, so
  // the levels are kept maximally apart (full-span even spacing, slight
  // jitter that cannot close more than a fifth of the gap).
  const double lo = 0.5, hi = 0.98;
  std::vector<double> rho(N);
  for (int n = 0; n < N; ++n) {
    double slot = N == 1 ? 0.5 : (n + 0.2 * (unit(rng) - 0.5)) / (N - 1);
    rho[n] = std::clamp(lo + (hi - lo) * slot, lo, hi);
  }

  SynthMixture mix;
  mix.seed = seed;
  for (int k = 0; k < K; ++k) mix.S.slabs.emplace_back(N, T);
  for (int n = 0; n < N; ++n) {
    Mat psi = Mat::Constant(K, K, rho[n]);
    psi.diagonal().setOnes();
    Mat L = Eigen::LLT<Mat>(psi).matrixL();
    for (int t = 0; t < T; ++t) {
      Vec z(K);
      for (int k = 0; k < K; ++k) z(k) = gauss(rng);
      Vec y = L * z;
      for (int k = 0; k < K; ++k) mix.S.slabs[k](n, t) = y(k);
    }
  }

  std::uniform_real_distribution<double> sig(0.5, 2.0);
  for (int k = 0; k < K; ++k) {
    Mat q1 = random_orthogonal(N, rng);
    Mat q2 = random_orthogonal(N, rng);
    Vec d(N);
    for (int n = 0; n < N; ++n) d(n) = sig(rng);
    mix.A.push_back(q1 * d.asDiagonal() * q2);
    mix.X.slabs.push_back(mix.A[k] * mix.S.slabs[k]);
  }
  return mix;
}

IsiReport joint_isi(const DemixingTensor& W, const std::vector<Mat>& A) {
  if (W.size() != A.size()) fail(Err::ShapeMismatch, "K differs between W and A");
  const int N = static_cast<int>(W[0].rows());
  IsiReport rep;
  Mat avg = Mat::Zero(N, N);
  for (std::size_t k = 0; k < W.size(); ++k) {
    Mat g = (W[k] * A[k]).cwiseAbs();
    rep.per_dataset.push_back(amari_index(g));
    avg += g;
  }
  avg /= static_cast<double>(W.size());
  rep.joint_isi = amari_index(avg);
  return rep;
}

IsiTrialRow isi_trial(int N, int K, int T, std::uint64_t seed, const IvaConfig& cfg) {
  SynthMixture mix = gen_scv_mixture(N, K, T, seed);
  auto [xw, wt] = whiten(mix.X);
  IvaConfig local = cfg;
  local.seed = child_seed(seed, 1);
  IvaResult res = run_iva(xw, local);
  DemixingTensor total;
  for (int k = 0; k < K; ++k) total.push_back(res.W[k] * wt.P[k]);
  IsiReport rep = joint_isi(total, mix.A);
  return {seed, res.iters, res.final_cost, rep.joint_isi};
}

std::vector<IsiTrialRow> isi_bench(const std::vector<int>& dims, int K, int T, int n_trials,
                                   std::uint64_t base_seed, const IvaConfig& cfg,
                                   int threads) {
  if (dims.empty()) fail(Err::Usage, "need at least one dimension");
  std::vector<IsiTrialRow> rows(n_trials);
  parallel_for(static_cast<std::size_t>(n_trials), threads, [&](std::size_t i) {
    int N = dims[i % dims.size()];
    rows[i] = isi_trial(N, K, T, child_seed(base_seed, i), cfg);
  });
  return rows;
}

std::string isi_rows_csv(const std::vector<IsiTrialRow>& rows) {
  std::string out = "seed,iters,final_cost,joint_isi\n";
  for (const IsiTrialRow& r : rows) {
    out += std::to_string(r.seed);
    out += ',';
    out += std::to_string(r.iters);
    out += ',';
    out += format_double(r.final_cost);
    out += ',';
    out += format_double(r.joint_isi);
    out += '\n';
  }
  return out;
}

std::string gen_synth_speakers(const std::string& out_dir, int n_speakers, int n_train,
                               int n_test, std::uint64_t seed) {
  if (n_speakers < 2) fail(Err::Usage, "need at least 2 speakers");
  if (n_train < 1 || n_test < 0) fail(Err::Usage, "need n_train >= 1, n_test >= 0");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) fail(Err::Io, "cannot create " + out_dir);

  Rng top = make_rng(child_seed(seed, 0));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Speaker voices live on a jittered grid so no two collapse onto the same
  // pitch/formant profile.
  std::vector<int> f2_order(n_speakers);
  std::iota(f2_order.begin(), f2_order.end(), 0);
  std::shuffle(f2_order.begin(), f2_order.end(), top);
  struct Voice {
    double f0, f1, f2, r1, r2;
  };
  std::vector<Voice> voices(n_speakers);
  for (int i = 0; i < n_speakers; ++i) {
    Voice& v = voices[i];
    v.f0 = 80.0 + 140.0 * (i + 0.5) / n_speakers + 2.0 * (unit(top) - 0.5);
    v.f1 = 300.0 + 900.0 * (i + 0.5) / n_speakers + 15.0 * (unit(top) - 0.5);
    v.f2 = 1400.0 + 1600.0 * (f2_order[i] + 0.5) / n_speakers + 25.0 * (unit(top) - 0.5);
    v.r1 = 0.965 + 0.01 * unit(top);
    v.r2 = 0.955 + 0.01 * unit(top);
  }

  std::string manifest_path = (fs::path(out_dir) / "manifest.csv").string();
  std::ofstream manifest(manifest_path);
  if (!manifest) fail(Err::Io, "cannot open " + manifest_path);
  manifest << "path,speaker_id,split\n";

  const int total = n_train + n_test;
  for (int i = 0; i < n_speakers; ++i) {
    for (int j = 0; j < total; ++j) {
      Rng rng = make_rng(child_seed(child_seed(seed, 1 + i), j));
      std::uniform_real_distribution<double> u(0.0, 1.0);
      const Voice& v = voices[i];
      double f0 = v.f0 * (1.0 + 0.14 * (u(rng) - 0.5));
      double f1 = v.f1 * (1.0 + 0.12 * (u(rng) - 0.5));
      double f2 = v.f2 * (1.0 + 0.12 * (u(rng) - 0.5));
      double r1 = v.r1 + 0.012 * (u(rng) - 0.5);
      double r2 = v.r2 + 0.012 * (u(rng) - 0.5);
      double noise_level = 0.3 + 0.5 * u(rng);
      double gain = 0.4 + 0.4 * u(rng);
      double phase = u(rng);

      std::vector<double> x(kFixedSamples);
      std::normal_distribution<double> gauss(0.0, 1.0);
      for (int s = 0; s < kFixedSamples; ++s) {
        double e = noise_level * gauss(rng);
        phase += f0 / kSampleRate;
        if (phase >= 1.0) {
          phase -= 1.0;
          e += 1.0;
        }
        x[s] = e;
      }
      biquad_pole(x, f1, r1, kSampleRate);
      biquad_pole(x, f2, r2, kSampleRate);

      double peak = 0.0;
      for (double s : x) peak = std::max(peak, std::abs(s));
      if (peak > 0.0)
        for (double& s : x) s *= gain / peak;

      char name[48];
      std::snprintf(name, sizeof(name), "spk%03d_sent%03d.wav", i, j);
      write_wav((fs::path(out_dir) / name).string(), x);
      char spk[16];
      std::snprintf(spk, sizeof(spk), "spk%03d", i);
      manifest << name << ',' << spk << ',' << (j < n_train ? "train" : "test") << '\n';
    }
  }
  if (!manifest) fail(Err::Io, "write failed: " + manifest_path);
  return manifest_path;
}

}  // namespace ivafuse
