#ifndef IVAFUSE_SYNTH_HPP
#define IVAFUSE_SYNTH_HPP

#include "iva.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ivafuse {

// Ground-truth mixing problem: X^[k] = A^[k] S^[k], where the n-th source
// row is correlated across slabs (its K-vector has equicorrelation rho_n,
// distinct per n) and sources are independent across n.
struct SynthMixture {
  FeatureTensor S;
  std::vector<Mat> A;   // K well-conditioned N x N mixing matrices
  FeatureTensor X;
  std::uint64_t seed = 0;
};

struct IsiReport {
  double joint_isi = 0.0;
  std::vector<double> per_dataset;
};

SynthMixture gen_scv_mixture(int N, int K, int T, std::uint64_t seed);

// Amari-style permutation/scale-invariant separation index in [0, 1];
// 0 iff every G^[k] = W^[k] A^[k] shares one scaled permutation.
IsiReport joint_isi(const DemixingTensor& W, const std::vector<Mat>& A);

// One separation benchmark trial: mixture -> whiten -> run_iva -> ISI of
// the whitening-composed demixing against the true mixing.
struct IsiTrialRow {
  std::uint64_t seed;
  int iters;
  double final_cost;
  double joint_isi;
};

IsiTrialRow isi_trial(int N, int K, int T, std::uint64_t seed, const IvaConfig& cfg);

// n_trials trials cycling N over `dims`; per-trial seeds derived from
// base_seed so runs are order-independent and reproducible.
std::vector<IsiTrialRow> isi_bench(const std::vector<int>& dims, int K, int T, int n_trials,
                                   std::uint64_t base_seed, const IvaConfig& cfg,
                                   int threads = 0);

// Canonical CSV rendering (header + one row per trial), shared by the CLI
// and the acceptance checks so reruns compare byte-for-byte.
std::string isi_rows_csv(const std::vector<IsiTrialRow>& rows);

// Synthetic speaker corpus: each speaker is a distinct all-pole filter
// excited by a pitch-specific pulse train plus noise. Writes one WAV per
// sentence and a manifest CSV (path,speaker_id,split) into out_dir.
// Returns the manifest path.
std::string gen_synth_speakers(const std::string& out_dir, int n_speakers, int n_train,
                               int n_test, std::uint64_t seed);

}  // namespace ivafuse

#endif
