#ifndef IVAFUSE_IVA_HPP
#define IVAFUSE_IVA_HPP

#include "features.hpp"

#include <cstdint>
#include <vector>

namespace ivafuse {

// K stacked N x N demixing matrices W^[k].
using DemixingTensor = std::vector<Mat>;
// Y shares the K x (N x T) layout of the input tensor.
using IfcTensor = FeatureTensor;

// Sample statistics of the demixed components.
//   psi[n]      : K x K covariance of the n-th component vector across slabs.
//   rx[k1][k2]  : N x N cross-covariance (1/T) X^[k1] X^[k2]^T (empty unless
//                 requested; needed by hessian_blocks).
struct ScvStats {
  std::vector<Mat> psi;
  std::vector<std::vector<Mat>> rx;
};

struct IvaConfig {
  double eta0 = 1.0;
  double eta_decay = 0.9;
  double eta_min = 1e-6;
  int max_iters = 100;
  double cost_tol = 1e-9;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TraceRow {
  int iter;
  double eta;
  double cost;  // accepted cost after this iteration's decision
};

struct IvaResult {
  DemixingTensor W;
  IfcTensor Y;
  std::vector<TraceRow> trace;
  double final_cost = 0.0;
  int iters = 0;
};

// Random init: i.i.d. standard normal entries, redrawn per matrix until
// |det| > 1e-12, then every row scaled to unit length.
DemixingTensor init_demixing(int N, int K, std::uint64_t seed);

IfcTensor demix(const DemixingTensor& W, const FeatureTensor& X);

// psi[n] = (1/T) sum_t y_n(t) y_n(t)^T where y_n(t) stacks slab values of
// component n. Pass X to also fill the rx grid.
ScvStats scv_covariances(const IfcTensor& Y, const FeatureTensor* X = nullptr);

// phi[k](n,t) = k-th entry of psi[n]^{-1} y_n(t). A ridge of 1e-8 I is added
// when psi[n] is not invertible.
std::vector<Mat> score_phi(const IfcTensor& Y, const ScvStats& stats);

// Unit null vector of W^[k] with row n removed; the Newton update's anchor
// direction. Sign is arbitrary (all uses are sign-invariant).
Vec null_row_vector(const Mat& Wk, int n);

// Stacked gradient of the separation cost w.r.t. row n across slabs
// (k-major blocks of length N): E{phi^[k](y_n) x^[k]} - h / (h^T w).
Vec gradient_wn(int n, const DemixingTensor& W, const FeatureTensor& X, const IfcTensor& Y,
                const ScvStats& stats);

// KN x KN Hessian: block (k1,k2) = {psi[n]^{-1}}_{k1,k2} rx[k1][k2], with
// h h^T / (h^T w)^2 added on diagonal blocks. Requires stats.rx.
Mat hessian_blocks(int n, const DemixingTensor& W, const ScvStats& stats);

// Gaussian-model separation cost: sum_n 0.5 log det psi[n]
// - sum_k log |det W^[k]| (additive constant dropped).
double cost_iva(const DemixingTensor& W, const ScvStats& stats);

// Newton iterations with unit-row renormalization, rollback on cost
// increase (eta <- eta_decay * eta), and component sort by descending
// trace(psi[n]) at the end. X is assumed whitened.
IvaResult run_iva(const FeatureTensor& X, const IvaConfig& cfg);

}  // namespace ivafuse

#endif
