#include "iva.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ivafuse {

namespace {

constexpr double kDetFloor = 1e-12;
constexpr double kRidge = 1e-8;

double log_abs_det(const Mat& m) {
  Eigen::PartialPivLU<Mat> lu(m);
  double acc = 0.0;
  for (int i = 0; i < m.rows(); ++i) {
    double d = std::abs(lu.matrixLU()(i, i));
    if (!(d > 0.0) || !std::isfinite(d)) return -std::numeric_limits<double>::infinity();
    acc += std::log(d);
  }
  return acc;
}

Mat psi_inverse(const Mat& psi) {
  const int K = static_cast<int>(psi.rows());
  Eigen::LDLT<Mat> ldlt(psi);
  if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
    Mat inv = ldlt.solve(Mat::Identity(K, K));
    if (inv.allFinite()) return inv;
  }
  Mat ridged = psi + kRidge * Mat::Identity(K, K);
  Eigen::LDLT<Mat> retry(ridged);
  Mat inv = retry.solve(Mat::Identity(K, K));
  if (retry.info() != Eigen::Success || !inv.allFinite())
    fail(Err::SingularCovariance, "component covariance not invertible even with ridge");
  return inv;
}

}  // namespace

void IvaConfig::validate() const {
  if (!(eta_decay > 0.0 && eta_decay < 1.0)) fail(Err::Usage, "need 0 < eta_decay < 1");
  if (!(eta_min < eta0) || eta_min <= 0.0) fail(Err::Usage, "need 0 < eta_min < eta0");
  if (max_iters < 1) fail(Err::Usage, "max_iters must be >= 1");
  if (cost_tol < 0.0) fail(Err::Usage, "cost_tol must be >= 0");
}

DemixingTensor init_demixing(int N, int K, std::uint64_t seed) {
  if (N < 1 || K < 1) fail(Err::Usage, "need N, K >= 1");
  Rng rng = make_rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  DemixingTensor W;
  W.reserve(K);
  for (int k = 0; k < K; ++k) {
    Mat m(N, N);
    do {
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j) m(i, j) = gauss(rng);
    } while (std::abs(m.determinant()) <= kDetFloor);
    for (int i = 0; i < N; ++i) m.row(i).normalize();
    W.push_back(std::move(m));
  }
  return W;
}

IfcTensor demix(const DemixingTensor& W, const FeatureTensor& X) {
  if (W.size() != X.slabs.size()) fail(Err::ShapeMismatch, "K differs between W and X");
  IfcTensor Y;
  Y.slabs.reserve(W.size());
  for (std::size_t k = 0; k < W.size(); ++k) {
    if (W[k].cols() != X.slabs[k].rows())
      fail(Err::ShapeMismatch, "W/X dims differ in slab " + std::to_string(k));
    Y.slabs.push_back(W[k] * X.slabs[k]);
  }
  return Y;
}

ScvStats scv_covariances(const IfcTensor& Y, const FeatureTensor* X) {
  const int N = Y.N(), T = Y.T(), K = Y.K();
  if (T < K) fail(Err::ShapeMismatch, "need T >= K");
  ScvStats s;
  s.psi.reserve(N);
  for (int n = 0; n < N; ++n) {
    Mat yn(K, T);
    for (int k = 0; k < K; ++k) yn.row(k) = Y.slabs[k].row(n);
    s.psi.push_back(yn * yn.transpose() / static_cast<double>(T));
  }
  if (X != nullptr) {
    if (X->T() != T || X->K() != K) fail(Err::ShapeMismatch, "X/Y shapes differ");
    s.rx.assign(K, std::vector<Mat>(K));
    for (int k1 = 0; k1 < K; ++k1)
      for (int k2 = 0; k2 < K; ++k2)
        s.rx[k1][k2] = X->slabs[k1] * X->slabs[k2].transpose() / static_cast<double>(T);
  }
  return s;
}

std::vector<Mat> score_phi(const IfcTensor& Y, const ScvStats& stats) {
  const int N = Y.N(), T = Y.T(), K = Y.K();
  std::vector<Mat> phi(K, Mat(N, T));
  for (int n = 0; n < N; ++n) {
    Mat inv = psi_inverse(stats.psi[n]);
    Mat yn(K, T);
    for (int k = 0; k < K; ++k) yn.row(k) = Y.slabs[k].row(n);
    Mat pn = inv * yn;
    for (int k = 0; k < K; ++k) phi[k].row(n) = pn.row(k);
  }
  return phi;
}

Vec null_row_vector(const Mat& Wk, int n) {
  const int N = static_cast<int>(Wk.rows());
  if (N == 1) return Vec::Ones(1);
  Mat rest(N - 1, N);
  int r = 0;
  for (int i = 0; i < N; ++i)
    if (i != n) rest.row(r++) = Wk.row(i);
  // h spans the orthogonal complement of the other rows: last column of a
  // full QR of rest^T.
  Eigen::ColPivHouseholderQR<Mat> qr(rest.transpose());
  if (qr.rank() < N - 1)
    fail(Err::DegenerateNullspace,
         "rows other than " + std::to_string(n) + " are linearly dependent");
  Mat Q = qr.householderQ();
  return Q.col(N - 1);
}

Vec gradient_wn(int n, const DemixingTensor& W, const FeatureTensor& X, const IfcTensor& Y,
                const ScvStats& stats) {
  const int N = Y.N(), T = Y.T(), K = Y.K();
  Mat inv = psi_inverse(stats.psi[n]);
  Mat yn(K, T);
  for (int k = 0; k < K; ++k) yn.row(k) = Y.slabs[k].row(n);
  Mat phi_n = inv * yn;  // K x T

  Vec g(K * N);
  for (int k = 0; k < K; ++k) {
    Vec e_term = X.slabs[k] * phi_n.row(k).transpose() / static_cast<double>(T);
    Vec h = null_row_vector(W[k], n);
    double hw = h.dot(W[k].row(n));
    if (hw == 0.0) fail(Err::DegenerateNullspace, "null vector orthogonal to row");
    g.segment(k * N, N) = e_term - h / hw;
  }
  return g;
}

Mat hessian_blocks(int n, const DemixingTensor& W, const ScvStats& stats) {
  if (stats.rx.empty()) fail(Err::Usage, "hessian_blocks needs rx stats");
  const int K = static_cast<int>(W.size());
  const int N = static_cast<int>(W[0].rows());
  Mat inv = psi_inverse(stats.psi[n]);
  Mat H(K * N, K * N);
  for (int k1 = 0; k1 < K; ++k1)
    for (int k2 = 0; k2 < K; ++k2)
      H.block(k1 * N, k2 * N, N, N) = inv(k1, k2) * stats.rx[k1][k2];
  for (int k = 0; k < K; ++k) {
    Vec h = null_row_vector(W[k], n);
    double hw = h.dot(W[k].row(n));
    if (hw == 0.0) fail(Err::DegenerateNullspace, "null vector orthogonal to row");
    H.block(k * N, k * N, N, N) += h * h.transpose() / (hw * hw);
  }
  return H;
}

double cost_iva(const DemixingTensor& W, const ScvStats& stats) {
  double cost = 0.0;
  for (const Mat& psi : stats.psi) {
    Eigen::SelfAdjointEigenSolver<Mat> eig(psi);
    for (int i = 0; i < psi.rows(); ++i)
      cost += 0.5 * std::log(std::max(eig.eigenvalues()(i), 1e-300));
  }
  for (const Mat& m : W) {
    double d = std::abs(m.determinant());
    if (!(d > 1e-300) || !std::isfinite(d))
      fail(Err::SingularDemixing, "demixing matrix determinant underflow");
    cost -= log_abs_det(m);
  }
  return cost;
}

IvaResult run_iva(const FeatureTensor& X, const IvaConfig& cfg) {
  cfg.validate();
  const int N = X.N(), K = X.K();

  DemixingTensor W = init_demixing(N, K, cfg.seed);
  IfcTensor Y = demix(W, X);
  ScvStats stats = scv_covariances(Y, &X);
  // rx never changes; reuse it for every candidate's stats.
  std::vector<std::vector<Mat>> rx = stats.rx;
  double cost = cost_iva(W, stats);
  if (!std::isfinite(cost)) fail(Err::Numeric, "non-finite cost at init");

  IvaResult res;
  double eta = cfg.eta0;
  int iter = 0;
  for (; iter < cfg.max_iters; ++iter) {
    bool accepted = false;
    double cand_cost = cost;
    try {
      DemixingTensor Wc = W;
      for (int n = 0; n < N; ++n) {
        Vec g = gradient_wn(n, Wc, X, Y, stats);
        Mat H = hessian_blocks(n, Wc, stats);
        Eigen::LDLT<Mat> solver(H);
        Vec step = solver.solve(g);
        if (solver.info() != Eigen::Success || !step.allFinite()) {
          Eigen::LDLT<Mat> ridged(H + kRidge * Mat::Identity(K * N, K * N));
          step = ridged.solve(g);
          if (ridged.info() != Eigen::Success || !step.allFinite())
            fail(Err::Numeric, "Newton solve failed");
        }
        for (int k = 0; k < K; ++k) {
          Vec w_new = Wc[k].row(n).transpose() - eta * step.segment(k * N, N);
          double norm = w_new.norm();
          if (!(norm > 0.0) || !std::isfinite(norm)) fail(Err::Numeric, "zero row update");
          Wc[k].row(n) = w_new.transpose() / norm;
        }
      }
      IfcTensor Yc = demix(Wc, X);
      ScvStats sc = scv_covariances(Yc);
      sc.rx = rx;
      cand_cost = cost_iva(Wc, sc);
      if (std::isfinite(cand_cost) && cand_cost <= cost) {
        W = std::move(Wc);
        Y = std::move(Yc);
        stats = std::move(sc);
        accepted = true;
      }
    } catch (const Error&) {
      // candidate unusable: treat like a cost increase and shrink the step
    }

    if (accepted) {
      double improve = cost - cand_cost;
      cost = cand_cost;
      res.trace.push_back({iter, eta, cost});
      if (improve < cfg.cost_tol) {
        ++iter;
        break;
      }
    } else {
      eta *= cfg.eta_decay;
      res.trace.push_back({iter, eta, cost});
      if (eta < cfg.eta_min) {
        ++iter;
        break;
      }
    }
  }

  // Fix the component permutation: order by descending total power.
  std::vector<int> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return stats.psi[a].trace() > stats.psi[b].trace();
  });
  DemixingTensor Ws;
  IfcTensor Ys;
  for (int k = 0; k < K; ++k) {
    Mat wm(N, N);
    Mat ym(N, Y.T());
    for (int n = 0; n < N; ++n) {
      wm.row(n) = W[k].row(order[n]);
      ym.row(n) = Y.slabs[k].row(order[n]);
    }
    Ws.push_back(std::move(wm));
    Ys.slabs.push_back(std::move(ym));
  }

  res.W = std::move(Ws);
  res.Y = std::move(Ys);
  res.final_cost = cost;
  res.iters = iter;
  return res;
}

}  // namespace ivafuse
