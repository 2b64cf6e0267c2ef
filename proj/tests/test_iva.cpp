#include "doctest.h"

#include "iva.hpp"
#include "synth.hpp"

#include <cmath>
#include <random>

using namespace ivafuse;

namespace {

FeatureTensor random_tensor(int N, int K, int T, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  FeatureTensor x;
  for (int k = 0; k < K; ++k) {
    Mat m(N, T);
    for (int i = 0; i < N; ++i)
      for (int t = 0; t < T; ++t) m(i, t) = gauss(rng);
    x.slabs.push_back(std::move(m));
  }
  return x;
}

// Reference cost, written from the definition with explicit loops and plain
// determinants (no shared code with the library path).
double reference_cost(const DemixingTensor& W, const FeatureTensor& X) {
  const int N = X.N(), T = X.T(), K = X.K();
  std::vector<Mat> Y;
  for (int k = 0; k < K; ++k) Y.push_back(W[k] * X.slabs[k]);
  double cost = 0.0;
  for (int n = 0; n < N; ++n) {
    Mat psi = Mat::Zero(K, K);
    for (int t = 0; t < T; ++t) {
      Vec yn(K);
      for (int k = 0; k < K; ++k) yn(k) = Y[k](n, t);
      psi += yn * yn.transpose();
    }
    psi /= static_cast<double>(T);
    cost += 0.5 * std::log(psi.determinant());
  }
  for (int k = 0; k < K; ++k) cost -= std::log(std::abs(W[k].determinant()));
  return cost;
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max(std::abs(a) + std::abs(b), 1e-6);
}

FeatureTensor whitened_mixture(int N, int K, int T, std::uint64_t seed) {
  SynthMixture mix = gen_scv_mixture(N, K, T, seed);
  return whiten(mix.X).first;
}

}  // namespace

TEST_CASE("component covariances match explicit sums") {
  FeatureTensor y;
  Mat y0(2, 2), y1(2, 2);
  y0 << 1, 2, 0, -1;
  y1 << 3, -1, 2, 2;
  y.slabs = {y0, y1};
  ScvStats s = scv_covariances(y);
  REQUIRE(s.psi.size() == 2);
  Mat want0(2, 2);
  want0 << 2.5, 0.5, 0.5, 5.0;  // 0.5 * ((1,3)(1,3)^T + (2,-1)(2,-1)^T)
  CHECK((s.psi[0] - want0).cwiseAbs().maxCoeff() < 1e-12);
  Mat want1(2, 2);
  want1 << 0.5, -1.0, -1.0, 4.0;
  CHECK((s.psi[1] - want1).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(s.rx.empty());
}

TEST_CASE("component covariances flag too few frames") {
  FeatureTensor y;
  y.slabs = {Mat::Ones(2, 1), Mat::Ones(2, 1)};
  CHECK_THROWS_AS(scv_covariances(y), Error);
  try {
    scv_covariances(y);
  } catch (const Error& e) {
    CHECK(e.code() == Err::ShapeMismatch);
  }
}

TEST_CASE("duplicated slabs give singular component covariances") {
  FeatureTensor y = random_tensor(3, 1, 50, 11);
  y.slabs.push_back(2.0 * y.slabs[0]);
  ScvStats s = scv_covariances(y);
  for (int n = 0; n < 3; ++n) {
    double scale = s.psi[n](0, 0);
    CHECK(std::abs(s.psi[n](0, 1) - 2.0 * scale) < 1e-12 * scale);
    CHECK(std::abs(s.psi[n].determinant()) < 1e-10 * scale * scale);
  }
}

TEST_CASE("white components have near-identity covariances") {
  FeatureTensor y = random_tensor(3, 2, 20000, 21);
  ScvStats s = scv_covariances(y);
  for (int n = 0; n < 3; ++n)
    CHECK((s.psi[n] - Mat::Identity(2, 2)).cwiseAbs().maxCoeff() < 0.05);
}

TEST_CASE("input cross-covariance grid is consistent") {
  FeatureTensor x = random_tensor(3, 2, 40, 31);
  FeatureTensor y = random_tensor(3, 2, 40, 32);
  ScvStats s = scv_covariances(y, &x);
  REQUIRE(s.rx.size() == 2);
  for (int k1 = 0; k1 < 2; ++k1)
    for (int k2 = 0; k2 < 2; ++k2) {
      Mat want = x.slabs[k1] * x.slabs[k2].transpose() / 40.0;
      CHECK((s.rx[k1][k2] - want).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((s.rx[k1][k2] - s.rx[k2][k1].transpose()).cwiseAbs().maxCoeff() < 1e-12);
    }

  FeatureTensor bad = random_tensor(3, 2, 39, 33);
  CHECK_THROWS_AS(scv_covariances(y, &bad), Error);
}

TEST_CASE("score equals inverse covariance times stacked component rows") {
  FeatureTensor y = random_tensor(2, 2, 5, 41);
  ScvStats s = scv_covariances(y);
  std::vector<Mat> phi = score_phi(y, s);
  REQUIRE(phi.size() == 2);
  for (int n = 0; n < 2; ++n) {
    const Mat& p = s.psi[n];
    double det = p(0, 0) * p(1, 1) - p(0, 1) * p(1, 0);
    Mat inv(2, 2);
    inv << p(1, 1), -p(0, 1), -p(1, 0), p(0, 0);
    inv /= det;
    for (int t = 0; t < 5; ++t) {
      Vec yn(2);
      yn << y.slabs[0](n, t), y.slabs[1](n, t);
      Vec want = inv * yn;
      CHECK(std::abs(phi[0](n, t) - want(0)) < 1e-12);
      CHECK(std::abs(phi[1](n, t) - want(1)) < 1e-12);
    }
  }
}

TEST_CASE("score stays finite and consistent for singular covariances") {
  FeatureTensor y = random_tensor(2, 1, 30, 51);
  y.slabs.push_back(y.slabs[0]);  // rank-1 psi
  ScvStats s = scv_covariances(y);
  std::vector<Mat> phi = score_phi(y, s);
  for (const Mat& p : phi) CHECK(p.allFinite());

  // The stacked samples lie in the range of psi, so psi * phi must map back
  // onto them whichever (pseudo-)inverse the implementation used.
  for (int n = 0; n < 2; ++n)
    for (int t = 0; t < 30; ++t) {
      Vec yv(2), pv(2);
      yv << y.slabs[0](n, t), y.slabs[1](n, t);
      pv << phi[0](n, t), phi[1](n, t);
      CHECK((s.psi[n] * pv - yv).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("null vector is orthogonal to every other row") {
  Rng rng = make_rng(61);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Mat w(5, 5);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) w(i, j) = gauss(rng);
  for (int n = 0; n < 5; ++n) {
    Vec h = null_row_vector(w, n);
    CHECK(std::abs(h.norm() - 1.0) < 1e-12);
    for (int i = 0; i < 5; ++i) {
      if (i == n) continue;
      CHECK(std::abs(h.dot(w.row(i))) < 1e-10);
    }
    CHECK(std::abs(h.dot(w.row(n))) > 1e-6);
  }
}

TEST_CASE("null vector of a single row is the scalar one") {
  Mat w(1, 1);
  w << -3.0;
  Vec h = null_row_vector(w, 0);
  REQUIRE(h.size() == 1);
  CHECK(h(0) == 1.0);
}

TEST_CASE("null vector rejects dependent remaining rows") {
  Mat w = Mat::Identity(4, 4);
  w.row(1) = w.row(0);  // rows 0 and 1 coincide
  CHECK_THROWS_AS(null_row_vector(w, 2), Error);
  try {
    null_row_vector(w, 3);
  } catch (const Error& e) {
    CHECK(e.code() == Err::DegenerateNullspace);
  }
  // Removing one of the duplicates leaves an independent set.
  Vec h = null_row_vector(w, 0);
  CHECK(std::abs(h.norm() - 1.0) < 1e-12);
}

TEST_CASE("analytic gradient matches finite differences of the cost") {
  const double eps = 1e-6;
  for (int inst = 0; inst < 4; ++inst) {
    const int N = 2 + inst % 3;
    const int K = 2 + inst % 2;
    const int T = 400;
    FeatureTensor x = whitened_mixture(N, K, T, 700 + inst);
    DemixingTensor w = init_demixing(N, K, 800 + inst);
    IfcTensor y = demix(w, x);
    ScvStats stats = scv_covariances(y, &x);
    for (int n = 0; n < N; ++n) {
      Vec g = gradient_wn(n, w, x, y, stats);
      for (int k = 0; k < K; ++k)
        for (int j = 0; j < N; ++j) {
          DemixingTensor wp = w, wm = w;
          wp[k](n, j) += eps;
          wm[k](n, j) -= eps;
          double fd = (reference_cost(wp, x) - reference_cost(wm, x)) / (2.0 * eps);
          CHECK(rel_err(fd, g(k * N + j)) < 1e-5);
        }
    }
  }
}

TEST_CASE("hessian matches finite differences of the gradient at fixed statistics") {
  const double eps = 1e-6;
  for (int inst = 0; inst < 3; ++inst) {
    const int N = 2 + inst;
    const int K = 2;
    const int T = 300;
    FeatureTensor x = whitened_mixture(N, K, T, 900 + inst);
    DemixingTensor w = init_demixing(N, K, 950 + inst);
    IfcTensor y = demix(w, x);
    ScvStats stats = scv_covariances(y, &x);
    for (int n = 0; n < N; ++n) {
      Mat h = hessian_blocks(n, w, stats);
      CHECK((h - h.transpose()).cwiseAbs().maxCoeff() < 1e-10);
      for (int k = 0; k < K; ++k)
        for (int j = 0; j < N; ++j) {
          DemixingTensor wp = w, wm = w;
          wp[k](n, j) += eps;
          wm[k](n, j) -= eps;
          Vec gp = gradient_wn(n, wp, x, demix(wp, x), stats);
          Vec gm = gradient_wn(n, wm, x, demix(wm, x), stats);
          Vec fd = (gp - gm) / (2.0 * eps);
          for (int r = 0; r < K * N; ++r) CHECK(rel_err(fd(r), h(r, k * N + j)) < 1e-4);
        }
    }
  }
}

TEST_CASE("hessian requires the input cross-covariance grid") {
  FeatureTensor x = random_tensor(3, 2, 50, 71);
  DemixingTensor w = init_demixing(3, 2, 72);
  ScvStats stats = scv_covariances(demix(w, x));  // no rx
  CHECK_THROWS_AS(hessian_blocks(0, w, stats), Error);
}

TEST_CASE("cost is invariant to rescaling a single demixing row") {
  FeatureTensor x = whitened_mixture(4, 2, 500, 81);
  DemixingTensor w = init_demixing(4, 2, 82);
  double base = cost_iva(w, scv_covariances(demix(w, x)));
  for (double c : {2.0, 0.3, -1.5}) {
    DemixingTensor ws = w;
    ws[1].row(2) *= c;
    double scaled = cost_iva(ws, scv_covariances(demix(ws, x)));
    CHECK(std::abs(scaled - base) < 1e-9);
  }
}

TEST_CASE("cost is near zero for identity demixing of white data") {
  FeatureTensor x = whiten(random_tensor(3, 2, 5000, 91)).first;
  DemixingTensor w = {Mat::Identity(3, 3), Mat::Identity(3, 3)};
  double cost = cost_iva(w, scv_covariances(demix(w, x)));
  CHECK(std::abs(cost) < 0.01);
}

TEST_CASE("cost agrees with the reference formula on random problems") {
  for (int inst = 0; inst < 3; ++inst) {
    FeatureTensor x = random_tensor(3, 2, 120, 500 + inst);
    DemixingTensor w = init_demixing(3, 2, 510 + inst);
    double lib = cost_iva(w, scv_covariances(demix(w, x)));
    CHECK(rel_err(lib, reference_cost(w, x)) < 1e-10);
  }
}

TEST_CASE("singular demixing matrices are rejected by the cost") {
  FeatureTensor x = random_tensor(3, 1, 50, 101);
  DemixingTensor w = init_demixing(3, 1, 102);
  w[0].row(1) = w[0].row(0);
  CHECK_THROWS_AS(cost_iva(w, scv_covariances(demix(w, x))), Error);
  try {
    cost_iva(w, scv_covariances(demix(w, x)));
  } catch (const Error& e) {
    CHECK(e.code() == Err::SingularDemixing);
  }
}

TEST_CASE("demixing with the true inverse recovers the sources") {
  SynthMixture mix = gen_scv_mixture(4, 2, 300, 111);
  DemixingTensor w;
  for (const Mat& a : mix.A) w.push_back(a.inverse());
  IfcTensor y = demix(w, mix.X);
  for (int k = 0; k < 2; ++k)
    CHECK((y.slabs[k] - mix.S.slabs[k]).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("demixing validates tensor shapes") {
  FeatureTensor x = random_tensor(3, 2, 20, 121);
  DemixingTensor w = init_demixing(3, 1, 122);
  CHECK_THROWS_AS(demix(w, x), Error);
  DemixingTensor w2 = init_demixing(4, 2, 123);
  try {
    demix(w2, x);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == Err::ShapeMismatch);
  }
}

TEST_CASE("random initialization is reproducible and well formed") {
  DemixingTensor a = init_demixing(5, 3, 131);
  DemixingTensor b = init_demixing(5, 3, 131);
  DemixingTensor c = init_demixing(5, 3, 132);
  REQUIRE(a.size() == 3);
  double diff = 0.0;
  for (int k = 0; k < 3; ++k) {
    CHECK((a[k] - b[k]).cwiseAbs().maxCoeff() == 0.0);
    diff = std::max(diff, (a[k] - c[k]).cwiseAbs().maxCoeff());
    CHECK(std::abs(a[k].determinant()) > 1e-12);
    for (int n = 0; n < 5; ++n) CHECK(std::abs(a[k].row(n).norm() - 1.0) < 1e-12);
  }
  CHECK(diff > 1e-3);
  CHECK_THROWS_AS(init_demixing(0, 1, 1), Error);
}

TEST_CASE("configuration validation rejects bad step control") {
  IvaConfig ok;
  CHECK_NOTHROW(ok.validate());
  auto expect_usage = [](IvaConfig cfg) {
    try {
      cfg.validate();
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == Err::Usage);
    }
  };
  IvaConfig c1;
  c1.eta_decay = 1.0;
  expect_usage(c1);
  IvaConfig c2;
  c2.eta_decay = 0.0;
  expect_usage(c2);
  IvaConfig c3;
  c3.eta_min = c3.eta0;
  expect_usage(c3);
  IvaConfig c4;
  c4.eta_min = 0.0;
  expect_usage(c4);
  IvaConfig c5;
  c5.max_iters = 0;
  expect_usage(c5);
  IvaConfig c6;
  c6.cost_tol = -1.0;
  expect_usage(c6);
}

TEST_CASE("newton iterations never raise the traced cost") {
  FeatureTensor x = whitened_mixture(4, 2, 1000, 141);
  IvaConfig cfg;
  cfg.seed = 142;
  IvaResult res = run_iva(x, cfg);
  REQUIRE(!res.trace.empty());
  CHECK(res.iters == static_cast<int>(res.trace.size()));
  CHECK(res.final_cost == res.trace.back().cost);
  double eta_prev = cfg.eta0;
  for (std::size_t i = 0; i < res.trace.size(); ++i) {
    CHECK(res.trace[i].iter == static_cast<int>(i));
    CHECK(res.trace[i].eta <= eta_prev + 1e-15);
    eta_prev = res.trace[i].eta;
    if (i > 0) CHECK(res.trace[i].cost <= res.trace[i - 1].cost + 1e-9);
  }
  for (int k = 0; k < 2; ++k)
    for (int n = 0; n < 4; ++n) CHECK(std::abs(res.W[k].row(n).norm() - 1.0) < 1e-9);
}

TEST_CASE("components come out ordered by descending power") {
  FeatureTensor x = whitened_mixture(5, 2, 800, 151);
  IvaConfig cfg;
  cfg.seed = 152;
  IvaResult res = run_iva(x, cfg);
  ScvStats s = scv_covariances(res.Y);
  for (int n = 0; n + 1 < 5; ++n) CHECK(s.psi[n].trace() >= s.psi[n + 1].trace() - 1e-9);
  // Y is the demixed input, slab for slab.
  for (int k = 0; k < 2; ++k)
    CHECK((res.Y.slabs[k] - res.W[k] * x.slabs[k]).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("repeated runs are bit-identical") {
  FeatureTensor x = whitened_mixture(3, 2, 600, 161);
  IvaConfig cfg;
  cfg.seed = 162;
  IvaResult a = run_iva(x, cfg);
  IvaResult b = run_iva(x, cfg);
  CHECK(a.final_cost == b.final_cost);
  CHECK(a.iters == b.iters);
  REQUIRE(a.trace.size() == b.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    CHECK(a.trace[i].eta == b.trace[i].eta);
    CHECK(a.trace[i].cost == b.trace[i].cost);
  }
  for (int k = 0; k < 2; ++k) CHECK((a.W[k] - b.W[k]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("the demixer separates correlated mixtures to low interference") {
  IvaConfig cfg;
  cfg.max_iters = 500;
  for (std::uint64_t seed : {171, 172, 173}) {
    SynthMixture mix = gen_scv_mixture(4, 2, 2000, seed);
    auto [xw, wt] = whiten(mix.X);
    cfg.seed = child_seed(seed, 1);
    IvaResult res = run_iva(xw, cfg);
    DemixingTensor total;
    for (int k = 0; k < 2; ++k) total.push_back(res.W[k] * wt.P[k]);
    IsiReport rep = joint_isi(total, mix.A);
    CHECK(rep.joint_isi < 0.05);
  }
}
