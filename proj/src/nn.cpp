#include "nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace ivafuse {

namespace {

constexpr double kSeluLambda = 1.0507009873554805;
constexpr double kSeluAlpha = 1.6732632423543772;
constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;
constexpr double kAdamB1 = 0.9;
constexpr double kAdamB2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr std::uint32_t kCkptVersion = 1;

using Batch3 = std::vector<Tensor3>;

double selu_fwd(double x) {
  return x > 0.0 ? kSeluLambda * x : kSeluLambda * kSeluAlpha * (std::exp(x) - 1.0);
}

double selu_deriv(double x) {
  return x > 0.0 ? kSeluLambda : kSeluLambda * kSeluAlpha * std::exp(x);
}

bool train_mode(Mode m) { return m != Mode::Eval; }

struct Conv {
  int taps = 0, dil = 1, cin = 0, cout = 0;
  Mat W, dW, mW, vW;  // cout x (taps*cin)
  Vec b, db, mb, vb;
  Batch3 cache;

  void init(int taps_, int dil_, int cin_, int cout_, Rng& rng) {
    taps = taps_;
    dil = dil_;
    cin = cin_;
    cout = cout_;
    std::normal_distribution<double> gauss(0.0, std::sqrt(1.0 / (taps * cin)));
    W.resize(cout, taps * cin);
    for (int i = 0; i < cout; ++i)
      for (int j = 0; j < taps * cin; ++j) W(i, j) = gauss(rng);
    b = Vec::Zero(cout);
    dW = Mat::Zero(cout, taps * cin);
    db = Vec::Zero(cout);
    mW = dW;
    vW = dW;
    mb = db;
    vb = db;
  }

  int out_h(int H) const { return H - (taps - 1) * dil; }

  Mat im2col(const Tensor3& x) const {
    int ho = out_h(x.H);
    Mat m(taps * cin, ho * x.T);
    for (int j = 0; j < taps; ++j)
      for (int ci = 0; ci < cin; ++ci)
        for (int t = 0; t < x.T; ++t)
          for (int h = 0; h < ho; ++h)
            m(j * cin + ci, t * ho + h) = x.ch[ci](h + j * dil, t);
    return m;
  }

  Batch3 forward(const Batch3& in, bool keep) {
    if (keep) cache = in;
    Batch3 out;
    out.reserve(in.size());
    for (const Tensor3& x : in) {
      if (x.C != cin) fail(Err::ShapeMismatch, "conv channel mismatch");
      int ho = out_h(x.H);
      if (ho < 1) fail(Err::ShapeMismatch, "conv kernel larger than input");
      Mat o = W * im2col(x);
      o.colwise() += b;
      Tensor3 y = Tensor3::zeros(ho, x.T, cout);
      for (int co = 0; co < cout; ++co)
        for (int t = 0; t < x.T; ++t)
          for (int h = 0; h < ho; ++h) y.ch[co](h, t) = o(co, t * ho + h);
      out.push_back(std::move(y));
    }
    return out;
  }

  Batch3 backward(const Batch3& dout) {
    Batch3 din;
    din.reserve(dout.size());
    for (std::size_t i = 0; i < dout.size(); ++i) {
      const Tensor3& x = cache[i];
      const Tensor3& dy = dout[i];
      int ho = dy.H;
      Mat dym(cout, ho * x.T);
      for (int co = 0; co < cout; ++co)
        for (int t = 0; t < x.T; ++t)
          for (int h = 0; h < ho; ++h) dym(co, t * ho + h) = dy.ch[co](h, t);
      Mat m = im2col(x);
      dW += dym * m.transpose();
      db += dym.rowwise().sum();
      Mat dm = W.transpose() * dym;
      Tensor3 dx = Tensor3::zeros(x.H, x.T, cin);
      for (int j = 0; j < taps; ++j)
        for (int ci = 0; ci < cin; ++ci)
          for (int t = 0; t < x.T; ++t)
            for (int h = 0; h < ho; ++h)
              dx.ch[ci](h + j * dil, t) += dm(j * cin + ci, t * ho + h);
      din.push_back(std::move(dx));
    }
    return din;
  }
};

struct Selu3 {
  Batch3 cache;

  Batch3 forward(const Batch3& in, bool keep) {
    if (keep) cache = in;
    Batch3 out = in;
    for (Tensor3& x : out)
      for (Mat& m : x.ch) m = m.unaryExpr([](double v) { return selu_fwd(v); });
    return out;
  }

  Batch3 backward(const Batch3& dout) {
    Batch3 din = dout;
    for (std::size_t i = 0; i < dout.size(); ++i)
      for (int c = 0; c < dout[i].C; ++c)
        din[i].ch[c] = dout[i].ch[c].cwiseProduct(
            cache[i].ch[c].unaryExpr([](double v) { return selu_deriv(v); }));
    return din;
  }
};

struct SeluM {
  Mat cache;

  Mat forward(const Mat& in, bool keep) {
    if (keep) cache = in;
    return in.unaryExpr([](double v) { return selu_fwd(v); });
  }

  Mat backward(const Mat& dout) {
    return dout.cwiseProduct(cache.unaryExpr([](double v) { return selu_deriv(v); }));
  }
};

// Per-channel normalization over (batch, H, T).
struct BN3 {
  int C = 0;
  Vec gamma, beta, dgamma, dbeta, mg, vg, mbt, vbt;
  Vec run_mean, run_var;
  Batch3 xhat;
  Vec invstd;

  void init(int c) {
    C = c;
    gamma = Vec::Ones(C);
    beta = Vec::Zero(C);
    dgamma = Vec::Zero(C);
    dbeta = Vec::Zero(C);
    mg = dgamma;
    vg = dgamma;
    mbt = dbeta;
    vbt = dbeta;
    run_mean = Vec::Zero(C);
    run_var = Vec::Ones(C);
  }

  Batch3 forward(const Batch3& in, Mode mode, bool keep) {
    const int B = static_cast<int>(in.size());
    Vec mean(C), var(C);
    if (!train_mode(mode)) {
      mean = run_mean;
      var = run_var;
    } else {
      if (B < 2) fail(Err::Usage, "batch norm training needs batch >= 2");
      double M = static_cast<double>(B) * in[0].H * in[0].T;
      for (int c = 0; c < C; ++c) {
        double s = 0.0, s2 = 0.0;
        for (const Tensor3& x : in) {
          s += x.ch[c].sum();
          s2 += x.ch[c].squaredNorm();
        }
        mean(c) = s / M;
        var(c) = s2 / M - mean(c) * mean(c);
      }
      if (mode == Mode::Train) {
        run_mean = (1.0 - kBnMomentum) * run_mean + kBnMomentum * mean;
        run_var = (1.0 - kBnMomentum) * run_var + kBnMomentum * var;
      }
    }
    invstd = (var.array() + kBnEps).rsqrt();
    Batch3 out = in;
    if (keep) xhat.assign(in.size(), Tensor3());
    for (std::size_t i = 0; i < in.size(); ++i) {
      Tensor3 xh = in[i];
      for (int c = 0; c < C; ++c)
        xh.ch[c] = ((in[i].ch[c].array() - mean(c)) * invstd(c)).matrix();
      for (int c = 0; c < C; ++c)
        out[i].ch[c] = (gamma(c) * xh.ch[c].array() + beta(c)).matrix();
      if (keep) xhat[i] = std::move(xh);
    }
    return out;
  }

  Batch3 backward(const Batch3& dout) {
    const int B = static_cast<int>(dout.size());
    double M = static_cast<double>(B) * dout[0].H * dout[0].T;
    Batch3 din = dout;
    for (int c = 0; c < C; ++c) {
      double s1 = 0.0, s2 = 0.0;
      for (int i = 0; i < B; ++i) {
        s1 += dout[i].ch[c].sum();
        s2 += dout[i].ch[c].cwiseProduct(xhat[i].ch[c]).sum();
      }
      dbeta(c) += s1;
      dgamma(c) += s2;
      double gi = gamma(c) * invstd(c);
      for (int i = 0; i < B; ++i)
        din[i].ch[c] =
            (gi * (dout[i].ch[c].array() - s1 / M - xhat[i].ch[c].array() * (s2 / M)))
                .matrix();
    }
    return din;
  }
};

// Per-feature normalization over the batch for FC activations (F x B).
struct BN1 {
  int F = 0;
  Vec gamma, beta, dgamma, dbeta, mg, vg, mbt, vbt;
  Vec run_mean, run_var;
  Mat xhat;
  Vec invstd;

  void init(int f) {
    F = f;
    gamma = Vec::Ones(F);
    beta = Vec::Zero(F);
    dgamma = Vec::Zero(F);
    dbeta = Vec::Zero(F);
    mg = dgamma;
    vg = dgamma;
    mbt = dbeta;
    vbt = dbeta;
    run_mean = Vec::Zero(F);
    run_var = Vec::Ones(F);
  }

  Mat forward(const Mat& in, Mode mode, bool keep) {
    const int B = static_cast<int>(in.cols());
    Vec mean(F), var(F);
    if (!train_mode(mode)) {
      mean = run_mean;
      var = run_var;
    } else {
      if (B < 2) fail(Err::Usage, "batch norm training needs batch >= 2");
      mean = in.rowwise().mean();
      var = (in.colwise() - mean).rowwise().squaredNorm() / B;
      if (mode == Mode::Train) {
        run_mean = (1.0 - kBnMomentum) * run_mean + kBnMomentum * mean;
        run_var = (1.0 - kBnMomentum) * run_var + kBnMomentum * var;
      }
    }
    invstd = (var.array() + kBnEps).rsqrt();
    Mat xh = invstd.asDiagonal() * (in.colwise() - mean);
    if (keep) xhat = xh;
    return (gamma.asDiagonal() * xh).colwise() + beta;
  }

  Mat backward(const Mat& dout) {
    const double B = static_cast<double>(dout.cols());
    Vec s1 = dout.rowwise().sum();
    Vec s2 = dout.cwiseProduct(xhat).rowwise().sum();
    dbeta += s1;
    dgamma += s2;
    Mat din = dout;
    din.colwise() -= s1 / B;
    din -= (s2 / B).asDiagonal() * xhat;
    return gamma.cwiseProduct(invstd).asDiagonal() * din;
  }
};

// Mean and variance over t per (h, channel); output stacks all means then
// all variances, channel-major.
struct PoolT {
  Batch3 cache;
  Mat means;  // (H*C) x B

  Mat forward(const Batch3& in, bool keep) {
    const int B = static_cast<int>(in.size());
    const int H = in[0].H, T = in[0].T, C = in[0].C;
    Mat out(2 * H * C, B);
    Mat mu(H * C, B);
    for (int i = 0; i < B; ++i)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h) {
          double m = in[i].ch[c].row(h).mean();
          double v = in[i].ch[c].row(h).squaredNorm() / T - m * m;
          mu(c * H + h, i) = m;
          out(c * H + h, i) = m;
          out(H * C + c * H + h, i) = v;
        }
    if (keep) {
      cache = in;
      means = mu;
    }
    return out;
  }

  Batch3 backward(const Mat& dout) {
    const int B = static_cast<int>(dout.cols());
    const int H = cache[0].H, T = cache[0].T, C = cache[0].C;
    Batch3 din;
    din.reserve(B);
    for (int i = 0; i < B; ++i) {
      Tensor3 dx = Tensor3::zeros(H, T, C);
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h) {
          double dm = dout(c * H + h, i);
          double dv = dout(H * C + c * H + h, i);
          double m = means(c * H + h, i);
          dx.ch[c].row(h) =
              (dm / T + (2.0 / T) * dv * (cache[i].ch[c].row(h).array() - m)).matrix();
        }
      din.push_back(std::move(dx));
    }
    return din;
  }
};

// Mean and variance over (h, t) per channel; output is [means; variances].
struct PoolHT {
  Batch3 cache;
  Mat means;  // C x B

  Mat forward(const Batch3& in, bool keep) {
    const int B = static_cast<int>(in.size());
    const int H = in[0].H, T = in[0].T, C = in[0].C;
    const double M = static_cast<double>(H) * T;
    Mat out(2 * C, B);
    Mat mu(C, B);
    for (int i = 0; i < B; ++i)
      for (int c = 0; c < C; ++c) {
        double m = in[i].ch[c].sum() / M;
        double v = in[i].ch[c].squaredNorm() / M - m * m;
        mu(c, i) = m;
        out(c, i) = m;
        out(C + c, i) = v;
      }
    if (keep) {
      cache = in;
      means = mu;
    }
    return out;
  }

  Batch3 backward(const Mat& dout) {
    const int B = static_cast<int>(dout.cols());
    const int H = cache[0].H, T = cache[0].T, C = cache[0].C;
    const double M = static_cast<double>(H) * T;
    Batch3 din;
    din.reserve(B);
    for (int i = 0; i < B; ++i) {
      Tensor3 dx = Tensor3::zeros(H, T, C);
      for (int c = 0; c < C; ++c) {
        double dm = dout(c, i);
        double dv = dout(C + c, i);
        dx.ch[c] =
            (dm / M + (2.0 / M) * dv * (cache[i].ch[c].array() - means(c, i))).matrix();
      }
      din.push_back(std::move(dx));
    }
    return din;
  }
};

struct FC {
  Mat W, dW, mW, vW;  // out x in
  Vec b, db, mb, vb;
  Mat cache;

  void init(int in, int out, Rng& rng) {
    std::normal_distribution<double> gauss(0.0, std::sqrt(1.0 / in));
    W.resize(out, in);
    for (int i = 0; i < out; ++i)
      for (int j = 0; j < in; ++j) W(i, j) = gauss(rng);
    b = Vec::Zero(out);
    dW = Mat::Zero(out, in);
    db = Vec::Zero(out);
    mW = dW;
    vW = dW;
    mb = db;
    vb = db;
  }

  Mat forward(const Mat& in, bool keep) {
    if (in.rows() != W.cols()) fail(Err::ShapeMismatch, "fc input width mismatch");
    if (keep) cache = in;
    return (W * in).colwise() + b;
  }

  Mat backward(const Mat& dout) {
    dW += dout * cache.transpose();
    db += dout.rowwise().sum();
    return W.transpose() * dout;
  }
};

struct Branch {
  Conv c1;
  Selu3 s1;
  BN3 b1;
  Conv c2;
  Selu3 s2;
  BN3 b2;
};

Batch3 slab_to_batch(const std::vector<FeatureTensor>& batch, int k) {
  Batch3 out;
  out.reserve(batch.size());
  for (const FeatureTensor& x : batch) {
    Tensor3 t;
    t.H = x.N();
    t.T = x.T();
    t.C = 1;
    t.ch.push_back(x.slabs[k]);
    out.push_back(std::move(t));
  }
  return out;
}

Batch3 tensor_to_batch(const std::vector<FeatureTensor>& batch) {
  Batch3 out;
  out.reserve(batch.size());
  for (const FeatureTensor& x : batch) {
    Tensor3 t;
    t.H = x.N();
    t.T = x.T();
    t.C = x.K();
    t.ch = x.slabs;
    out.push_back(std::move(t));
  }
  return out;
}

Batch3 concat_channels(const std::vector<Batch3>& parts) {
  const std::size_t B = parts[0].size();
  Batch3 out;
  out.reserve(B);
  for (std::size_t i = 0; i < B; ++i) {
    Tensor3 t;
    t.H = parts[0][i].H;
    t.T = parts[0][i].T;
    t.C = 0;
    for (const Batch3& p : parts) {
      t.C += p[i].C;
      t.ch.insert(t.ch.end(), p[i].ch.begin(), p[i].ch.end());
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<Batch3> split_channels(const Batch3& joined, int parts, int each) {
  std::vector<Batch3> out(parts);
  for (const Tensor3& t : joined) {
    for (int p = 0; p < parts; ++p) {
      Tensor3 part;
      part.H = t.H;
      part.T = t.T;
      part.C = each;
      part.ch.assign(t.ch.begin() + p * each, t.ch.begin() + (p + 1) * each);
      out[p].push_back(std::move(part));
    }
  }
  return out;
}

Mat softmax_cols(const Mat& logits) {
  Mat p = logits;
  for (int i = 0; i < p.cols(); ++i) {
    Vec c = p.col(i);
    double mx = c.maxCoeff();
    c = (c.array() - mx).exp();
    p.col(i) = c / c.sum();
  }
  return p;
}

void put_u32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (!f) fail(Err::TruncatedFile, path);
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
         std::uint32_t(b[3]) << 24;
}

}  // namespace

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::PCNN_I: return "pcnn-i";
    case Variant::PCNN_C: return "pcnn-c";
    case Variant::NCNN: return "ncnn";
  }
  return "?";
}

Variant variant_from_name(const std::string& name) {
  if (name == "pcnn-i") return Variant::PCNN_I;
  if (name == "pcnn-c") return Variant::PCNN_C;
  if (name == "ncnn") return Variant::NCNN;
  fail(Err::Usage, "unknown variant '" + name + "' (want pcnn-i, pcnn-c or ncnn)");
}

int NetworkSpec::pooled_len() const {
  switch (variant) {
    case Variant::PCNN_I: return 2 * conv3_h() * C3;
    case Variant::PCNN_C: return K * 2 * conv2_h() * C2;
    case Variant::NCNN: return 2 * C3;
  }
  return 0;
}

void NetworkSpec::validate() const {
  if (N < 1 || T < 2 || K < 1) fail(Err::Usage, "need N >= 1, T >= 2, K >= 1");
  if (n_classes < 2) fail(Err::Usage, "need at least 2 classes");
  if (n1 < 1 || C3 < 1 || F1 < 1 || F2 < 1) fail(Err::Usage, "spec fields must be positive");
  if (conv1_h() < 1)
    fail(Err::Usage, "conv1 output height N-n1+1 = " + std::to_string(conv1_h()) + " < 1");
  if (variant == Variant::NCNN) return;
  if (n2 < 1 || n3 < 1 || D < 1 || C1 < 1 || C2 < 1)
    fail(Err::Usage, "spec fields must be positive");
  if (conv2_h() < 1)
    fail(Err::Usage, "conv2 output height N-n1-n2+2 = " + std::to_string(conv2_h()) + " < 1");
  if (variant == Variant::PCNN_I && conv3_h() < 1)
    fail(Err::Usage, "conv3 output height N-n1-n2-n3-(D-1)(n3-1)+3 = " +
                         std::to_string(conv3_h()) + " < 1");
}

NetworkSpec default_spec(Variant v, int N, int T, int K, int n_classes, int n1) {
  NetworkSpec s;
  s.variant = v;
  s.N = N;
  s.T = T;
  s.K = K;
  s.n_classes = n_classes;
  s.n1 = n1;
  if (v == Variant::NCNN) {
    s.C3 = 64;
    s.F1 = 64;
    s.F2 = 64;
  }
  return s;
}

struct Network::Impl {
  NetworkSpec spec;
  std::uint64_t step = 0;
  std::vector<ShapeRow> shapes;

  std::vector<Branch> branches;        // PCNN variants
  Conv conv3;                          // PCNN-I integration conv (dilated)
  Selu3 s3;
  BN3 bn3;
  PoolT pool;                          // PCNN-I
  std::vector<PoolT> branch_pools;     // PCNN-C
  Conv nconv;                          // NCNN stem
  Selu3 nselu;
  PoolHT npool;
  FC fc1;
  SeluM sf1;
  BN1 bnf1;
  FC fc2;
  SeluM sf2;
  BN1 bnf2;
  FC out;

  bool has_bn() const { return spec.variant != Variant::NCNN; }

  void build(std::uint64_t seed) {
    Rng rng = make_rng(child_seed(seed, 0x4e4e));
    if (spec.variant == Variant::NCNN) {
      nconv.init(spec.n1, 1, spec.K, spec.C3, rng);
    } else {
      branches.resize(spec.K);
      for (Branch& br : branches) {
        br.c1.init(spec.n1, 1, 1, spec.C1, rng);
        br.b1.init(spec.C1);
        br.c2.init(spec.n2, 1, spec.C1, spec.C2, rng);
        br.b2.init(spec.C2);
      }
      if (spec.variant == Variant::PCNN_I) {
        conv3.init(spec.n3, spec.D, spec.K * spec.C2, spec.C3, rng);
        bn3.init(spec.C3);
      } else {
        branch_pools.resize(spec.K);
      }
    }
    fc1.init(spec.pooled_len(), spec.F1, rng);
    if (has_bn()) bnf1.init(spec.F1);
    fc2.init(spec.F1, spec.F2, rng);
    if (has_bn()) bnf2.init(spec.F2);
    out.init(spec.F2, spec.n_classes, rng);
  }

  void log_shape(const std::string& name, int H, int T, int C) {
    shapes.push_back({name, H, T, C});
  }

  Mat head(Mat x, Mode mode, bool keep) {
    Mat a = fc1.forward(x, keep);
    log_shape("fc1", static_cast<int>(a.rows()), 1, 1);
    a = sf1.forward(a, keep);
    if (has_bn()) a = bnf1.forward(a, mode, keep);
    Mat b = fc2.forward(a, keep);
    log_shape("fc2", static_cast<int>(b.rows()), 1, 1);
    b = sf2.forward(b, keep);
    if (has_bn()) b = bnf2.forward(b, mode, keep);
    Mat logits = out.forward(b, keep);
    log_shape("output", static_cast<int>(logits.rows()), 1, 1);
    return logits;
  }

  Mat head_backward(const Mat& dlogits) {
    Mat d = out.backward(dlogits);
    if (has_bn()) d = bnf2.backward(d);
    d = sf2.backward(d);
    d = fc2.backward(d);
    if (has_bn()) d = bnf1.backward(d);
    d = sf1.backward(d);
    return fc1.backward(d);
  }

  Mat forward(const std::vector<FeatureTensor>& batch, Mode mode, bool keep) {
    if (batch.empty()) fail(Err::Usage, "empty batch");
    for (const FeatureTensor& x : batch)
      if (x.K() != spec.K || x.N() != spec.N || x.T() != spec.T)
        fail(Err::ShapeMismatch, "batch item does not match the network spec");
    shapes.clear();
    log_shape("input", spec.N, spec.T, spec.K);

    Mat logits;
    if (spec.variant == Variant::NCNN) {
      Batch3 b = nconv.forward(tensor_to_batch(batch), keep);
      log_shape("conv", b[0].H, b[0].T, b[0].C);
      b = nselu.forward(b, keep);
      Mat pooled = npool.forward(b, keep);
      log_shape("pool", static_cast<int>(pooled.rows()), 1, 1);
      logits = head(std::move(pooled), mode, keep);
    } else if (spec.variant == Variant::PCNN_I) {
      std::vector<Batch3> parts;
      for (int k = 0; k < spec.K; ++k) {
        Branch& br = branches[k];
        Batch3 b = br.c1.forward(slab_to_batch(batch, k), keep);
        if (k == 0) log_shape("conv1", b[0].H, b[0].T, b[0].C);
        b = br.b1.forward(br.s1.forward(b, keep), mode, keep);
        b = br.c2.forward(b, keep);
        if (k == 0) log_shape("conv2", b[0].H, b[0].T, b[0].C);
        b = br.b2.forward(br.s2.forward(b, keep), mode, keep);
        parts.push_back(std::move(b));
      }
      Batch3 joined = concat_channels(parts);
      log_shape("concat", joined[0].H, joined[0].T, joined[0].C);
      Batch3 j = conv3.forward(joined, keep);
      log_shape("conv3", j[0].H, j[0].T, j[0].C);
      j = bn3.forward(s3.forward(j, keep), mode, keep);
      Mat pooled = pool.forward(j, keep);
      log_shape("pool", static_cast<int>(pooled.rows()), 1, 1);
      logits = head(std::move(pooled), mode, keep);
    } else {  // PCNN_C
      std::vector<Mat> pooled_parts;
      for (int k = 0; k < spec.K; ++k) {
        Branch& br = branches[k];
        Batch3 b = br.c1.forward(slab_to_batch(batch, k), keep);
        if (k == 0) log_shape("conv1", b[0].H, b[0].T, b[0].C);
        b = br.b1.forward(br.s1.forward(b, keep), mode, keep);
        b = br.c2.forward(b, keep);
        if (k == 0) log_shape("conv2", b[0].H, b[0].T, b[0].C);
        b = br.b2.forward(br.s2.forward(b, keep), mode, keep);
        Mat p = branch_pools[k].forward(b, keep);
        if (k == 0) log_shape("branch_pool", static_cast<int>(p.rows()), 1, 1);
        pooled_parts.push_back(std::move(p));
      }
      int total = 0;
      for (const Mat& p : pooled_parts) total += static_cast<int>(p.rows());
      Mat joined(total, batch.size());
      int at = 0;
      for (const Mat& p : pooled_parts) {
        joined.middleRows(at, p.rows()) = p;
        at += static_cast<int>(p.rows());
      }
      log_shape("concat", total, 1, 1);
      logits = head(std::move(joined), mode, keep);
    }
    return logits;
  }

  void backward(const Mat& dlogits) {
    Mat dpooled = head_backward(dlogits);
    if (spec.variant == Variant::NCNN) {
      Batch3 d = npool.backward(dpooled);
      d = nselu.backward(d);
      nconv.backward(d);
    } else if (spec.variant == Variant::PCNN_I) {
      Batch3 d = pool.backward(dpooled);
      d = s3.backward(bn3.backward(d));
      Batch3 djoined = conv3.backward(d);
      std::vector<Batch3> parts = split_channels(djoined, spec.K, spec.C2);
      for (int k = 0; k < spec.K; ++k) {
        Branch& br = branches[k];
        Batch3 db = br.s2.backward(br.b2.backward(parts[k]));
        db = br.c2.backward(db);
        db = br.s1.backward(br.b1.backward(db));
        br.c1.backward(db);
      }
    } else {
      int each = 2 * spec.conv2_h() * spec.C2;
      for (int k = 0; k < spec.K; ++k) {
        Branch& br = branches[k];
        Batch3 db = branch_pools[k].backward(dpooled.middleRows(k * each, each));
        db = br.s2.backward(br.b2.backward(db));
        db = br.c2.backward(db);
        db = br.s1.backward(br.b1.backward(db));
        br.c1.backward(db);
      }
    }
  }

  void add_mat(std::vector<ParamView>& v, const std::string& name, Mat& p, Mat& g, Mat& m,
               Mat& vv) {
    v.push_back({name,
                 {static_cast<int>(p.rows()), static_cast<int>(p.cols())},
                 p.data(),
                 g.data(),
                 m.data(),
                 vv.data(),
                 static_cast<std::size_t>(p.size())});
  }

  void add_vec(std::vector<ParamView>& v, const std::string& name, Vec& p, Vec& g, Vec& m,
               Vec& vv) {
    v.push_back({name,
                 {static_cast<int>(p.size())},
                 p.data(),
                 g.data(),
                 m.data(),
                 vv.data(),
                 static_cast<std::size_t>(p.size())});
  }

  std::vector<ParamView> params() {
    std::vector<ParamView> v;
    auto conv_views = [&](const std::string& name, Conv& c) {
      add_mat(v, name + ".W", c.W, c.dW, c.mW, c.vW);
      add_vec(v, name + ".b", c.b, c.db, c.mb, c.vb);
    };
    auto bn3_views = [&](const std::string& name, BN3& b) {
      add_vec(v, name + ".gamma", b.gamma, b.dgamma, b.mg, b.vg);
      add_vec(v, name + ".beta", b.beta, b.dbeta, b.mbt, b.vbt);
    };
    auto bn1_views = [&](const std::string& name, BN1& b) {
      add_vec(v, name + ".gamma", b.gamma, b.dgamma, b.mg, b.vg);
      add_vec(v, name + ".beta", b.beta, b.dbeta, b.mbt, b.vbt);
    };
    auto fc_views = [&](const std::string& name, FC& f) {
      add_mat(v, name + ".W", f.W, f.dW, f.mW, f.vW);
      add_vec(v, name + ".b", f.b, f.db, f.mb, f.vb);
    };
    if (spec.variant == Variant::NCNN) {
      conv_views("conv", nconv);
    } else {
      for (int k = 0; k < spec.K; ++k) {
        std::string p = "branch" + std::to_string(k);
        conv_views(p + ".conv1", branches[k].c1);
        bn3_views(p + ".bn1", branches[k].b1);
        conv_views(p + ".conv2", branches[k].c2);
        bn3_views(p + ".bn2", branches[k].b2);
      }
      if (spec.variant == Variant::PCNN_I) {
        conv_views("conv3", conv3);
        bn3_views("bn3", bn3);
      }
    }
    fc_views("fc1", fc1);
    if (has_bn()) bn1_views("bnf1", bnf1);
    fc_views("fc2", fc2);
    if (has_bn()) bn1_views("bnf2", bnf2);
    fc_views("out", out);
    return v;
  }

  std::vector<StatView> running_stats() {
    std::vector<StatView> v;
    auto stat = [&](const std::string& name, Vec& x) {
      v.push_back({name,
                   {static_cast<int>(x.size())},
                   x.data(),
                   static_cast<std::size_t>(x.size())});
    };
    if (spec.variant != Variant::NCNN) {
      for (int k = 0; k < spec.K; ++k) {
        std::string p = "branch" + std::to_string(k);
        stat(p + ".bn1.run_mean", branches[k].b1.run_mean);
        stat(p + ".bn1.run_var", branches[k].b1.run_var);
        stat(p + ".bn2.run_mean", branches[k].b2.run_mean);
        stat(p + ".bn2.run_var", branches[k].b2.run_var);
      }
      if (spec.variant == Variant::PCNN_I) {
        stat("bn3.run_mean", bn3.run_mean);
        stat("bn3.run_var", bn3.run_var);
      }
      stat("bnf1.run_mean", bnf1.run_mean);
      stat("bnf1.run_var", bnf1.run_var);
      stat("bnf2.run_mean", bnf2.run_mean);
      stat("bnf2.run_var", bnf2.run_var);
    }
    return v;
  }
};

Network::Network(const NetworkSpec& spec, std::uint64_t seed) : impl_(new Impl) {
  spec.validate();
  impl_->spec = spec;
  impl_->build(seed);
}

Network::~Network() = default;
Network::Network(Network&&) noexcept = default;
Network& Network::operator=(Network&&) noexcept = default;

const NetworkSpec& Network::spec() const { return impl_->spec; }
std::uint64_t Network::step() const { return impl_->step; }
const std::vector<ShapeRow>& Network::last_shapes() const { return impl_->shapes; }
std::vector<ParamView> Network::params() { return impl_->params(); }
std::vector<StatView> Network::running_stats() { return impl_->running_stats(); }

Mat Network::forward(const std::vector<FeatureTensor>& batch, Mode mode, Mat* logits) {
  Mat lg = impl_->forward(batch, mode, false);
  if (logits != nullptr) *logits = lg;
  return softmax_cols(lg);
}

double Network::loss_and_backward(const std::vector<FeatureTensor>& batch,
                                  const std::vector<int>& labels, Mat* probs_out) {
  if (labels.size() != batch.size()) fail(Err::ShapeMismatch, "labels/batch size differ");
  Mat logits = impl_->forward(batch, Mode::Train, true);
  Mat probs = softmax_cols(logits);
  const double G = static_cast<double>(batch.size());
  double loss = 0.0;
  Mat dlogits = probs;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    int l = labels[i];
    if (l < 0 || l >= impl_->spec.n_classes) fail(Err::Usage, "label out of range");
    loss -= std::log(std::max(probs(l, static_cast<int>(i)), 1e-300));
    dlogits(l, static_cast<int>(i)) -= 1.0;
  }
  loss /= G;
  dlogits /= G;
  impl_->backward(dlogits);
  if (probs_out != nullptr) *probs_out = std::move(probs);
  return loss;
}

void Network::zero_grads() {
  for (ParamView& p : impl_->params()) std::fill(p.grad, p.grad + p.size, 0.0);
}

void Network::adam_step(double lr) {
  ++impl_->step;
  const double t = static_cast<double>(impl_->step);
  const double bc1 = 1.0 - std::pow(kAdamB1, t);
  const double bc2 = 1.0 - std::pow(kAdamB2, t);
  for (ParamView& p : impl_->params()) {
    for (std::size_t i = 0; i < p.size; ++i) {
      double g = p.grad[i];
      p.adam_m[i] = kAdamB1 * p.adam_m[i] + (1.0 - kAdamB1) * g;
      p.adam_v[i] = kAdamB2 * p.adam_v[i] + (1.0 - kAdamB2) * g * g;
      double mhat = p.adam_m[i] / bc1;
      double vhat = p.adam_v[i] / bc2;
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
    }
  }
}

namespace {

void put_tensor(std::ofstream& f, const std::vector<int>& dims, const double* data,
                std::size_t size) {
  put_u32(f, static_cast<std::uint32_t>(dims.size()));
  for (int d : dims) put_u32(f, static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < size; ++i)
    put_u32(f, std::bit_cast<std::uint32_t>(static_cast<float>(data[i])));
}

void get_tensor(std::ifstream& f, const std::string& path, const std::vector<int>& dims,
                double* data, std::size_t size, const std::string& name) {
  std::uint32_t nd = get_u32(f, path);
  if (nd != dims.size()) fail(Err::Io, path + ": rank mismatch for " + name);
  for (int d : dims) {
    std::uint32_t got = get_u32(f, path);
    if (got != static_cast<std::uint32_t>(d))
      fail(Err::Io, path + ": dim mismatch for " + name);
  }
  for (std::size_t i = 0; i < size; ++i)
    data[i] = std::bit_cast<float>(get_u32(f, path));
}

}  // namespace

void Network::save(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(Err::Io, "cannot open " + path + " for write");
  const NetworkSpec& s = impl_->spec;
  f.write("IVFN", 4);
  put_u32(f, kCkptVersion);
  const std::uint32_t fields[] = {
      static_cast<std::uint32_t>(s.variant), static_cast<std::uint32_t>(s.N),
      static_cast<std::uint32_t>(s.T),       static_cast<std::uint32_t>(s.K),
      static_cast<std::uint32_t>(s.n1),      static_cast<std::uint32_t>(s.n2),
      static_cast<std::uint32_t>(s.n3),      static_cast<std::uint32_t>(s.C1),
      static_cast<std::uint32_t>(s.C2),      static_cast<std::uint32_t>(s.C3),
      static_cast<std::uint32_t>(s.D),       static_cast<std::uint32_t>(s.F1),
      static_cast<std::uint32_t>(s.F2),      static_cast<std::uint32_t>(s.n_classes)};
  for (std::uint32_t v : fields) put_u32(f, v);
  put_u32(f, static_cast<std::uint32_t>(impl_->step & 0xffffffffULL));
  put_u32(f, static_cast<std::uint32_t>(impl_->step >> 32));
  for (ParamView& p : impl_->params()) put_tensor(f, p.dims, p.value, p.size);
  for (StatView& st : impl_->running_stats()) put_tensor(f, st.dims, st.value, st.size);
  for (ParamView& p : impl_->params()) put_tensor(f, p.dims, p.adam_m, p.size);
  for (ParamView& p : impl_->params()) put_tensor(f, p.dims, p.adam_v, p.size);
  if (!f) fail(Err::Io, "write failed: " + path);
}

Network Network::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Err::Io, "cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "IVFN", 4) != 0) fail(Err::Io, path + ": bad magic");
  if (get_u32(f, path) != kCkptVersion) fail(Err::Io, path + ": unsupported version");
  NetworkSpec s;
  std::uint32_t variant = get_u32(f, path);
  if (variant > 2) fail(Err::Io, path + ": bad variant");
  s.variant = static_cast<Variant>(variant);
  s.N = static_cast<int>(get_u32(f, path));
  s.T = static_cast<int>(get_u32(f, path));
  s.K = static_cast<int>(get_u32(f, path));
  s.n1 = static_cast<int>(get_u32(f, path));
  s.n2 = static_cast<int>(get_u32(f, path));
  s.n3 = static_cast<int>(get_u32(f, path));
  s.C1 = static_cast<int>(get_u32(f, path));
  s.C2 = static_cast<int>(get_u32(f, path));
  s.C3 = static_cast<int>(get_u32(f, path));
  s.D = static_cast<int>(get_u32(f, path));
  s.F1 = static_cast<int>(get_u32(f, path));
  s.F2 = static_cast<int>(get_u32(f, path));
  s.n_classes = static_cast<int>(get_u32(f, path));
  std::uint64_t lo = get_u32(f, path);
  std::uint64_t hi = get_u32(f, path);

  Network net(s, 0);
  net.impl_->step = lo | (hi << 32);
  for (ParamView& p : net.impl_->params()) get_tensor(f, path, p.dims, p.value, p.size, p.name);
  for (StatView& st : net.impl_->running_stats())
    get_tensor(f, path, st.dims, st.value, st.size, st.name);
  for (ParamView& p : net.impl_->params())
    get_tensor(f, path, p.dims, p.adam_m, p.size, p.name);
  for (ParamView& p : net.impl_->params())
    get_tensor(f, path, p.dims, p.adam_v, p.size, p.name);
  return net;
}

double nn_gradcheck(const NetworkSpec& spec, std::uint64_t seed, int batch_size,
                    std::string* worst_name) {
  Network net(spec, child_seed(seed, 1));
  Rng rng = make_rng(child_seed(seed, 2));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<int> cls(0, spec.n_classes - 1);

  std::vector<FeatureTensor> batch(batch_size);
  std::vector<int> labels(batch_size);
  for (int i = 0; i < batch_size; ++i) {
    for (int k = 0; k < spec.K; ++k) {
      Mat slab(spec.N, spec.T);
      for (int n = 0; n < spec.N; ++n)
        for (int t = 0; t < spec.T; ++t) slab(n, t) = gauss(rng);
      batch[i].slabs.push_back(std::move(slab));
    }
    labels[i] = cls(rng);
  }

  net.zero_grads();
  net.loss_and_backward(batch, labels);

  auto loss_at = [&]() {
    Mat probs = net.forward(batch, Mode::TrainFrozenStats);
    double loss = 0.0;
    for (int i = 0; i < batch_size; ++i)
      loss -= std::log(std::max(probs(labels[i], i), 1e-300));
    return loss / batch_size;
  };

  const double h = 1e-5;
  double worst = 0.0;
  for (ParamView& p : net.params()) {
    for (std::size_t i = 0; i < p.size; ++i) {
      double keep = p.value[i];
      p.value[i] = keep + h;
      double up = loss_at();
      p.value[i] = keep - h;
      double dn = loss_at();
      p.value[i] = keep;
      double fd = (up - dn) / (2.0 * h);
      double an = p.grad[i];
      double rel = std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-6);
      if (rel > worst) {
        worst = rel;
        if (worst_name != nullptr)
          *worst_name = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return worst;
}

}  // namespace ivafuse
