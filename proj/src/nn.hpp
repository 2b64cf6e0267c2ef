#ifndef IVAFUSE_NN_HPP
#define IVAFUSE_NN_HPP

#include "features.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace ivafuse {

// Feature-dim x frames x channels activation block.
struct Tensor3 {
  int H = 0, T = 0, C = 0;
  std::vector<Mat> ch;  // C matrices, each H x T

  static Tensor3 zeros(int h, int t, int c) {
    Tensor3 x;
    x.H = h;
    x.T = t;
    x.C = c;
    x.ch.assign(c, Mat::Zero(h, t));
    return x;
  }
};

enum class Variant { PCNN_I, PCNN_C, NCNN };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

// Kernel heights are tap counts; conv3's receptive field additionally
// stretches by the dilation D, so its extent is n3 + (D-1)*(n3-1).
struct NetworkSpec {
  Variant variant = Variant::PCNN_I;
  int N = 39, T = 300, K = 2;
  int n1 = 3, n2 = 5, n3 = 3;
  int C1 = 32, C2 = 32, C3 = 64;
  int D = 3;
  int F1 = 512, F2 = 512;
  int n_classes = 2;

  int conv1_h() const { return N - n1 + 1; }
  int conv2_h() const { return conv1_h() - n2 + 1; }
  int conv3_h() const { return conv2_h() - n3 - (D - 1) * (n3 - 1) + 1; }
  int pooled_len() const;
  void validate() const;  // every layer height >= 1, named formulas on error
};

// Full-sized defaults per variant (NCNN uses narrower FC widths).
NetworkSpec default_spec(Variant v, int N, int T, int K, int n_classes, int n1);

struct ShapeRow {
  std::string layer;
  int H, T, C;  // vectors reported as (len, 1, 1)
};

struct ParamView {
  std::string name;
  std::vector<int> dims;
  double* value;
  double* grad;
  double* adam_m;
  double* adam_v;
  std::size_t size;
};

struct StatView {
  std::string name;
  std::vector<int> dims;
  double* value;
  std::size_t size;
};

enum class Mode { Train, TrainFrozenStats, Eval };

// One classifier network with manual backprop. Batch items are K-slab
// feature tensors; PCNN variants route slabs to parallel branches, NCNN
// stacks them as input channels.
class Network {
 public:
  Network(const NetworkSpec& spec, std::uint64_t seed);
  ~Network();
  Network(Network&&) noexcept;
  Network& operator=(Network&&) noexcept;

  const NetworkSpec& spec() const;

  // Logits and softmax probabilities, n_classes x batch. Train modes use
  // batch statistics in the norm layers; Train additionally updates the
  // running stats. Fills the shape log.
  Mat forward(const std::vector<FeatureTensor>& batch, Mode mode, Mat* logits = nullptr);

  // Mean cross entropy; accumulates parameter gradients (call zero_grads
  // first). Uses Mode::Train.
  double loss_and_backward(const std::vector<FeatureTensor>& batch,
                           const std::vector<int>& labels, Mat* probs = nullptr);

  void zero_grads();
  void adam_step(double lr);
  std::uint64_t step() const;

  std::vector<ParamView> params();
  std::vector<StatView> running_stats();
  const std::vector<ShapeRow>& last_shapes() const;

  void save(const std::string& path);
  static Network load(const std::string& path);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Central finite differences over every parameter of a small network on a
// random batch; returns the worst relative error.
double nn_gradcheck(const NetworkSpec& spec, std::uint64_t seed, int batch_size = 3,
                    std::string* worst_name = nullptr);

}  // namespace ivafuse

#endif
