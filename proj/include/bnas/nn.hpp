#pragma once

// Layer modules: thin Parameter-owning wrappers over the primitives, plus
// the candidate-operation factory shared by discrete cells and the supernet.

#include <cmath>
#include <memory>
#include <random>
#include <vector>

#include "bnas/genotype.hpp"
#include "bnas/ops.hpp"

namespace bnas {

inline void he_normal_init(Tensor& w, int64_t fan_in, std::mt19937& rng) {
  std::normal_distribution<float> dist(0.f, std::sqrt(2.f / static_cast<float>(fan_in)));
  for (float& v : w.values()) v = dist(rng);
}

class Conv2d {
 public:
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int padding, int dilation, int groups, std::mt19937& rng)
      : weight(Shape{out_ch, in_ch / groups, kernel, kernel}),
        stride_(stride),
        padding_(padding),
        dilation_(dilation),
        groups_(groups) {
    if (in_ch % groups != 0) throw config_error("conv: in_ch not divisible by groups");
    he_normal_init(weight.value, static_cast<int64_t>(in_ch / groups) * kernel * kernel, rng);
  }

  Tensor forward(Tape& t, const Tensor& x) {
    return conv2d(t, x, t.param(weight), stride_, padding_, dilation_, groups_);
  }
  void collect(std::vector<Parameter*>& out) { out.push_back(&weight); }

  Parameter weight;

 private:
  int stride_, padding_, dilation_, groups_;
};

class BatchNorm2d {
 public:
  explicit BatchNorm2d(int ch)
      : gamma(Shape{1, ch, 1, 1}, 1.f),
        beta(Shape{1, ch, 1, 1}, 0.f),
        running_mean(static_cast<size_t>(ch), 0.f),
        running_var(static_cast<size_t>(ch), 1.f) {}

  Tensor forward(Tape& t, const Tensor& x, bool training) {
    return batch_norm(t, x, t.param(gamma), t.param(beta), running_mean, running_var, training);
  }
  void collect(std::vector<Parameter*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }

  Parameter gamma, beta;
  std::vector<float> running_mean, running_var;
};

class Linear {
 public:
  Linear(int in, int out, std::mt19937& rng) : weight(Shape{out, in, 1, 1}), bias(Shape{1, out, 1, 1}, 0.f) {
    he_normal_init(weight.value, in, rng);
  }

  Tensor forward(Tape& t, const Tensor& x) {
    Tensor w = t.param(weight);
    Tensor b = t.param(bias);
    return linear(t, x, w, &b);
  }
  void collect(std::vector<Parameter*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  Parameter weight, bias;
};

// ReLU -> Conv -> BatchNorm, the standard triple behind every convolution
// kind and every cell input preprocessing.
class ReluConvBn {
 public:
  ReluConvBn(int in_ch, int out_ch, int kernel, int stride, int padding, int dilation, std::mt19937& rng)
      : conv_(in_ch, out_ch, kernel, stride, padding, dilation, 1, rng), bn_(out_ch) {}

  Tensor forward(Tape& t, const Tensor& x, bool training) {
    return bn_.forward(t, conv_.forward(t, relu(t, x)), training);
  }
  void collect(std::vector<Parameter*>& out) {
    conv_.collect(out);
    bn_.collect(out);
  }

 private:
  Conv2d conv_;
  BatchNorm2d bn_;
};

// Stride-2 reduction that keeps both pixel phases: two 1x1 stride-2 convs,
// the second on the input shifted by one pixel, concatenated then normalized.
// Odd output widths give the first path the extra channel.
class FactorizedReduce {
 public:
  FactorizedReduce(int in_ch, int out_ch, std::mt19937& rng)
      : conv1_(in_ch, out_ch - out_ch / 2, 1, 2, 0, 1, 1, rng),
        conv2_(in_ch, out_ch / 2, 1, 2, 0, 1, 1, rng),
        bn_(out_ch),
        two_path_(out_ch >= 2) {
    if (out_ch < 1) throw config_error("factorized reduce: out_ch must be >= 1");
  }

  Tensor forward(Tape& t, const Tensor& x, bool training) {
    Tensor r = relu(t, x);
    if (!two_path_) return bn_.forward(t, conv1_.forward(t, r), training);
    if (x.shape().h < 2 || x.shape().w < 2)
      throw shape_error("factorized reduce: input " + to_string(x.shape()) + " too small to shift");
    Tensor shifted = crop_spatial(t, r, 1, 1);
    Tensor out = concat_channels(t, {conv1_.forward(t, r), conv2_.forward(t, shifted)});
    return bn_.forward(t, out, training);
  }
  void collect(std::vector<Parameter*>& out) {
    conv1_.collect(out);
    if (two_path_) conv2_.collect(out);
    bn_.collect(out);
  }

 private:
  Conv2d conv1_, conv2_;
  BatchNorm2d bn_;
  bool two_path_;
};

// ---- candidate operations ----

class CandidateOp {
 public:
  virtual ~CandidateOp() = default;
  virtual Tensor forward(Tape& t, const Tensor& x, bool training) = 0;
  virtual void collect(std::vector<Parameter*>&) {}
};

class ZeroOp final : public CandidateOp {
 public:
  explicit ZeroOp(int stride) : stride_(stride) {}
  Tensor forward(Tape&, const Tensor& x, bool) override {
    const Shape s = x.shape();
    return Tensor(Shape{s.n, s.c, s.h / stride_, s.w / stride_});
  }

 private:
  int stride_;
};

class IdentityOp final : public CandidateOp {
 public:
  Tensor forward(Tape&, const Tensor& x, bool) override { return x; }
};

class ConvTripleOp final : public CandidateOp {
 public:
  ConvTripleOp(int ch, int kernel, int stride, int padding, int dilation, std::mt19937& rng)
      : triple_(ch, ch, kernel, stride, padding, dilation, rng) {}
  Tensor forward(Tape& t, const Tensor& x, bool training) override { return triple_.forward(t, x, training); }
  void collect(std::vector<Parameter*>& out) override { triple_.collect(out); }

 private:
  ReluConvBn triple_;
};

class ReduceOp final : public CandidateOp {
 public:
  ReduceOp(int ch, std::mt19937& rng) : reduce_(ch, ch, rng) {}
  Tensor forward(Tape& t, const Tensor& x, bool training) override { return reduce_.forward(t, x, training); }
  void collect(std::vector<Parameter*>& out) override { reduce_.collect(out); }

 private:
  FactorizedReduce reduce_;
};

class PoolOp final : public CandidateOp {
 public:
  PoolOp(PoolKind kind, int kernel, int stride, int padding) : kind_(kind), kernel_(kernel), stride_(stride), padding_(padding) {}
  Tensor forward(Tape& t, const Tensor& x, bool) override { return pool2d(t, x, kind_, kernel_, stride_, padding_); }

 private:
  PoolKind kind_;
  int kernel_, stride_, padding_;
};

// Every kind maps ch -> ch channels; spatial size is preserved at stride 1
// and halved at stride 2 (even inputs, enforced by the channel plan).
inline std::unique_ptr<CandidateOp> make_op(OpKind kind, int ch, int stride, std::mt19937& rng) {
  switch (kind) {
    case OpKind::kZero:
      return std::make_unique<ZeroOp>(stride);
    case OpKind::kSkipConnect:
      if (stride == 1) return std::make_unique<IdentityOp>();
      return std::make_unique<ReduceOp>(ch, rng);
    case OpKind::kConv1x1:
      return std::make_unique<ConvTripleOp>(ch, 1, stride, 0, 1, rng);
    case OpKind::kConv3x3:
      return std::make_unique<ConvTripleOp>(ch, 3, stride, 1, 1, rng);
    case OpKind::kDilConv3x3:
      return std::make_unique<ConvTripleOp>(ch, 3, stride, 2, 2, rng);
    case OpKind::kMaxPool3x3:
      return std::make_unique<PoolOp>(PoolKind::kMax, 3, stride, 1);
    case OpKind::kAvgPool3x3:
      return std::make_unique<PoolOp>(PoolKind::kAvg, 3, stride, 1);
  }
  throw value_error("make_op: unhandled op kind");
}

}  // namespace bnas
