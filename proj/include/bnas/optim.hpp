#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "bnas/tensor.hpp"

namespace bnas {

struct LrSchedule {
  float base = 0.1f;
  float floor = 0.f;
  int total_epochs = 1;
};

// Cosine annealing from base to floor over total_epochs. epoch counts from 0;
// epoch == total_epochs is allowed and lands exactly on the floor.
inline float cosine_lr(const LrSchedule& s, int epoch) {
  if (s.total_epochs < 1) throw value_error("cosine_lr: total_epochs must be >= 1");
  if (epoch < 0 || epoch > s.total_epochs)
    throw value_error("cosine_lr: epoch " + std::to_string(epoch) + " outside [0," +
                      std::to_string(s.total_epochs) + "]");
  const double t = static_cast<double>(epoch) / static_cast<double>(s.total_epochs);
  return s.floor + 0.5f * (s.base - s.floor) * static_cast<float>(1.0 + std::cos(M_PI * t));
}

// Classic momentum SGD: v <- momentum*v + (g + wd*p); p <- p - lr*v.
// Velocity buffers start at zero and follow the parameter order given at
// construction, so repeated runs are bit-identical.
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Parameter*> params, float lr, float momentum, float weight_decay)
      : params_(std::move(params)), lr_(lr), momentum_(momentum), wd_(weight_decay) {
    vel_.reserve(params_.size());
    for (const Parameter* p : params_) vel_.emplace_back(static_cast<size_t>(p->numel()), 0.f);
  }

  void set_lr(float lr) { lr_ = lr; }
  float lr() const { return lr_; }

  void step() {
    for (size_t k = 0; k < params_.size(); ++k) {
      Parameter& p = *params_[k];
      auto& pv = p.value.values();
      auto& v = vel_[k];
      for (size_t i = 0; i < v.size(); ++i) {
        v[i] = momentum_ * v[i] + p.grad[i] + wd_ * pv[i];
        pv[i] -= lr_ * v[i];
      }
    }
  }

 private:
  std::vector<Parameter*> params_;
  float lr_, momentum_, wd_;
  std::vector<std::vector<float>> vel_;
};

// Adam with bias correction; weight decay is folded into the gradient
// (coupled, not decoupled). The architecture optimizer uses beta1 = 0.5.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, float lr, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f,
       float weight_decay = 0.f)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Parameter* p : params_) {
      m_.emplace_back(static_cast<size_t>(p->numel()), 0.f);
      v_.emplace_back(static_cast<size_t>(p->numel()), 0.f);
    }
  }

  void set_lr(float lr) { lr_ = lr; }
  float lr() const { return lr_; }
  int64_t steps() const { return t_; }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(static_cast<double>(b1_), static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(static_cast<double>(b2_), static_cast<double>(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
      Parameter& p = *params_[k];
      auto& pv = p.value.values();
      auto& m = m_[k];
      auto& v = v_[k];
      for (size_t i = 0; i < m.size(); ++i) {
        const float g = p.grad[i] + wd_ * pv[i];
        m[i] = b1_ * m[i] + (1.f - b1_) * g;
        v[i] = b2_ * v[i] + (1.f - b2_) * g * g;
        const float mhat = static_cast<float>(m[i] / c1);
        const float vhat = static_cast<float>(v[i] / c2);
        pv[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

 private:
  std::vector<Parameter*> params_;
  float lr_, b1_, b2_, eps_, wd_;
  int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

}  // namespace bnas
