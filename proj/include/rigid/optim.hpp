#pragma once

// Adam with bias correction; state is kept per registered parameter.

#include <vector>

#include "rigid/nn.hpp"

namespace rigid::optim {

struct OptimizerParams {
  Scalar lr = 1e-4;
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.999;
  Scalar eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<nn::Param*> params, OptimizerParams opt = {})
      : params_(std::move(params)), opt_(opt) {
    for (auto* p : params_) {
      m_.push_back(Array::Zero(p->value.size()));
      v_.push_back(Array::Zero(p->value.size()));
    }
  }

  const std::vector<nn::Param*>& params() const { return params_; }

  // Set used by Binder to decide which leaves carry gradients.
  std::unordered_set<const nn::Param*> trainable_set() const {
    std::unordered_set<const nn::Param*> s;
    for (auto* p : params_) s.insert(p);
    return s;
  }

  void step(nn::Binder& bind) {
    ++t_;
    const Scalar bc1 = 1.0 - std::pow(opt_.beta1, t_);
    const Scalar bc2 = 1.0 - std::pow(opt_.beta2, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const Array g = bind.grad(*params_[i]);
      if (!g.isFinite().all())
        throw NumericalError("Adam: non-finite gradient");
      m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
      v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g.square();
      params_[i]->value -=
          opt_.lr * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + opt_.eps);
    }
  }

 private:
  std::vector<nn::Param*> params_;
  OptimizerParams opt_;
  std::vector<Array> m_, v_;
  int t_ = 0;
};

}  // namespace rigid::optim
