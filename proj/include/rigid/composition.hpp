#pragma once

// Visibility network, occlusion-aware in-between frame composition, and
// the in-between frame composition constraint.

#include <functional>
#include <vector>

#include "rigid/flow.hpp"
#include "rigid/image.hpp"
#include "rigid/nn.hpp"
#include "rigid/optim.hpp"

namespace rigid::composition {

struct VisibilityMap {
  Plane values;  // (0,1)
};

struct VisibleNetConfig {
  int base_channels = 16;
  std::uint64_t seed = 1;
};

// U-Net: 5 strided conv encoder stages, 5 transposed-conv decoder stages
// with skip connections, batch normalization and leaky rectifiers between
// stages, sigmoid output. Input is the 6-channel concatenation of the two
// warped neighbours; output is a 1-channel visibility map.
struct VisibleNetWeights {
  VisibleNetConfig cfg;
  std::vector<nn::Conv2d> enc;
  std::vector<nn::BatchNorm> enc_bn;
  std::vector<nn::ConvTranspose2d> dec;
  std::vector<nn::BatchNorm> dec_bn;  // for decoder stages 1..4
  bool frozen = false;
  int input_channels = 6;

  static VisibleNetWeights make(const VisibleNetConfig& cfg);
  void visit(const std::string& prefix, const nn::ParamVisitor& fn);
  void trainable(std::vector<nn::Param*>& out);
};

// warped_prev/warped_next: (3,H,W); returns (1,H,W). `training` selects
// batch statistics and enables running-stat updates.
ad::Var predict_visibility_t(ad::Tape& t, nn::Binder& bind, VisibleNetWeights& w,
                             ad::Var warped_prev, ad::Var warped_next, bool training);
ad::Var predict_visibility_t(ad::Tape& t, nn::Binder& bind,
                             const VisibleNetWeights& w, ad::Var warped_prev,
                             ad::Var warped_next);

VisibilityMap predict_visibility(const VisibleNetWeights& w, const Frame& warped_prev,
                                 const Frame& warped_next);

// visibility ⊙ warped_prev + (1−visibility) ⊙ warped_next
Frame compose_in_between(const Frame& warped_prev, const Frame& warped_next,
                         const VisibilityMap& visibility);
ad::Var compose_in_between_t(ad::Tape& t, ad::Var warped_prev, ad::Var warped_next,
                             ad::Var visibility);

struct Triplet {
  const Frame* prev;
  const Frame* cur;
  const Frame* next;
  const FlowField* flow_to_prev;  // f_{t⇒t-1}
  const FlowField* flow_to_next;  // f_{t⇒t+1}
};

struct VisnetTrainOptions {
  optim::OptimizerParams opt;  // lr defaults to 1e-4
  int iterations = 5000;
  std::uint64_t seed = 1;
  std::function<void(int, Scalar)> on_step;  // iteration, loss
};

// Minimizes mean L1 between the composed in-between frame and the real
// middle frame; freezes the weights when done.
void train_visible_net(VisibleNetWeights& w, const std::vector<Triplet>& triplets,
                       const VisnetTrainOptions& options);

// Σ over interior frames of mean per-element L1 between the edited frame
// and its composed counterpart. The visibility net must be frozen; its
// weights receive no gradient.
Scalar ibfcc_loss(const std::vector<Frame>& edited,
                  const std::vector<FlowField>& flows_prev,
                  const std::vector<FlowField>& flows_next,
                  const VisibleNetWeights& visnet);

// Tape variant for training; edited[i] are (3,H,W) vars, i = 0..T-1.
// Both flow lists have length T-1 and are treated as constants:
//   flows_prev[j] = flow from frame j+1 toward frame j  (warps frame j)
//   flows_next[j] = flow from frame j toward frame j+1  (warps frame j+1)
// so interior frame i uses flows_prev[i-1] and flows_next[i].
ad::Var ibfcc_loss_t(ad::Tape& t, nn::Binder& bind, const std::vector<ad::Var>& edited,
                     const std::vector<FlowField>& flows_prev,
                     const std::vector<FlowField>& flows_next,
                     const VisibleNetWeights& visnet);

}  // namespace rigid::composition
