#pragma once

// Reconstruction loss (pixel MSE + perceptual term), warping-based temporal
// consistency loss, and total loss assembly. All norms are per-element
// means inside the per-frame terms, summed over frames.

#include <vector>

#include "rigid/flow.hpp"
#include "rigid/image.hpp"
#include "rigid/nn.hpp"

namespace rigid::losses {

struct LossWeights {
  Scalar alpha = 0.8;
  Scalar lambda1 = 1.0;
  Scalar lambda2 = 2.0;
  Scalar lambda3 = 5.0;
};

// Fixed-seed conv feature pyramid with per-location channel-unit-normalized
// activations; a perceptual distance without any pretrained backbone.
struct PerceptualExtractorWeights {
  std::vector<nn::Conv2d> stages;
  std::uint64_t seed = 1;

  static PerceptualExtractorWeights make(std::uint64_t seed = 1);
  void visit(const std::string& prefix, const nn::ParamVisitor& fn);
};

// Normalized feature stacks, one var per stage.
std::vector<ad::Var> perceptual_features_t(ad::Tape& t, nn::Binder& bind,
                                           const PerceptualExtractorWeights& p,
                                           ad::Var image);

// Σ over stages of mean squared difference of normalized features.
ad::Var perceptual_distance_t(ad::Tape& t, nn::Binder& bind,
                              const PerceptualExtractorWeights& p, ad::Var a,
                              ad::Var b);
Scalar perceptual_distance(const PerceptualExtractorWeights& p, const Frame& a,
                           const Frame& b);

// Σ_t [ mse(target_t, inverted_t) + alpha · perceptual(target_t, inverted_t) ]
ad::Var reconstruction_loss_t(ad::Tape& t, nn::Binder& bind,
                              const std::vector<ad::Var>& inverted,
                              const std::vector<ad::Var>& target,
                              const PerceptualExtractorWeights& p, Scalar alpha);
Scalar reconstruction_loss(const std::vector<AlignedFrame>& inverted,
                           const std::vector<AlignedFrame>& target,
                           const PerceptualExtractorWeights& p, Scalar alpha);

// Σ_{t=2}^{T} mae( warp(I_{t-1}, f_t), warp(O_{t-1}, f_t) ), where flows[j]
// is the flow from frame j+1 toward frame j (length T-1). Original frames
// and flows are constants; gradients reach only the inverted frames.
ad::Var temporal_consistency_loss_t(ad::Tape& t, const std::vector<ad::Var>& original,
                                    const std::vector<ad::Var>& inverted,
                                    const std::vector<FlowField>& flows);
Scalar temporal_consistency_loss(const std::vector<Frame>& original,
                                 const std::vector<Frame>& inverted,
                                 const std::vector<FlowField>& flows);

// λ1·l_rec + λ2·l_tc + λ3·l_ibfcc
Scalar total_loss(Scalar l_rec, Scalar l_tc, Scalar l_ibfcc, const LossWeights& w);
ad::Var total_loss_t(ad::Tape& t, ad::Var l_rec, ad::Var l_tc, ad::Var l_ibfcc,
                     const LossWeights& w);

}  // namespace rigid::losses
