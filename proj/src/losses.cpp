#include "rigid/losses.hpp"

namespace rigid::losses {

PerceptualExtractorWeights PerceptualExtractorWeights::make(std::uint64_t seed) {
  PerceptualExtractorWeights p;
  p.seed = seed;
  Rng rng(derive_seed(seed, "perceptual"));
  const int chans[5] = {3, 16, 24, 32, 48};
  for (int i = 0; i < 4; ++i)
    p.stages.push_back(nn::Conv2d::make(chans[i], chans[i + 1], 3, 2, 1, rng));
  return p;
}

void PerceptualExtractorWeights::visit(const std::string& prefix,
                                       const nn::ParamVisitor& fn) {
  for (std::size_t i = 0; i < stages.size(); ++i)
    stages[i].visit(prefix + ".stage" + std::to_string(i), fn);
}

std::vector<ad::Var> perceptual_features_t(ad::Tape& t, nn::Binder& bind,
                                           const PerceptualExtractorWeights& p,
                                           ad::Var image) {
  std::vector<ad::Var> feats;
  ad::Var x = image;
  for (const auto& stage : p.stages) {
    x = t.leaky_relu(stage(t, bind, x), 0.2);
    feats.push_back(t.channel_unit_normalize(x, 1e-10));
  }
  return feats;
}

ad::Var perceptual_distance_t(ad::Tape& t, nn::Binder& bind,
                              const PerceptualExtractorWeights& p, ad::Var a,
                              ad::Var b) {
  const std::vector<ad::Var> fa = perceptual_features_t(t, bind, p, a);
  const std::vector<ad::Var> fb = perceptual_features_t(t, bind, p, b);
  ad::Var total = t.scalar(0.0);
  for (std::size_t i = 0; i < fa.size(); ++i)
    total = t.add(total, t.mse(fa[i], fb[i]));
  return total;
}

Scalar perceptual_distance(const PerceptualExtractorWeights& p, const Frame& a,
                           const Frame& b) {
  require_shape(a.height() == b.height() && a.width() == b.width(),
                "perceptual_distance: shape mismatch");
  ad::Tape t;
  nn::Binder bind(t);
  return t.value_scalar(perceptual_distance_t(t, bind, p,
                                              t.leaf(a.flat(), a.ad_shape()),
                                              t.leaf(b.flat(), b.ad_shape())));
}

ad::Var reconstruction_loss_t(ad::Tape& t, nn::Binder& bind,
                              const std::vector<ad::Var>& inverted,
                              const std::vector<ad::Var>& target,
                              const PerceptualExtractorWeights& p, Scalar alpha) {
  if (inverted.size() != target.size())
    throw ShapeError("reconstruction_loss: length mismatch");
  if (inverted.empty()) throw ShapeError("reconstruction_loss: empty sequence");
  ad::Var total = t.scalar(0.0);
  for (std::size_t i = 0; i < inverted.size(); ++i) {
    total = t.add(total, t.mse(target[i], inverted[i]));
    if (alpha != 0.0)
      total = t.add(total, t.scale(perceptual_distance_t(t, bind, p, target[i],
                                                         inverted[i]),
                                   alpha));
  }
  return total;
}

Scalar reconstruction_loss(const std::vector<AlignedFrame>& inverted,
                           const std::vector<AlignedFrame>& target,
                           const PerceptualExtractorWeights& p, Scalar alpha) {
  ad::Tape t;
  nn::Binder bind(t);
  std::vector<ad::Var> vi, vt;
  for (const auto& f : inverted) vi.push_back(t.leaf(f.pixels.flat(), f.pixels.ad_shape()));
  for (const auto& f : target) vt.push_back(t.leaf(f.pixels.flat(), f.pixels.ad_shape()));
  return t.value_scalar(reconstruction_loss_t(t, bind, vi, vt, p, alpha));
}

ad::Var temporal_consistency_loss_t(ad::Tape& t, const std::vector<ad::Var>& original,
                                    const std::vector<ad::Var>& inverted,
                                    const std::vector<FlowField>& flows) {
  if (original.size() != inverted.size())
    throw ShapeError("temporal_consistency_loss: length mismatch");
  if (original.size() < 2)
    throw ShapeError("temporal_consistency_loss: needs at least 2 frames");
  if (flows.size() != original.size() - 1)
    throw ShapeError("temporal_consistency_loss: needs T-1 flows");
  ad::Var total = t.scalar(0.0);
  for (std::size_t i = 1; i < original.size(); ++i) {
    const ad::Shape fs = t.shape(original[i - 1]);
    ad::Var fl = t.leaf(flows[i - 1].flat(), ad::Shape::image(2, fs.d1, fs.d2));
    ad::Var wi = t.warp_bilinear(original[i - 1], fl);
    ad::Var wo = t.warp_bilinear(inverted[i - 1], fl);
    total = t.add(total, t.mae(wi, wo));
  }
  return total;
}

Scalar temporal_consistency_loss(const std::vector<Frame>& original,
                                 const std::vector<Frame>& inverted,
                                 const std::vector<FlowField>& flows) {
  ad::Tape t;
  std::vector<ad::Var> vo, vi;
  for (const auto& f : original) vo.push_back(t.leaf(f.flat(), f.ad_shape()));
  for (const auto& f : inverted) vi.push_back(t.leaf(f.flat(), f.ad_shape()));
  return t.value_scalar(temporal_consistency_loss_t(t, vo, vi, flows));
}

Scalar total_loss(Scalar l_rec, Scalar l_tc, Scalar l_ibfcc, const LossWeights& w) {
  return w.lambda1 * l_rec + w.lambda2 * l_tc + w.lambda3 * l_ibfcc;
}

ad::Var total_loss_t(ad::Tape& t, ad::Var l_rec, ad::Var l_tc, ad::Var l_ibfcc,
                     const LossWeights& w) {
  return t.add(t.add(t.scale(l_rec, w.lambda1), t.scale(l_tc, w.lambda2)),
               t.scale(l_ibfcc, w.lambda3));
}

}  // namespace rigid::losses
