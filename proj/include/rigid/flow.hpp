#pragma once

// Flow-field representation, backward bilinear warping, forward-backward
// occlusion detection, and a coarse-to-fine block-matching flow estimator.

#include "rigid/image.hpp"

namespace rigid::flow {

// out(p) = bilinear sample of source at p + flow(p), clamp-to-edge.
// warp(X, 0) == X bit-exactly.
Frame warp(const Frame& source, const FlowField& flow);
Plane warp_plane(const Plane& source, const FlowField& flow);

// Forward-backward consistency: pixel p is non-occluded iff
//   |f(p) + b̂(p)|² < tau_rel·(|f(p)|² + |b̂(p)|²) + tau_abs
// where b̂ = warp(backward, forward).
NonOcclusionMask occlusion_mask(const FlowField& forward, const FlowField& backward,
                                Scalar tau_abs = 0.5, Scalar tau_rel = 0.01);

struct EstimatorParams {
  int pyramid_levels = 3;
  int block_size = 8;
  int coarse_search_radius = 4;
  int refine_search_radius = 2;
};

// Returns f_{target⇒source}: for each target pixel p, source content at
// p + f(p) corresponds to p. Deterministic.
FlowField estimate_flow(const Frame& target, const Frame& source,
                        const EstimatorParams& params = {});

}  // namespace rigid::flow
