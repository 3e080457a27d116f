#pragma once

// Image containers, similarity-transform alignment/unalignment, and
// mask-based blending.
//
// All functions are pure; none touch global state.

#include "rigid/image.hpp"

namespace rigid::imaging {

// Pulls an aligned crop out of the full frame: output(p) samples the frame
// at transform·(p,1) with bilinear interpolation, clamp-to-edge.
AlignedFrame align(const Frame& frame, const AffineTransform& transform,
                   int crop_resolution);

// Inverse resampling of align onto a canvas of the given size. Pixels whose
// source location falls outside the crop are zero. Differentiable w.r.t.
// the aligned pixels (tape variant in pipeline code uses the same kernel).
Frame unalign(const AlignedFrame& aligned, const AffineTransform& transform,
              Eigen::Index canvas_h, Eigen::Index canvas_w);

// mask ⊙ generated + (1−mask) ⊙ original, per channel.
Frame blend(const Frame& generated, const Frame& original, const Mask& mask);

// Pointwise maximum; set union on hard masks.
Mask mask_union(const Mask& a, const Mask& b);

}  // namespace rigid::imaging
