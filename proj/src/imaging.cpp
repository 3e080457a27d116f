#include "rigid/imaging.hpp"

#include "rigid/tape.hpp"

namespace rigid::imaging {

AlignedFrame align(const Frame& frame, const AffineTransform& transform,
                   int crop_resolution) {
  if (!transform.invertible())
    throw ShapeError("align: non-invertible transform");
  ad::Tape t;
  ad::Var src = t.leaf(frame.flat(), frame.ad_shape());
  ad::Var out = t.affine_sample(src, transform.m, crop_resolution, crop_resolution,
                                /*zero_outside=*/false);
  AlignedFrame result;
  result.pixels = Frame::from_flat(t.value(out), crop_resolution, crop_resolution);
  result.source_transform = transform;
  return result;
}

Frame unalign(const AlignedFrame& aligned, const AffineTransform& transform,
              Eigen::Index canvas_h, Eigen::Index canvas_w) {
  if (!transform.invertible())
    throw ShapeError("unalign: non-invertible transform");
  ad::Tape t;
  ad::Var src = t.leaf(aligned.pixels.flat(), aligned.pixels.ad_shape());
  ad::Var out = t.affine_sample(src, transform.inverse().m, static_cast<int>(canvas_h),
                                static_cast<int>(canvas_w), /*zero_outside=*/true);
  return Frame::from_flat(t.value(out), canvas_h, canvas_w);
}

Frame blend(const Frame& generated, const Frame& original, const Mask& mask) {
  require_shape(generated.height() == original.height() &&
                    generated.width() == original.width() &&
                    generated.height() == mask.height() &&
                    generated.width() == mask.width(),
                "blend: shape mismatch");
  Frame out(generated.height(), generated.width());
  for (int c = 0; c < 3; ++c)
    out.ch[c] = mask.values * generated.ch[c] + (1.0 - mask.values) * original.ch[c];
  return out;
}

Mask mask_union(const Mask& a, const Mask& b) {
  require_shape(a.height() == b.height() && a.width() == b.width(),
                "mask_union: shape mismatch");
  return Mask(a.values.max(b.values));
}

}  // namespace rigid::imaging
