#pragma once

#include <array>

#include "rigid/core.hpp"
#include "rigid/tape.hpp"

namespace rigid {

// RGB image in [-1, 1], planar storage. Row index is y, column index is x.
struct Frame {
  std::array<Plane, 3> ch;

  Frame() = default;
  Frame(Eigen::Index h, Eigen::Index w) {
    for (auto& p : ch) p = Plane::Zero(h, w);
  }
  static Frame constant(Eigen::Index h, Eigen::Index w, Scalar v) {
    Frame f(h, w);
    for (auto& p : f.ch) p.setConstant(v);
    return f;
  }

  Eigen::Index height() const { return ch[0].rows(); }
  Eigen::Index width() const { return ch[0].cols(); }

  // Flat (3, H, W) row-major packing shared with the tape.
  Array flat() const {
    const Eigen::Index hw = height() * width();
    Array out(3 * hw);
    for (int c = 0; c < 3; ++c)
      for (Eigen::Index y = 0; y < height(); ++y)
        for (Eigen::Index x = 0; x < width(); ++x)
          out[c * hw + y * width() + x] = ch[c](y, x);
    return out;
  }
  static Frame from_flat(const Array& a, Eigen::Index h, Eigen::Index w) {
    require_shape(a.size() == 3 * h * w, "Frame::from_flat: size mismatch");
    Frame f(h, w);
    const Eigen::Index hw = h * w;
    for (int c = 0; c < 3; ++c)
      for (Eigen::Index y = 0; y < h; ++y)
        for (Eigen::Index x = 0; x < w; ++x) f.ch[c](y, x) = a[c * hw + y * w + x];
    return f;
  }
  ad::Shape ad_shape() const {
    return ad::Shape::image(3, static_cast<int>(height()), static_cast<int>(width()));
  }
};

// Similarity transform applied to aligned-crop pixel coordinates to obtain
// full-frame sample locations (the crop is pulled from the full frame).
struct AffineTransform {
  Eigen::Matrix<Scalar, 2, 3> m;

  static AffineTransform identity() {
    AffineTransform t;
    t.m << 1, 0, 0, 0, 1, 0;
    return t;
  }
  // scale*R(angle) · p + translation
  static AffineTransform similarity(Scalar scale, Scalar angle, Scalar tx, Scalar ty) {
    AffineTransform t;
    const Scalar c = scale * std::cos(angle), s = scale * std::sin(angle);
    t.m << c, -s, tx, s, c, ty;
    return t;
  }

  Scalar det() const { return m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0); }
  bool invertible() const { return std::abs(det()) > 1e-12; }

  AffineTransform inverse() const {
    if (!invertible())
      throw ShapeError("AffineTransform: non-invertible transform");
    const Scalar d = det();
    AffineTransform inv;
    inv.m(0, 0) = m(1, 1) / d;
    inv.m(0, 1) = -m(0, 1) / d;
    inv.m(1, 0) = -m(1, 0) / d;
    inv.m(1, 1) = m(0, 0) / d;
    inv.m(0, 2) = -(inv.m(0, 0) * m(0, 2) + inv.m(0, 1) * m(1, 2));
    inv.m(1, 2) = -(inv.m(1, 0) * m(0, 2) + inv.m(1, 1) * m(1, 2));
    return inv;
  }

  Eigen::Vector2d apply(Scalar x, Scalar y) const {
    return {m(0, 0) * x + m(0, 1) * y + m(0, 2), m(1, 0) * x + m(1, 1) * y + m(1, 2)};
  }
};

// Aligned face crop at generator resolution.
struct AlignedFrame {
  Frame pixels;
  AffineTransform source_transform = AffineTransform::identity();
};

// Single-channel map in [0,1]; a hard mask contains only {0,1}.
struct Mask {
  Plane values;

  Mask() = default;
  explicit Mask(Plane v) : values(std::move(v)) {}
  Mask(Eigen::Index h, Eigen::Index w) : values(Plane::Zero(h, w)) {}
  static Mask constant(Eigen::Index h, Eigen::Index w, Scalar v) {
    Mask m(h, w);
    m.values.setConstant(v);
    return m;
  }
  Eigen::Index height() const { return values.rows(); }
  Eigen::Index width() const { return values.cols(); }
};

// Pixel-displacement field, channel order (dx, dy). For flow f mapping the
// grid of frame t onto source frame s, warp output at pixel p samples s at
// p + f(p) (backward warping).
struct FlowField {
  Plane dx, dy;

  FlowField() = default;
  FlowField(Eigen::Index h, Eigen::Index w)
      : dx(Plane::Zero(h, w)), dy(Plane::Zero(h, w)) {}
  Eigen::Index height() const { return dx.rows(); }
  Eigen::Index width() const { return dx.cols(); }

  Array flat() const {  // (2, H, W)
    const Eigen::Index hw = height() * width();
    Array out(2 * hw);
    for (Eigen::Index y = 0; y < height(); ++y)
      for (Eigen::Index x = 0; x < width(); ++x) {
        out[y * width() + x] = dx(y, x);
        out[hw + y * width() + x] = dy(y, x);
      }
    return out;
  }
  static FlowField from_flat(const Array& a, Eigen::Index h, Eigen::Index w) {
    require_shape(a.size() == 2 * h * w, "FlowField::from_flat: size mismatch");
    FlowField f(h, w);
    const Eigen::Index hw = h * w;
    for (Eigen::Index y = 0; y < h; ++y)
      for (Eigen::Index x = 0; x < w; ++x) {
        f.dx(y, x) = a[y * w + x];
        f.dy(y, x) = a[hw + y * w + x];
      }
    return f;
  }
};

// Binary map, 1 = non-occluded.
struct NonOcclusionMask {
  Plane values;
  Eigen::Index height() const { return values.rows(); }
  Eigen::Index width() const { return values.cols(); }
};

// Spatial noise map injected into the generator (r×r).
struct NoiseMap {
  Plane values;

  NoiseMap() = default;
  explicit NoiseMap(Plane v) : values(std::move(v)) {}
  NoiseMap(Eigen::Index r) : values(Plane::Zero(r, r)) {}
  Eigen::Index resolution() const { return values.rows(); }

  Array flat() const {
    Array out(values.size());
    for (Eigen::Index y = 0; y < values.rows(); ++y)
      for (Eigen::Index x = 0; x < values.cols(); ++x)
        out[y * values.cols() + x] = values(y, x);
    return out;
  }
  static NoiseMap from_flat(const Array& a, Eigen::Index r) {
    require_shape(a.size() == r * r, "NoiseMap::from_flat: size mismatch");
    NoiseMap n(r);
    for (Eigen::Index y = 0; y < r; ++y)
      for (Eigen::Index x = 0; x < r; ++x) n.values(y, x) = a[y * r + x];
    return n;
  }
};

inline Plane plane_from_flat(const Array& a, Eigen::Index h, Eigen::Index w) {
  require_shape(a.size() == h * w, "plane_from_flat: size mismatch");
  Plane p(h, w);
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x) p(y, x) = a[y * w + x];
  return p;
}

inline Array plane_to_flat(const Plane& p) {
  Array out(p.size());
  for (Eigen::Index y = 0; y < p.rows(); ++y)
    for (Eigen::Index x = 0; x < p.cols(); ++x) out[y * p.cols() + x] = p(y, x);
  return out;
}

}  // namespace rigid
