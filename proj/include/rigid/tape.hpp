#pragma once

#include <functional>
#include <vector>

#include "rigid/core.hpp"

namespace rigid::ad {

// All tensors are rank-3, row-major, laid out as (d0, d1, d2):
//   images   (channels, height, width)
//   matrices (1, rows, cols)
//   vectors  (1, 1, n)
//   scalars  (1, 1, 1)
struct Shape {
  int d0 = 1, d1 = 1, d2 = 1;

  static Shape image(int c, int h, int w) { return {c, h, w}; }
  static Shape mat(int r, int c) { return {1, r, c}; }
  static Shape vec(int n) { return {1, 1, n}; }
  static Shape scalar() { return {1, 1, 1}; }

  Eigen::Index size() const {
    return static_cast<Eigen::Index>(d0) * d1 * d2;
  }
  bool operator==(const Shape& o) const = default;
  int dim(int axis) const { return axis == 0 ? d0 : (axis == 1 ? d1 : d2); }
};

struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

// Reverse-mode tape. Single-threaded by construction; given identical
// inputs the node order, and therefore every accumulation order, is fixed,
// so results are bit-reproducible.
class Tape {
 public:
  struct Node {
    Array value;
    Array grad;  // allocated lazily on first accumulation
    Shape shape;
    bool requires_grad = false;
    std::function<void(Tape&, int)> backward;  // pulls grad of node idx into parents
  };

  Var leaf(const Array& v, Shape s, bool requires_grad = false);
  Var leaf(Array&& v, Shape s, bool requires_grad = false);
  Var scalar(Scalar v, bool requires_grad = false);

  const Array& value(Var v) const { return nodes_[v.idx].value; }
  Scalar value_scalar(Var v) const { return nodes_[v.idx].value[0]; }
  const Shape& shape(Var v) const { return nodes_[v.idx].shape; }
  bool requires_grad(Var v) const { return nodes_[v.idx].requires_grad; }

  // Gradient of the last backward() root w.r.t. v. Zero array if v was
  // never reached.
  Array grad(Var v) const;

  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

  // --- elementwise ---
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, Scalar s);
  Var add_const(Var a, Scalar s);
  Var neg(Var a) { return scale(a, -1.0); }
  Var square(Var a);
  Var abs(Var a);
  Var leaky_relu(Var a, Scalar slope);
  Var sigmoid(Var a);
  Var tanh(Var a);
  Var rsqrt(Var a, Scalar eps);

  // --- reductions ---
  Var sum(Var a);
  Var mean(Var a);
  Var mse(Var a, Var b);  // mean over elements of squared difference
  Var mae(Var a, Var b);  // mean over elements of absolute difference

  // --- shape ---
  Var reshape(Var a, Shape s);
  Var slice(Var a, int axis, int start, int len);
  Var concat(const std::vector<Var>& parts, int axis);

  // --- linear algebra ---
  Var matmul(Var a, Var b);  // (1,m,n) × (1,n,p) → (1,m,p)

  // --- channel/broadcast helpers (x is (C,H,W)) ---
  Var channel_scale(Var x, Var s);      // s: vec(C)
  Var channel_bias(Var x, Var b);       // b: vec(C)
  Var broadcast_channel(Var n, int c);  // (1,H,W) → (C,H,W)
  Var repeat_each(Var v, int k);        // vec(n) → vec(n*k)
  Var channel_unit_normalize(Var x, Scalar eps);  // per-pixel across channels

  // --- image ops ---
  // w: mat(c_out, c_in*kh*kw), b: vec(c_out)
  Var conv2d(Var x, Var w, Var b, int kh, int kw, int stride, int pad);
  // w: mat(c_in, c_out*kh*kw), b: vec(c_out)
  Var conv_transpose2d(Var x, Var w, Var b, int kh, int kw, int stride, int pad);
  Var upsample2x(Var x);  // nearest neighbour
  Var global_avg_pool(Var x);  // (C,H,W) → vec(C)
  // flow: (2,H,W), channel 0 = dx, channel 1 = dy; clamp-to-edge sampling
  Var warp_bilinear(Var src, Var flow);
  // Samples src at m·(x,y,1) for each output pixel. zero_outside drops
  // samples whose source location leaves the image instead of clamping.
  Var affine_sample(Var src, const Eigen::Matrix<Scalar, 2, 3>& m, int out_h,
                    int out_w, bool zero_outside);
  // Normalization over the spatial extent of each channel (single-sample
  // batch statistics). In eval mode uses the provided running stats.
  Var spatial_batchnorm(Var x, Var gamma, Var beta, const Array& running_mean,
                        const Array& running_var, bool training, Scalar eps,
                        Array* batch_mean_out = nullptr,
                        Array* batch_var_out = nullptr);

 private:
  Var push(Array&& value, Shape s, bool requires_grad,
           std::function<void(Tape&, int)> backward);
  void add_grad(int idx, const Array& g);
  Array& grad_ref(int idx);

  std::vector<Node> nodes_;
};

}  // namespace rigid::ad
