#include "rigid/tape.hpp"

#include <cmath>
#include <utility>

namespace rigid::ad {

namespace {

using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline int conv_out(int n, int k, int stride, int pad) {
  return (n + 2 * pad - k) / stride + 1;
}

// Gather image patches into a (c*kh*kw) × (ho*wo) matrix; zero padding.
RowMat im2col(const Array& x, int c, int h, int w, int kh, int kw, int stride,
              int pad, int ho, int wo) {
  RowMat cols = RowMat::Zero(static_cast<Eigen::Index>(c) * kh * kw,
                             static_cast<Eigen::Index>(ho) * wo);
  for (int ci = 0; ci < c; ++ci) {
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v) {
        const Eigen::Index row = (static_cast<Eigen::Index>(ci) * kh + u) * kw + v;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + u - pad;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + v - pad;
            if (ix < 0 || ix >= w) continue;
            cols(row, static_cast<Eigen::Index>(oy) * wo + ox) =
                x[(static_cast<Eigen::Index>(ci) * h + iy) * w + ix];
          }
        }
      }
    }
  }
  return cols;
}

// Scatter-add of im2col's gather; accumulates into x.
void col2im(const RowMat& cols, Array& x, int c, int h, int w, int kh, int kw,
            int stride, int pad, int ho, int wo) {
  for (int ci = 0; ci < c; ++ci) {
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v) {
        const Eigen::Index row = (static_cast<Eigen::Index>(ci) * kh + u) * kw + v;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + u - pad;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + v - pad;
            if (ix < 0 || ix >= w) continue;
            x[(static_cast<Eigen::Index>(ci) * h + iy) * w + ix] +=
                cols(row, static_cast<Eigen::Index>(oy) * wo + ox);
          }
        }
      }
    }
  }
}

struct BilinearTap {
  int x0, x1, y0, y1;
  Scalar wx, wy;
  bool inside;   // false only in zero_outside mode
  bool sat_x, sat_y;  // coordinate clamped at the border
};

inline BilinearTap make_tap(Scalar xs, Scalar ys, int h, int w, bool zero_outside) {
  BilinearTap t{};
  t.inside = true;
  if (zero_outside &&
      (xs < 0.0 || xs > static_cast<Scalar>(w - 1) || ys < 0.0 ||
       ys > static_cast<Scalar>(h - 1))) {
    t.inside = false;
    return t;
  }
  t.sat_x = xs <= 0.0 || xs >= static_cast<Scalar>(w - 1);
  t.sat_y = ys <= 0.0 || ys >= static_cast<Scalar>(h - 1);
  const Scalar xc = std::min(std::max(xs, Scalar(0)), static_cast<Scalar>(w - 1));
  const Scalar yc = std::min(std::max(ys, Scalar(0)), static_cast<Scalar>(h - 1));
  t.x0 = static_cast<int>(std::floor(xc));
  t.y0 = static_cast<int>(std::floor(yc));
  if (t.x0 > w - 1) t.x0 = w - 1;
  if (t.y0 > h - 1) t.y0 = h - 1;
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.wx = xc - static_cast<Scalar>(t.x0);
  t.wy = yc - static_cast<Scalar>(t.y0);
  return t;
}

inline Scalar tap_sample(const Array& src, const BilinearTap& t, int c, int h, int w) {
  const Eigen::Index base = static_cast<Eigen::Index>(c) * h * w;
  const Scalar v00 = src[base + static_cast<Eigen::Index>(t.y0) * w + t.x0];
  const Scalar v01 = src[base + static_cast<Eigen::Index>(t.y0) * w + t.x1];
  const Scalar v10 = src[base + static_cast<Eigen::Index>(t.y1) * w + t.x0];
  const Scalar v11 = src[base + static_cast<Eigen::Index>(t.y1) * w + t.x1];
  return (1.0 - t.wy) * ((1.0 - t.wx) * v00 + t.wx * v01) +
         t.wy * ((1.0 - t.wx) * v10 + t.wx * v11);
}

}  // namespace

Var Tape::push(Array&& value, Shape s, bool requires_grad,
               std::function<void(Tape&, int)> backward) {
  Node n;
  n.value = std::move(value);
  n.shape = s;
  n.requires_grad = requires_grad;
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::add_grad(int idx, const Array& g) {
  Array& dst = nodes_[idx].grad;
  if (dst.size() == 0) dst = Array::Zero(nodes_[idx].value.size());
  dst += g;
}

Array& Tape::grad_ref(int idx) {
  Array& dst = nodes_[idx].grad;
  if (dst.size() == 0) dst = Array::Zero(nodes_[idx].value.size());
  return dst;
}

Array Tape::grad(Var v) const {
  const Node& n = nodes_[v.idx];
  if (n.grad.size() == 0) return Array::Zero(n.value.size());
  return n.grad;
}

void Tape::backward(Var root) {
  for (auto& n : nodes_) n.grad.resize(0);
  if (nodes_[root.idx].value.size() != 1)
    throw ShapeError("backward: root must be a scalar");
  grad_ref(root.idx)[0] = 1.0;
  for (int i = root.idx; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
    n.backward(*this, i);
  }
}

Var Tape::leaf(const Array& v, Shape s, bool requires_grad) {
  if (v.size() != s.size()) throw ShapeError("leaf: value size does not match shape");
  Array copy = v;
  return push(std::move(copy), s, requires_grad, nullptr);
}

Var Tape::leaf(Array&& v, Shape s, bool requires_grad) {
  if (v.size() != s.size()) throw ShapeError("leaf: value size does not match shape");
  return push(std::move(v), s, requires_grad, nullptr);
}

Var Tape::scalar(Scalar v, bool requires_grad) {
  Array a(1);
  a[0] = v;
  return push(std::move(a), Shape::scalar(), requires_grad, nullptr);
}

Var Tape::add(Var a, Var b) {
  if (!(shape(a) == shape(b))) throw ShapeError("add: shape mismatch");
  Array out = value(a) + value(b);
  const int ia = a.idx, ib = b.idx;
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(out), shape(a), rg, [ia, ib](Tape& t, int self) {
    const Array& g = t.nodes_[self].grad;
    if (t.nodes_[ia].requires_grad) t.add_grad(ia, g);
    if (t.nodes_[ib].requires_grad) t.add_grad(ib, g);
  });
}

Var Tape::sub(Var a, Var b) {
  if (!(shape(a) == shape(b))) throw ShapeError("sub: shape mismatch");
  Array out = value(a) - value(b);
  const int ia = a.idx, ib = b.idx;
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(out), shape(a), rg, [ia, ib](Tape& t, int self) {
    const Array& g = t.nodes_[self].grad;
    if (t.nodes_[ia].requires_grad) t.add_grad(ia, g);
    if (t.nodes_[ib].requires_grad) t.grad_ref(ib) -= g;
  });
}

Var Tape::mul(Var a, Var b) {
  if (!(shape(a) == shape(b))) throw ShapeError("mul: shape mismatch");
  Array out = value(a) * value(b);
  const int ia = a.idx, ib = b.idx;
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(out), shape(a), rg, [ia, ib](Tape& t, int self) {
    const Array& g = t.nodes_[self].grad;
    if (t.nodes_[ia].requires_grad) t.grad_ref(ia) += g * t.nodes_[ib].value;
    if (t.nodes_[ib].requires_grad) t.grad_ref(ib) += g * t.nodes_[ia].value;
  });
}

Var Tape::scale(Var a, Scalar s) {
  Array out = value(a) * s;
  const int ia = a.idx;
  return push(std::move(out), shape(a), requires_grad(a), [ia, s](Tape& t, int self) {
    t.grad_ref(ia) += t.nodes_[self].grad * s;
  });
}

Var Tape::add_const(Var a, Scalar s) {
  Array out = value(a) + s;
  const int ia = a.idx;
  return push(std::move(out), shape(a), requires_grad(a), [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.nodes_[self].grad;
  });
}

Var Tape::square(Var a) {
  Array out = value(a).square();
  const int ia = a.idx;
  return push(std::move(out), shape(a), requires_grad(a), [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.nodes_[self].grad * 2.0 * t.nodes_[ia].value;
  });
}

Var Tape::abs(Var a) {
  Array out = value(a).abs();
  const int ia = a.idx;
  return push(std::move(out), shape(a), requires_grad(a), [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.nodes_[self].grad * t.nodes_[ia].value.sign();
  });
}

Var Tape::leaky_relu(Var a, Scalar slope) {
  const Array& x = value(a);
  Array out = (x >= 0.0).select(x, x * slope);
  const int ia = a.idx;
  return push(std::move(out), shape(a), requires_grad(a),
              [ia, slope](Tape& t, int self) {
                const Array& x = t.nodes_[ia].value;
                const Array& g = t.nodes_[self].grad;
                t.grad_ref(ia) += (x >= 0.0).select(g, g * slope);
              });
}

Var Tape::sigmoid(Var a) {
  Array out = 1.0 / (1.0 + (-value(a)).exp());
  const int ia = a.idx;
  return push(std::move(out), shape(a), requires_grad(a), [ia](Tape& t, int self) {
    const Array& y = t.nodes_[self].value;
    t.grad_ref(ia) += t.nodes_[self].grad * y * (1.0 - y);
  });
}

Var Tape::tanh(Var a) {
  Array out = value(a).tanh();
  const int ia = a.idx;
  return push(std::move(out), shape(a), requires_grad(a), [ia](Tape& t, int self) {
    const Array& y = t.nodes_[self].value;
    t.grad_ref(ia) += t.nodes_[self].grad * (1.0 - y.square());
  });
}

Var Tape::rsqrt(Var a, Scalar eps) {
  Array out = (value(a) + eps).rsqrt();
  const int ia = a.idx;
  return push(std::move(out), shape(a), requires_grad(a), [ia, eps](Tape& t, int self) {
    const Array& x = t.nodes_[ia].value;
    t.grad_ref(ia) += t.nodes_[self].grad * (-0.5) * (x + eps).pow(-1.5);
  });
}

Var Tape::sum(Var a) {
  Array out(1);
  out[0] = value(a).sum();
  const int ia = a.idx;
  return push(std::move(out), Shape::scalar(), requires_grad(a), [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.nodes_[self].grad[0];
  });
}

Var Tape::mean(Var a) {
  const Scalar n = static_cast<Scalar>(value(a).size());
  Array out(1);
  out[0] = value(a).sum() / n;
  const int ia = a.idx;
  return push(std::move(out), Shape::scalar(), requires_grad(a), [ia, n](Tape& t, int self) {
    t.grad_ref(ia) += t.nodes_[self].grad[0] / n;
  });
}

Var Tape::mse(Var a, Var b) {
  if (!(shape(a) == shape(b))) throw ShapeError("mse: shape mismatch");
  const Scalar n = static_cast<Scalar>(value(a).size());
  Array out(1);
  out[0] = (value(a) - value(b)).square().sum() / n;
  const int ia = a.idx, ib = b.idx;
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(out), Shape::scalar(), rg, [ia, ib, n](Tape& t, int self) {
    const Scalar g = t.nodes_[self].grad[0];
    const Array d = (t.nodes_[ia].value - t.nodes_[ib].value) * (2.0 * g / n);
    if (t.nodes_[ia].requires_grad) t.grad_ref(ia) += d;
    if (t.nodes_[ib].requires_grad) t.grad_ref(ib) -= d;
  });
}

Var Tape::mae(Var a, Var b) {
  if (!(shape(a) == shape(b))) throw ShapeError("mae: shape mismatch");
  const Scalar n = static_cast<Scalar>(value(a).size());
  Array out(1);
  out[0] = (value(a) - value(b)).abs().sum() / n;
  const int ia = a.idx, ib = b.idx;
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(out), Shape::scalar(), rg, [ia, ib, n](Tape& t, int self) {
    const Scalar g = t.nodes_[self].grad[0];
    const Array d = (t.nodes_[ia].value - t.nodes_[ib].value).sign() * (g / n);
    if (t.nodes_[ia].requires_grad) t.grad_ref(ia) += d;
    if (t.nodes_[ib].requires_grad) t.grad_ref(ib) -= d;
  });
}

Var Tape::reshape(Var a, Shape s) {
  if (s.size() != value(a).size()) throw ShapeError("reshape: size mismatch");
  Array out = value(a);
  const int ia = a.idx;
  return push(std::move(out), s, requires_grad(a), [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.nodes_[self].grad;
  });
}

Var Tape::slice(Var a, int axis, int start, int len) {
  const Shape in = shape(a);
  if (axis < 0 || axis > 2 || start < 0 || len <= 0 || start + len > in.dim(axis))
    throw ShapeError("slice: range out of bounds");
  Shape out_shape = in;
  (axis == 0 ? out_shape.d0 : axis == 1 ? out_shape.d1 : out_shape.d2) = len;
  Array out(out_shape.size());
  const Array& x = value(a);
  Eigen::Index o = 0;
  for (int i0 = 0; i0 < out_shape.d0; ++i0)
    for (int i1 = 0; i1 < out_shape.d1; ++i1)
      for (int i2 = 0; i2 < out_shape.d2; ++i2) {
        const int s0 = i0 + (axis == 0 ? start : 0);
        const int s1 = i1 + (axis == 1 ? start : 0);
        const int s2 = i2 + (axis == 2 ? start : 0);
        out[o++] = x[(static_cast<Eigen::Index>(s0) * in.d1 + s1) * in.d2 + s2];
      }
  const int ia = a.idx;
  return push(std::move(out), out_shape, requires_grad(a),
              [ia, axis, start, in, out_shape](Tape& t, int self) {
                Array& gx = t.grad_ref(ia);
                const Array& g = t.nodes_[self].grad;
                Eigen::Index o = 0;
                for (int i0 = 0; i0 < out_shape.d0; ++i0)
                  for (int i1 = 0; i1 < out_shape.d1; ++i1)
                    for (int i2 = 0; i2 < out_shape.d2; ++i2) {
                      const int s0 = i0 + (axis == 0 ? start : 0);
                      const int s1 = i1 + (axis == 1 ? start : 0);
                      const int s2 = i2 + (axis == 2 ? start : 0);
                      gx[(static_cast<Eigen::Index>(s0) * in.d1 + s1) * in.d2 + s2] +=
                          g[o++];
                    }
              });
}

Var Tape::concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: empty input");
  Shape out_shape = shape(parts[0]);
  int total = out_shape.dim(axis);
  bool rg = requires_grad(parts[0]);
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const Shape s = shape(parts[i]);
    for (int ax = 0; ax < 3; ++ax)
      if (ax != axis && s.dim(ax) != out_shape.dim(ax))
        throw ShapeError("concat: shape mismatch");
    total += s.dim(axis);
    rg = rg || requires_grad(parts[i]);
  }
  (axis == 0 ? out_shape.d0 : axis == 1 ? out_shape.d1 : out_shape.d2) = total;

  Array out(out_shape.size());
  std::vector<int> idxs;
  std::vector<Shape> shapes;
  int offset = 0;
  std::vector<int> offsets;
  for (Var p : parts) {
    idxs.push_back(p.idx);
    shapes.push_back(shape(p));
    offsets.push_back(offset);
    const Shape ps = shape(p);
    const Array& x = value(p);
    Eigen::Index o = 0;
    for (int i0 = 0; i0 < ps.d0; ++i0)
      for (int i1 = 0; i1 < ps.d1; ++i1)
        for (int i2 = 0; i2 < ps.d2; ++i2) {
          const int d0 = i0 + (axis == 0 ? offset : 0);
          const int d1 = i1 + (axis == 1 ? offset : 0);
          const int d2 = i2 + (axis == 2 ? offset : 0);
          out[(static_cast<Eigen::Index>(d0) * out_shape.d1 + d1) * out_shape.d2 + d2] =
              x[o++];
        }
    offset += ps.dim(axis);
  }
  return push(std::move(out), out_shape, rg,
              [idxs, shapes, offsets, axis, out_shape](Tape& t, int self) {
                const Array& g = t.nodes_[self].grad;
                for (std::size_t p = 0; p < idxs.size(); ++p) {
                  if (!t.nodes_[idxs[p]].requires_grad) continue;
                  Array& gx = t.grad_ref(idxs[p]);
                  const Shape ps = shapes[p];
                  const int off = offsets[p];
                  Eigen::Index o = 0;
                  for (int i0 = 0; i0 < ps.d0; ++i0)
                    for (int i1 = 0; i1 < ps.d1; ++i1)
                      for (int i2 = 0; i2 < ps.d2; ++i2) {
                        const int d0 = i0 + (axis == 0 ? off : 0);
                        const int d1 = i1 + (axis == 1 ? off : 0);
                        const int d2 = i2 + (axis == 2 ? off : 0);
                        gx[o++] += g[(static_cast<Eigen::Index>(d0) * out_shape.d1 + d1) *
                                         out_shape.d2 +
                                     d2];
                      }
                }
              });
}

Var Tape::matmul(Var a, Var b) {
  const Shape sa = shape(a), sb = shape(b);
  if (sa.d0 != 1 || sb.d0 != 1 || sa.d2 != sb.d1)
    throw ShapeError("matmul: incompatible shapes");
  const int m = sa.d1, n = sa.d2, p = sb.d2;
  Array out(static_cast<Eigen::Index>(m) * p);
  CMapMat ma(value(a).data(), m, n);
  CMapMat mb(value(b).data(), n, p);
  MapMat(out.data(), m, p).noalias() = ma * mb;
  const int ia = a.idx, ib = b.idx;
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(out), Shape::mat(m, p), rg, [ia, ib, m, n, p](Tape& t, int self) {
    CMapMat g(t.nodes_[self].grad.data(), m, p);
    if (t.nodes_[ia].requires_grad) {
      CMapMat mb(t.nodes_[ib].value.data(), n, p);
      MapMat(t.grad_ref(ia).data(), m, n).noalias() += g * mb.transpose();
    }
    if (t.nodes_[ib].requires_grad) {
      CMapMat ma(t.nodes_[ia].value.data(), m, n);
      MapMat(t.grad_ref(ib).data(), n, p).noalias() += ma.transpose() * g;
    }
  });
}

Var Tape::channel_scale(Var x, Var s) {
  const Shape sx = shape(x);
  if (shape(s).size() != sx.d0) throw ShapeError("channel_scale: scale size != channels");
  const Eigen::Index hw = static_cast<Eigen::Index>(sx.d1) * sx.d2;
  Array out(sx.size());
  for (int c = 0; c < sx.d0; ++c)
    out.segment(c * hw, hw) = value(x).segment(c * hw, hw) * value(s)[c];
  const int ix = x.idx, is = s.idx;
  const bool rg = requires_grad(x) || requires_grad(s);
  return push(std::move(out), sx, rg, [ix, is, sx, hw](Tape& t, int self) {
    const Array& g = t.nodes_[self].grad;
    if (t.nodes_[ix].requires_grad) {
      Array& gx = t.grad_ref(ix);
      for (int c = 0; c < sx.d0; ++c)
        gx.segment(c * hw, hw) += g.segment(c * hw, hw) * t.nodes_[is].value[c];
    }
    if (t.nodes_[is].requires_grad) {
      Array& gs = t.grad_ref(is);
      for (int c = 0; c < sx.d0; ++c)
        gs[c] += (g.segment(c * hw, hw) * t.nodes_[ix].value.segment(c * hw, hw)).sum();
    }
  });
}

Var Tape::channel_bias(Var x, Var b) {
  const Shape sx = shape(x);
  if (shape(b).size() != sx.d0) throw ShapeError("channel_bias: bias size != channels");
  const Eigen::Index hw = static_cast<Eigen::Index>(sx.d1) * sx.d2;
  Array out(sx.size());
  for (int c = 0; c < sx.d0; ++c)
    out.segment(c * hw, hw) = value(x).segment(c * hw, hw) + value(b)[c];
  const int ix = x.idx, ib = b.idx;
  const bool rg = requires_grad(x) || requires_grad(b);
  return push(std::move(out), sx, rg, [ix, ib, sx, hw](Tape& t, int self) {
    const Array& g = t.nodes_[self].grad;
    if (t.nodes_[ix].requires_grad) t.add_grad(ix, g);
    if (t.nodes_[ib].requires_grad) {
      Array& gb = t.grad_ref(ib);
      for (int c = 0; c < sx.d0; ++c) gb[c] += g.segment(c * hw, hw).sum();
    }
  });
}

Var Tape::broadcast_channel(Var n, int c) {
  const Shape sn = shape(n);
  if (sn.d0 != 1) throw ShapeError("broadcast_channel: input must have one channel");
  const Eigen::Index hw = static_cast<Eigen::Index>(sn.d1) * sn.d2;
  Array out(hw * c);
  for (int k = 0; k < c; ++k) out.segment(k * hw, hw) = value(n);
  const int in = n.idx;
  return push(std::move(out), Shape::image(c, sn.d1, sn.d2), requires_grad(n),
              [in, c, hw](Tape& t, int self) {
                Array& gn = t.grad_ref(in);
                const Array& g = t.nodes_[self].grad;
                for (int k = 0; k < c; ++k) gn += g.segment(k * hw, hw);
              });
}

Var Tape::repeat_each(Var v, int k) {
  const Eigen::Index n = value(v).size();
  Array out(n * k);
  for (Eigen::Index i = 0; i < n; ++i) out.segment(i * k, k).setConstant(value(v)[i]);
  const int iv = v.idx;
  return push(std::move(out), Shape::vec(static_cast<int>(n * k)), requires_grad(v),
              [iv, n, k](Tape& t, int self) {
                Array& gv = t.grad_ref(iv);
                const Array& g = t.nodes_[self].grad;
                for (Eigen::Index i = 0; i < n; ++i) gv[i] += g.segment(i * k, k).sum();
              });
}

Var Tape::channel_unit_normalize(Var x, Scalar eps) {
  const Shape sx = shape(x);
  const Eigen::Index hw = static_cast<Eigen::Index>(sx.d1) * sx.d2;
  const int c = sx.d0;
  Array norms(hw);
  norms.setZero();
  const Array& v = value(x);
  for (int ci = 0; ci < c; ++ci) norms += v.segment(ci * hw, hw).square();
  norms = (norms + eps).sqrt();
  Array out(sx.size());
  for (int ci = 0; ci < c; ++ci) out.segment(ci * hw, hw) = v.segment(ci * hw, hw) / norms;
  const int ix = x.idx;
  return push(std::move(out), sx, requires_grad(x), [ix, c, hw, eps](Tape& t, int self) {
    const Array& v = t.nodes_[ix].value;
    const Array& y = t.nodes_[self].value;
    const Array& g = t.nodes_[self].grad;
    Array norms(hw);
    norms.setZero();
    for (int ci = 0; ci < c; ++ci) norms += v.segment(ci * hw, hw).square();
    norms = (norms + eps).sqrt();
    Array dot(hw);
    dot.setZero();
    for (int ci = 0; ci < c; ++ci)
      dot += g.segment(ci * hw, hw) * y.segment(ci * hw, hw);
    Array& gx = t.grad_ref(ix);
    for (int ci = 0; ci < c; ++ci)
      gx.segment(ci * hw, hw) +=
          (g.segment(ci * hw, hw) - y.segment(ci * hw, hw) * dot) / norms;
  });
}

Var Tape::conv2d(Var x, Var w, Var b, int kh, int kw, int stride, int pad) {
  const Shape sx = shape(x), sw = shape(w);
  const int c_in = sx.d0, h = sx.d1, wd = sx.d2;
  const int c_out = sw.d1;
  if (sw.d2 != c_in * kh * kw) throw ShapeError("conv2d: weight shape mismatch");
  if (shape(b).size() != c_out) throw ShapeError("conv2d: bias size mismatch");
  const int ho = conv_out(h, kh, stride, pad), wo = conv_out(wd, kw, stride, pad);
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: output would be empty");

  RowMat cols = im2col(value(x), c_in, h, wd, kh, kw, stride, pad, ho, wo);
  Array out(static_cast<Eigen::Index>(c_out) * ho * wo);
  CMapMat wm(value(w).data(), c_out, sw.d2);
  MapMat om(out.data(), c_out, static_cast<Eigen::Index>(ho) * wo);
  om.noalias() = wm * cols;
  for (int co = 0; co < c_out; ++co) om.row(co).array() += value(b)[co];

  const int ix = x.idx, iw = w.idx, ib = b.idx;
  const bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
  return push(std::move(out), Shape::image(c_out, ho, wo), rg,
              [ix, iw, ib, kh, kw, stride, pad, c_in, h, wd, c_out, ho,
               wo](Tape& t, int self) {
                const int ckk = c_in * kh * kw;
                CMapMat g(t.nodes_[self].grad.data(), c_out,
                          static_cast<Eigen::Index>(ho) * wo);
                // cols are cheap to rebuild relative to holding them per node
                const bool need_w = t.nodes_[iw].requires_grad;
                const bool need_x = t.nodes_[ix].requires_grad;
                if (need_w) {
                  RowMat cols = im2col(t.nodes_[ix].value, c_in, h, wd, kh, kw,
                                       stride, pad, ho, wo);
                  MapMat(t.grad_ref(iw).data(), c_out, ckk).noalias() +=
                      g * cols.transpose();
                }
                if (t.nodes_[ib].requires_grad) {
                  Array& gb = t.grad_ref(ib);
                  for (int co = 0; co < c_out; ++co) gb[co] += g.row(co).sum();
                }
                if (need_x) {
                  CMapMat wm(t.nodes_[iw].value.data(), c_out, ckk);
                  RowMat dcols = wm.transpose() * g;
                  col2im(dcols, t.grad_ref(ix), c_in, h, wd, kh, kw, stride, pad,
                         ho, wo);
                }
              });
}

Var Tape::conv_transpose2d(Var x, Var w, Var b, int kh, int kw, int stride, int pad) {
  const Shape sx = shape(x), sw = shape(w);
  const int c_in = sx.d0, h = sx.d1, wd = sx.d2;
  if (sw.d1 != c_in || sw.d2 % (kh * kw) != 0)
    throw ShapeError("conv_transpose2d: weight shape mismatch");
  const int c_out = sw.d2 / (kh * kw);
  if (shape(b).size() != c_out) throw ShapeError("conv_transpose2d: bias size mismatch");
  const int ho = (h - 1) * stride - 2 * pad + kh;
  const int wo = (wd - 1) * stride - 2 * pad + kw;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv_transpose2d: output would be empty");

  // Forward is the data-gradient of conv2d with the roles of x and y swapped.
  CMapMat wm(value(w).data(), c_in, sw.d2);
  CMapMat xm(value(x).data(), c_in, static_cast<Eigen::Index>(h) * wd);
  RowMat cols = wm.transpose() * xm;  // (c_out*kh*kw) × (h*wd)
  Array out = Array::Zero(static_cast<Eigen::Index>(c_out) * ho * wo);
  col2im(cols, out, c_out, ho, wo, kh, kw, stride, pad, h, wd);
  {
    MapMat om(out.data(), c_out, static_cast<Eigen::Index>(ho) * wo);
    for (int co = 0; co < c_out; ++co) om.row(co).array() += value(b)[co];
  }

  const int ix = x.idx, iw = w.idx, ib = b.idx;
  const bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
  return push(std::move(out), Shape::image(c_out, ho, wo), rg,
              [ix, iw, ib, kh, kw, stride, pad, c_in, h, wd, c_out, ho,
               wo](Tape& t, int self) {
                RowMat gcols = im2col(t.nodes_[self].grad, c_out, ho, wo, kh, kw,
                                      stride, pad, h, wd);
                if (t.nodes_[ix].requires_grad) {
                  CMapMat wm(t.nodes_[iw].value.data(), c_in, c_out * kh * kw);
                  MapMat(t.grad_ref(ix).data(), c_in,
                         static_cast<Eigen::Index>(h) * wd)
                      .noalias() += wm * gcols;
                }
                if (t.nodes_[iw].requires_grad) {
                  CMapMat xm(t.nodes_[ix].value.data(), c_in,
                             static_cast<Eigen::Index>(h) * wd);
                  MapMat(t.grad_ref(iw).data(), c_in, c_out * kh * kw).noalias() +=
                      xm * gcols.transpose();
                }
                if (t.nodes_[ib].requires_grad) {
                  CMapMat g(t.nodes_[self].grad.data(), c_out,
                            static_cast<Eigen::Index>(ho) * wo);
                  Array& gb = t.grad_ref(ib);
                  for (int co = 0; co < c_out; ++co) gb[co] += g.row(co).sum();
                }
              });
}

Var Tape::upsample2x(Var x) {
  const Shape sx = shape(x);
  const int c = sx.d0, h = sx.d1, w = sx.d2;
  Array out(static_cast<Eigen::Index>(c) * 4 * h * w);
  const Array& v = value(x);
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        const Scalar s = v[(static_cast<Eigen::Index>(ci) * h + y) * w + xx];
        const Eigen::Index base =
            (static_cast<Eigen::Index>(ci) * 2 * h + 2 * y) * 2 * w + 2 * xx;
        out[base] = s;
        out[base + 1] = s;
        out[base + 2 * w] = s;
        out[base + 2 * w + 1] = s;
      }
  const int ix = x.idx;
  return push(std::move(out), Shape::image(c, 2 * h, 2 * w), requires_grad(x),
              [ix, c, h, w](Tape& t, int self) {
                Array& gx = t.grad_ref(ix);
                const Array& g = t.nodes_[self].grad;
                for (int ci = 0; ci < c; ++ci)
                  for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) {
                      const Eigen::Index base =
                          (static_cast<Eigen::Index>(ci) * 2 * h + 2 * y) * 2 * w +
                          2 * xx;
                      gx[(static_cast<Eigen::Index>(ci) * h + y) * w + xx] +=
                          g[base] + g[base + 1] + g[base + 2 * w] + g[base + 2 * w + 1];
                    }
              });
}

Var Tape::global_avg_pool(Var x) {
  const Shape sx = shape(x);
  const Eigen::Index hw = static_cast<Eigen::Index>(sx.d1) * sx.d2;
  Array out(sx.d0);
  for (int c = 0; c < sx.d0; ++c) out[c] = value(x).segment(c * hw, hw).mean();
  const int ix = x.idx;
  return push(std::move(out), Shape::vec(sx.d0), requires_grad(x),
              [ix, sx, hw](Tape& t, int self) {
                Array& gx = t.grad_ref(ix);
                const Array& g = t.nodes_[self].grad;
                for (int c = 0; c < sx.d0; ++c)
                  gx.segment(c * hw, hw) += g[c] / static_cast<Scalar>(hw);
              });
}

Var Tape::warp_bilinear(Var src, Var flow) {
  const Shape ss = shape(src), sf = shape(flow);
  if (sf.d0 != 2 || sf.d1 != ss.d1 || sf.d2 != ss.d2)
    throw ShapeError("warp_bilinear: flow must be (2,H,W) matching source");
  const int c = ss.d0, h = ss.d1, w = ss.d2;
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  Array out(ss.size());
  const Array& s = value(src);
  const Array& f = value(flow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Eigen::Index p = static_cast<Eigen::Index>(y) * w + x;
      const BilinearTap tap =
          make_tap(static_cast<Scalar>(x) + f[p], static_cast<Scalar>(y) + f[hw + p], h,
                   w, false);
      for (int ci = 0; ci < c; ++ci) out[ci * hw + p] = tap_sample(s, tap, ci, h, w);
    }
  const int isr = src.idx, ifl = flow.idx;
  const bool rg = requires_grad(src) || requires_grad(flow);
  return push(std::move(out), ss, rg, [isr, ifl, c, h, w, hw](Tape& t, int self) {
    const Array& s = t.nodes_[isr].value;
    const Array& f = t.nodes_[ifl].value;
    const Array& g = t.nodes_[self].grad;
    const bool need_src = t.nodes_[isr].requires_grad;
    const bool need_flow = t.nodes_[ifl].requires_grad;
    Array* gs = need_src ? &t.grad_ref(isr) : nullptr;
    Array* gf = need_flow ? &t.grad_ref(ifl) : nullptr;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const Eigen::Index p = static_cast<Eigen::Index>(y) * w + x;
        const BilinearTap tap =
            make_tap(static_cast<Scalar>(x) + f[p], static_cast<Scalar>(y) + f[hw + p],
                     h, w, false);
        Scalar dfx = 0, dfy = 0;
        for (int ci = 0; ci < c; ++ci) {
          const Scalar go = g[ci * hw + p];
          if (go == 0.0) continue;
          const Eigen::Index base = static_cast<Eigen::Index>(ci) * hw;
          const Scalar v00 = s[base + static_cast<Eigen::Index>(tap.y0) * w + tap.x0];
          const Scalar v01 = s[base + static_cast<Eigen::Index>(tap.y0) * w + tap.x1];
          const Scalar v10 = s[base + static_cast<Eigen::Index>(tap.y1) * w + tap.x0];
          const Scalar v11 = s[base + static_cast<Eigen::Index>(tap.y1) * w + tap.x1];
          if (need_src) {
            (*gs)[base + static_cast<Eigen::Index>(tap.y0) * w + tap.x0] +=
                go * (1 - tap.wy) * (1 - tap.wx);
            (*gs)[base + static_cast<Eigen::Index>(tap.y0) * w + tap.x1] +=
                go * (1 - tap.wy) * tap.wx;
            (*gs)[base + static_cast<Eigen::Index>(tap.y1) * w + tap.x0] +=
                go * tap.wy * (1 - tap.wx);
            (*gs)[base + static_cast<Eigen::Index>(tap.y1) * w + tap.x1] +=
                go * tap.wy * tap.wx;
          }
          if (need_flow) {
            if (!tap.sat_x)
              dfx += go * ((1 - tap.wy) * (v01 - v00) + tap.wy * (v11 - v10));
            if (!tap.sat_y)
              dfy += go * ((1 - tap.wx) * (v10 - v00) + tap.wx * (v11 - v01));
          }
        }
        if (need_flow) {
          (*gf)[p] += dfx;
          (*gf)[hw + p] += dfy;
        }
      }
  });
}

Var Tape::affine_sample(Var src, const Eigen::Matrix<Scalar, 2, 3>& m, int out_h,
                        int out_w, bool zero_outside) {
  const Shape ss = shape(src);
  const int c = ss.d0, h = ss.d1, w = ss.d2;
  const Eigen::Index hw_in = static_cast<Eigen::Index>(h) * w;
  const Eigen::Index hw_out = static_cast<Eigen::Index>(out_h) * out_w;
  Array out = Array::Zero(static_cast<Eigen::Index>(c) * hw_out);
  const Array& s = value(src);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      const Scalar xs = m(0, 0) * x + m(0, 1) * y + m(0, 2);
      const Scalar ys = m(1, 0) * x + m(1, 1) * y + m(1, 2);
      const BilinearTap tap = make_tap(xs, ys, h, w, zero_outside);
      if (!tap.inside) continue;
      const Eigen::Index p = static_cast<Eigen::Index>(y) * out_w + x;
      for (int ci = 0; ci < c; ++ci)
        out[ci * hw_out + p] = tap_sample(s, tap, ci, h, w);
    }
  const int isr = src.idx;
  return push(std::move(out), Shape::image(c, out_h, out_w), requires_grad(src),
              [isr, m, c, h, w, hw_in, hw_out, out_h, out_w,
               zero_outside](Tape& t, int self) {
                Array& gs = t.grad_ref(isr);
                const Array& g = t.nodes_[self].grad;
                for (int y = 0; y < out_h; ++y)
                  for (int x = 0; x < out_w; ++x) {
                    const Scalar xs = m(0, 0) * x + m(0, 1) * y + m(0, 2);
                    const Scalar ys = m(1, 0) * x + m(1, 1) * y + m(1, 2);
                    const BilinearTap tap = make_tap(xs, ys, h, w, zero_outside);
                    if (!tap.inside) continue;
                    const Eigen::Index p = static_cast<Eigen::Index>(y) * out_w + x;
                    for (int ci = 0; ci < c; ++ci) {
                      const Scalar go = g[ci * hw_out + p];
                      if (go == 0.0) continue;
                      const Eigen::Index base = static_cast<Eigen::Index>(ci) * hw_in;
                      gs[base + static_cast<Eigen::Index>(tap.y0) * w + tap.x0] +=
                          go * (1 - tap.wy) * (1 - tap.wx);
                      gs[base + static_cast<Eigen::Index>(tap.y0) * w + tap.x1] +=
                          go * (1 - tap.wy) * tap.wx;
                      gs[base + static_cast<Eigen::Index>(tap.y1) * w + tap.x0] +=
                          go * tap.wy * (1 - tap.wx);
                      gs[base + static_cast<Eigen::Index>(tap.y1) * w + tap.x1] +=
                          go * tap.wy * tap.wx;
                    }
                  }
              });
}

Var Tape::spatial_batchnorm(Var x, Var gamma, Var beta, const Array& running_mean,
                            const Array& running_var, bool training, Scalar eps,
                            Array* batch_mean_out, Array* batch_var_out) {
  const Shape sx = shape(x);
  const int c = sx.d0;
  const Eigen::Index hw = static_cast<Eigen::Index>(sx.d1) * sx.d2;
  if (shape(gamma).size() != c || shape(beta).size() != c)
    throw ShapeError("spatial_batchnorm: affine size mismatch");

  if (!training) {
    // Frozen statistics: a per-channel affine map.
    Array out(sx.size());
    const Array& v = value(x);
    Array inv_std = (running_var + eps).sqrt().inverse();
    for (int ci = 0; ci < c; ++ci)
      out.segment(ci * hw, hw) =
          (v.segment(ci * hw, hw) - running_mean[ci]) * inv_std[ci] * value(gamma)[ci] +
          value(beta)[ci];
    const int ix = x.idx, ig = gamma.idx, ib = beta.idx;
    const bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
    Array rmean = running_mean;
    return push(std::move(out), sx, rg,
                [ix, ig, ib, c, hw, inv_std, rmean](Tape& t, int self) {
                  const Array& g = t.nodes_[self].grad;
                  if (t.nodes_[ix].requires_grad) {
                    Array& gx = t.grad_ref(ix);
                    for (int ci = 0; ci < c; ++ci)
                      gx.segment(ci * hw, hw) +=
                          g.segment(ci * hw, hw) * inv_std[ci] * t.nodes_[ig].value[ci];
                  }
                  if (t.nodes_[ig].requires_grad) {
                    Array& gg = t.grad_ref(ig);
                    for (int ci = 0; ci < c; ++ci)
                      gg[ci] += (g.segment(ci * hw, hw) *
                                 (t.nodes_[ix].value.segment(ci * hw, hw) - rmean[ci]) *
                                 inv_std[ci])
                                    .sum();
                  }
                  if (t.nodes_[ib].requires_grad) {
                    Array& gb = t.grad_ref(ib);
                    for (int ci = 0; ci < c; ++ci) gb[ci] += g.segment(ci * hw, hw).sum();
                  }
                });
  }

  Array mean_c(c), var_c(c);
  const Array& v = value(x);
  for (int ci = 0; ci < c; ++ci) {
    const auto seg = v.segment(ci * hw, hw);
    mean_c[ci] = seg.mean();
    var_c[ci] = (seg - mean_c[ci]).square().mean();
  }
  if (batch_mean_out) *batch_mean_out = mean_c;
  if (batch_var_out) *batch_var_out = var_c;
  Array inv_std = (var_c + eps).sqrt().inverse();
  Array out(sx.size());
  for (int ci = 0; ci < c; ++ci)
    out.segment(ci * hw, hw) =
        (v.segment(ci * hw, hw) - mean_c[ci]) * inv_std[ci] * value(gamma)[ci] +
        value(beta)[ci];

  const int ix = x.idx, ig = gamma.idx, ib = beta.idx;
  const bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
  return push(std::move(out), sx, rg,
              [ix, ig, ib, c, hw, mean_c, inv_std](Tape& t, int self) {
                const Array& g = t.nodes_[self].grad;
                const Array& v = t.nodes_[ix].value;
                const Scalar n = static_cast<Scalar>(hw);
                for (int ci = 0; ci < c; ++ci) {
                  const auto gseg = g.segment(ci * hw, hw);
                  const Array xhat = (v.segment(ci * hw, hw) - mean_c[ci]) * inv_std[ci];
                  if (t.nodes_[ig].requires_grad)
                    t.grad_ref(ig)[ci] += (gseg * xhat).sum();
                  if (t.nodes_[ib].requires_grad) t.grad_ref(ib)[ci] += gseg.sum();
                  if (t.nodes_[ix].requires_grad) {
                    const Scalar gamma_c = t.nodes_[ig].value[ci];
                    const Array gxhat = gseg * gamma_c;
                    const Scalar sum_g = gxhat.sum();
                    const Scalar sum_gx = (gxhat * xhat).sum();
                    t.grad_ref(ix).segment(ci * hw, hw) +=
                        inv_std[ci] / n * (n * gxhat - sum_g - xhat * sum_gx);
                  }
                }
              });
}

}  // namespace rigid::ad
