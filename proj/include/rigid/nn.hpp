#pragma once

// Layer building blocks over the tape: convolutions, linear maps,
// spatial batch normalization with running statistics, and a
// convolutional LSTM cell.

#include <functional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rigid/core.hpp"
#include "rigid/tape.hpp"

namespace rigid::nn {

struct Param {
  Array value;
  ad::Shape shape;

  Param() = default;
  Param(Array v, ad::Shape s) : value(std::move(v)), shape(s) {
    if (value.size() != shape.size()) throw ShapeError("Param: size mismatch");
  }
};

using ParamVisitor = std::function<void(const std::string&, Param&)>;

// Binds persistent parameters into a tape as leaves, once per tape.
// A parameter is marked differentiable iff it is in the trainable set.
class Binder {
 public:
  explicit Binder(ad::Tape& tape,
                  const std::unordered_set<const Param*>* trainable = nullptr)
      : tape_(tape), trainable_(trainable) {}

  ad::Var operator()(const Param& p) {
    auto it = cache_.find(&p);
    if (it != cache_.end()) return it->second;
    const bool rg = trainable_ && trainable_->count(&p) > 0;
    ad::Var v = tape_.leaf(p.value, p.shape, rg);
    cache_.emplace(&p, v);
    return v;
  }

  ad::Tape& tape() { return tape_; }

  // Gradient lookup after backward; zero if the parameter never entered
  // the graph.
  Array grad(const Param& p) const {
    auto it = cache_.find(&p);
    if (it == cache_.end()) return Array::Zero(p.value.size());
    return tape_.grad(it->second);
  }

 private:
  ad::Tape& tape_;
  const std::unordered_set<const Param*>* trainable_;
  std::unordered_map<const Param*, ad::Var> cache_;
};

inline Param make_param(Rng& rng, ad::Shape shape, Scalar stddev) {
  return Param(rng.normal_array(shape.size(), stddev), shape);
}
inline Param zeros_param(ad::Shape shape) {
  return Param(Array::Zero(shape.size()), shape);
}
inline Param const_param(ad::Shape shape, Scalar v) {
  return Param(Array::Constant(shape.size(), v), shape);
}

struct Conv2d {
  Param w, b;  // w: (out, in*k*k)
  int in_ch = 0, out_ch = 0, k = 3, stride = 1, pad = 1;

  static Conv2d make(int in_ch, int out_ch, int k, int stride, int pad, Rng& rng,
                     bool zero_init = false) {
    Conv2d c;
    c.in_ch = in_ch;
    c.out_ch = out_ch;
    c.k = k;
    c.stride = stride;
    c.pad = pad;
    const Scalar std = std::sqrt(2.0 / (in_ch * k * k));
    c.w = zero_init ? zeros_param(ad::Shape::mat(out_ch, in_ch * k * k))
                    : make_param(rng, ad::Shape::mat(out_ch, in_ch * k * k), std);
    c.b = zeros_param(ad::Shape::vec(out_ch));
    return c;
  }

  ad::Var operator()(ad::Tape& t, Binder& bind, ad::Var x) const {
    return t.conv2d(x, bind(w), bind(b), k, k, stride, pad);
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".w", w);
    fn(prefix + ".b", b);
  }
  void trainable(std::vector<Param*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

struct ConvTranspose2d {
  Param w, b;  // w: (in, out*k*k)
  int in_ch = 0, out_ch = 0, k = 4, stride = 2, pad = 1;

  static ConvTranspose2d make(int in_ch, int out_ch, int k, int stride, int pad,
                              Rng& rng) {
    ConvTranspose2d c;
    c.in_ch = in_ch;
    c.out_ch = out_ch;
    c.k = k;
    c.stride = stride;
    c.pad = pad;
    const Scalar std = std::sqrt(2.0 / (in_ch * k * k));
    c.w = make_param(rng, ad::Shape::mat(in_ch, out_ch * k * k), std);
    c.b = zeros_param(ad::Shape::vec(out_ch));
    return c;
  }

  ad::Var operator()(ad::Tape& t, Binder& bind, ad::Var x) const {
    return t.conv_transpose2d(x, bind(w), bind(b), k, k, stride, pad);
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".w", w);
    fn(prefix + ".b", b);
  }
  void trainable(std::vector<Param*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

struct Linear {
  Param w, b;  // w: (out, in)
  int in_dim = 0, out_dim = 0;

  static Linear make(int in_dim, int out_dim, Rng& rng, bool zero_init = false) {
    Linear l;
    l.in_dim = in_dim;
    l.out_dim = out_dim;
    const Scalar std = std::sqrt(1.0 / in_dim);
    l.w = zero_init ? zeros_param(ad::Shape::mat(out_dim, in_dim))
                    : make_param(rng, ad::Shape::mat(out_dim, in_dim), std);
    l.b = zeros_param(ad::Shape::vec(out_dim));
    return l;
  }

  // x: vec(in) → vec(out)
  ad::Var operator()(ad::Tape& t, Binder& bind, ad::Var x) const {
    ad::Var col = t.reshape(x, ad::Shape::mat(in_dim, 1));
    ad::Var y = t.matmul(bind(w), col);
    return t.add(t.reshape(y, ad::Shape::vec(out_dim)), bind(b));
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".w", w);
    fn(prefix + ".b", b);
  }
  void trainable(std::vector<Param*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

// Per-channel normalization over the spatial extent (single-sample batch
// statistics), with running statistics used when not training.
struct BatchNorm {
  Param gamma, beta;
  Param running_mean, running_var;  // persisted, never trained
  Scalar momentum = 0.1;
  Scalar eps = 1e-5;

  static BatchNorm make(int channels) {
    BatchNorm bn;
    bn.gamma = const_param(ad::Shape::vec(channels), 1.0);
    bn.beta = zeros_param(ad::Shape::vec(channels));
    bn.running_mean = zeros_param(ad::Shape::vec(channels));
    bn.running_var = const_param(ad::Shape::vec(channels), 1.0);
    return bn;
  }

  ad::Var operator()(ad::Tape& t, Binder& bind, ad::Var x, bool training) {
    if (!training)
      return t.spatial_batchnorm(x, bind(gamma), bind(beta), running_mean.value,
                                 running_var.value, false, eps);
    Array bm, bv;
    ad::Var y = t.spatial_batchnorm(x, bind(gamma), bind(beta), running_mean.value,
                                    running_var.value, true, eps, &bm, &bv);
    running_mean.value = (1.0 - momentum) * running_mean.value + momentum * bm;
    running_var.value = (1.0 - momentum) * running_var.value + momentum * bv;
    return y;
  }
  // const forward for inference paths
  ad::Var operator()(ad::Tape& t, Binder& bind, ad::Var x) const {
    return t.spatial_batchnorm(x, bind(gamma), bind(beta), running_mean.value,
                               running_var.value, false, eps);
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
    fn(prefix + ".running_mean", running_mean);
    fn(prefix + ".running_var", running_var);
  }
  void trainable(std::vector<Param*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

// Convolutional LSTM cell; state tensors are (hidden, r, r).
struct ConvLSTM {
  Conv2d gates;  // in: x_ch + hidden, out: 4*hidden (i, f, o, g)
  int x_ch = 0, hidden = 0;

  static ConvLSTM make(int x_ch, int hidden, Rng& rng) {
    ConvLSTM c;
    c.x_ch = x_ch;
    c.hidden = hidden;
    c.gates = Conv2d::make(x_ch + hidden, 4 * hidden, 3, 1, 1, rng);
    return c;
  }

  std::pair<ad::Var, ad::Var> step(ad::Tape& t, Binder& bind, ad::Var x, ad::Var h_prev,
                                   ad::Var c_prev) const {
    ad::Var z = gates(t, bind, t.concat({x, h_prev}, 0));
    const int hc = hidden;
    ad::Var i = t.sigmoid(t.slice(z, 0, 0, hc));
    ad::Var f = t.sigmoid(t.slice(z, 0, hc, hc));
    ad::Var o = t.sigmoid(t.slice(z, 0, 2 * hc, hc));
    ad::Var g = t.tanh(t.slice(z, 0, 3 * hc, hc));
    ad::Var c_new = t.add(t.mul(f, c_prev), t.mul(i, g));
    ad::Var h_new = t.mul(o, t.tanh(c_new));
    return {h_new, c_new};
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    gates.visit(prefix + ".gates", fn);
  }
  void trainable(std::vector<Param*>& out) { gates.trainable(out); }
};

}  // namespace rigid::nn
