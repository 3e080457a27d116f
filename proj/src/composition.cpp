#include "rigid/composition.hpp"

namespace rigid::composition {

namespace {

// Channel plan for the 5 encoder / 5 decoder stages.
struct UNetPlan {
  int ec[6];  // encoder channels, ec[0] = input
  int dc[5];  // decoder output channels, dc[4] = 1
};

UNetPlan plan(int base) {
  UNetPlan p;
  p.ec[0] = 6;
  p.ec[1] = base;
  p.ec[2] = base * 2;
  p.ec[3] = base * 2;
  p.ec[4] = base * 2;
  p.ec[5] = base * 2;
  p.dc[0] = base * 2;
  p.dc[1] = base * 2;
  p.dc[2] = base * 2;
  p.dc[3] = base;
  p.dc[4] = 1;
  return p;
}

}  // namespace

VisibleNetWeights VisibleNetWeights::make(const VisibleNetConfig& cfg) {
  VisibleNetWeights w;
  w.cfg = cfg;
  Rng rng(derive_seed(cfg.seed, "visible_net"));
  const UNetPlan p = plan(cfg.base_channels);
  for (int i = 0; i < 5; ++i) {
    w.enc.push_back(nn::Conv2d::make(p.ec[i], p.ec[i + 1], 4, 2, 1, rng));
    w.enc_bn.push_back(nn::BatchNorm::make(p.ec[i + 1]));
  }
  // decoder stage i consumes cat(previous output, encoder skip)
  int in = p.ec[5];
  for (int i = 0; i < 5; ++i) {
    w.dec.push_back(nn::ConvTranspose2d::make(in, p.dc[i], 4, 2, 1, rng));
    if (i < 4) {
      w.dec_bn.push_back(nn::BatchNorm::make(p.dc[i]));
      in = p.dc[i] + p.ec[4 - i];  // skip from the matching encoder stage
    }
  }
  return w;
}

void VisibleNetWeights::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
  for (std::size_t i = 0; i < enc.size(); ++i) {
    enc[i].visit(prefix + ".enc" + std::to_string(i), fn);
    enc_bn[i].visit(prefix + ".enc_bn" + std::to_string(i), fn);
  }
  for (std::size_t i = 0; i < dec.size(); ++i)
    dec[i].visit(prefix + ".dec" + std::to_string(i), fn);
  for (std::size_t i = 0; i < dec_bn.size(); ++i)
    dec_bn[i].visit(prefix + ".dec_bn" + std::to_string(i), fn);
}

void VisibleNetWeights::trainable(std::vector<nn::Param*>& out) {
  for (auto& e : enc) e.trainable(out);
  for (auto& b : enc_bn) b.trainable(out);
  for (auto& d : dec) d.trainable(out);
  for (auto& b : dec_bn) b.trainable(out);
}

namespace {

ad::Var visnet_forward(ad::Tape& t, nn::Binder& bind, VisibleNetWeights* mut,
                       const VisibleNetWeights& w, ad::Var warped_prev,
                       ad::Var warped_next, bool training) {
  const ad::Shape sp = t.shape(warped_prev);
  if (!(sp == t.shape(warped_next)))
    throw ShapeError("predict_visibility: warped inputs differ in shape");
  ad::Var x = t.concat({warped_prev, warped_next}, 0);
  if (t.shape(x).d0 != w.input_channels)
    throw ShapeError("predict_visibility: input channels != 6");
  if (sp.d1 % 32 != 0 || sp.d2 % 32 != 0)
    throw ShapeError("predict_visibility: spatial size must be divisible by 32");

  std::vector<ad::Var> skips;
  for (std::size_t i = 0; i < w.enc.size(); ++i) {
    x = w.enc[i](t, bind, x);
    x = training ? mut->enc_bn[i](t, bind, x, true) : w.enc_bn[i](t, bind, x);
    x = t.leaky_relu(x, 0.2);
    skips.push_back(x);
  }
  for (std::size_t i = 0; i < w.dec.size(); ++i) {
    x = w.dec[i](t, bind, x);
    if (i + 1 < w.dec.size()) {
      x = training ? mut->dec_bn[i](t, bind, x, true) : w.dec_bn[i](t, bind, x);
      x = t.leaky_relu(x, 0.2);
      x = t.concat({x, skips[w.enc.size() - 2 - i]}, 0);
    }
  }
  return t.sigmoid(x);
}

}  // namespace

ad::Var predict_visibility_t(ad::Tape& t, nn::Binder& bind, VisibleNetWeights& w,
                             ad::Var warped_prev, ad::Var warped_next, bool training) {
  return visnet_forward(t, bind, &w, w, warped_prev, warped_next, training);
}

ad::Var predict_visibility_t(ad::Tape& t, nn::Binder& bind,
                             const VisibleNetWeights& w, ad::Var warped_prev,
                             ad::Var warped_next) {
  return visnet_forward(t, bind, nullptr, w, warped_prev, warped_next, false);
}

VisibilityMap predict_visibility(const VisibleNetWeights& w, const Frame& warped_prev,
                                 const Frame& warped_next) {
  ad::Tape t;
  nn::Binder bind(t);
  ad::Var v = predict_visibility_t(
      t, bind, w, t.leaf(warped_prev.flat(), warped_prev.ad_shape()),
      t.leaf(warped_next.flat(), warped_next.ad_shape()));
  VisibilityMap out;
  out.values = plane_from_flat(t.value(v), warped_prev.height(), warped_prev.width());
  return out;
}

Frame compose_in_between(const Frame& warped_prev, const Frame& warped_next,
                         const VisibilityMap& visibility) {
  require_shape(warped_prev.height() == warped_next.height() &&
                    warped_prev.width() == warped_next.width() &&
                    visibility.values.rows() == warped_prev.height() &&
                    visibility.values.cols() == warped_prev.width(),
                "compose_in_between: shape mismatch");
  Frame out(warped_prev.height(), warped_prev.width());
  for (int c = 0; c < 3; ++c)
    out.ch[c] = visibility.values * warped_prev.ch[c] +
                (1.0 - visibility.values) * warped_next.ch[c];
  return out;
}

ad::Var compose_in_between_t(ad::Tape& t, ad::Var warped_prev, ad::Var warped_next,
                             ad::Var visibility) {
  const int c = t.shape(warped_prev).d0;
  ad::Var vb = t.broadcast_channel(visibility, c);
  ad::Var ones = t.leaf(Array::Ones(t.value(vb).size()), t.shape(vb));
  return t.add(t.mul(vb, warped_prev), t.mul(t.sub(ones, vb), warped_next));
}

void train_visible_net(VisibleNetWeights& w, const std::vector<Triplet>& triplets,
                       const VisnetTrainOptions& options) {
  if (triplets.empty()) throw ShapeError("train_visible_net: empty triplet set");
  std::vector<nn::Param*> params;
  w.trainable(params);
  optim::Adam adam(params, options.opt);
  const auto trainable = adam.trainable_set();
  Rng rng(derive_seed(options.seed, "visnet_train"));

  for (int it = 0; it < options.iterations; ++it) {
    const Triplet& tr = triplets[rng.uniform_int(static_cast<int>(triplets.size()))];
    const Frame wp = flow::warp(*tr.prev, *tr.flow_to_prev);
    const Frame wn = flow::warp(*tr.next, *tr.flow_to_next);

    ad::Tape t;
    nn::Binder bind(t, &trainable);
    ad::Var vp = t.leaf(wp.flat(), wp.ad_shape());
    ad::Var vn = t.leaf(wn.flat(), wn.ad_shape());
    ad::Var vis = predict_visibility_t(t, bind, w, vp, vn, /*training=*/true);
    ad::Var composed = compose_in_between_t(t, vp, vn, vis);
    ad::Var target = t.leaf(tr.cur->flat(), tr.cur->ad_shape());
    ad::Var loss = t.mae(composed, target);
    t.backward(loss);
    adam.step(bind);
    if (options.on_step) options.on_step(it, t.value_scalar(loss));
  }
  w.frozen = true;
}

ad::Var ibfcc_loss_t(ad::Tape& t, nn::Binder& bind, const std::vector<ad::Var>& edited,
                     const std::vector<FlowField>& flows_prev,
                     const std::vector<FlowField>& flows_next,
                     const VisibleNetWeights& visnet) {
  const std::size_t T = edited.size();
  if (T < 3) throw ShapeError("ibfcc_loss: needs at least 3 frames");
  if (flows_prev.size() != T - 1 || flows_next.size() != T - 1)
    throw ShapeError("ibfcc_loss: flow list lengths must be T-1");
  if (!visnet.frozen)
    throw MissingPrerequisiteError("ibfcc_loss: visibility net is not frozen");

  ad::Var total = t.scalar(0.0);
  for (std::size_t i = 1; i + 1 < T; ++i) {
    const ad::Shape fs = t.shape(edited[i]);
    ad::Var fp = t.leaf(flows_prev[i - 1].flat(), ad::Shape::image(2, fs.d1, fs.d2));
    ad::Var fn = t.leaf(flows_next[i].flat(), ad::Shape::image(2, fs.d1, fs.d2));
    ad::Var wp = t.warp_bilinear(edited[i - 1], fp);
    ad::Var wn = t.warp_bilinear(edited[i + 1], fn);
    ad::Var vis = predict_visibility_t(t, bind, visnet, wp, wn);
    ad::Var composed = compose_in_between_t(t, wp, wn, vis);
    total = t.add(total, t.mae(edited[i], composed));
  }
  return total;
}

Scalar ibfcc_loss(const std::vector<Frame>& edited,
                  const std::vector<FlowField>& flows_prev,
                  const std::vector<FlowField>& flows_next,
                  const VisibleNetWeights& visnet) {
  ad::Tape t;
  nn::Binder bind(t);
  std::vector<ad::Var> vars;
  vars.reserve(edited.size());
  for (const auto& f : edited) vars.push_back(t.leaf(f.flat(), f.ad_shape()));
  return t.value_scalar(ibfcc_loss_t(t, bind, vars, flows_prev, flows_next, visnet));
}

}  // namespace rigid::composition
