#include "rigid/encoders.hpp"

#include <cmath>

namespace rigid::encoders {

namespace {

int int_log2(int v) {
  int l = 0;
  while ((1 << l) < v) ++l;
  return l;
}

void check_frame_shape(const ad::Tape& t, ad::Var frame, int res, const char* what) {
  const ad::Shape s = t.shape(frame);
  if (s.d0 != 3 || s.d1 != res || s.d2 != res) throw ShapeError(what);
}

}  // namespace

BaseEncoderWeights BaseEncoderWeights::make(const EncoderConfig& cfg) {
  BaseEncoderWeights w;
  w.cfg = cfg;
  Rng rng(derive_seed(cfg.seed, "base_encoder"));
  const int b = cfg.base_channels;
  const int chans[6] = {3, b, b * 3 / 2, b * 2, b * 3, b * 4};
  const int strides[5] = {2, 2, 2, 2, 1};
  for (int i = 0; i < 5; ++i)
    w.stages.push_back(nn::Conv2d::make(chans[i], chans[i + 1], 3, strides[i], 1, rng));
  w.head = nn::Linear::make(chans[5], cfg.latent_layers * cfg.latent_dim, rng);
  return w;
}

void BaseEncoderWeights::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
  for (std::size_t i = 0; i < stages.size(); ++i)
    stages[i].visit(prefix + ".stage" + std::to_string(i), fn);
  head.visit(prefix + ".head", fn);
}

void BaseEncoderWeights::trainable(std::vector<nn::Param*>& out) {
  for (auto& s : stages) s.trainable(out);
  head.trainable(out);
}

ad::Var base_encode_t(ad::Tape& t, nn::Binder& bind, const BaseEncoderWeights& w,
                      ad::Var frame) {
  check_frame_shape(t, frame, w.cfg.image_resolution,
                    "base_encode: frame resolution mismatch");
  ad::Var x = frame;
  for (const auto& stage : w.stages) x = t.leaky_relu(stage(t, bind, x), 0.2);
  ad::Var pooled = t.global_avg_pool(x);
  ad::Var code = w.head(t, bind, pooled);
  return t.reshape(code, ad::Shape::mat(w.cfg.latent_layers, w.cfg.latent_dim));
}

LatentCode base_encode(const BaseEncoderWeights& w, const AlignedFrame& frame) {
  ad::Tape t;
  nn::Binder bind(t);
  ad::Var f = t.leaf(frame.pixels.flat(), frame.pixels.ad_shape());
  ad::Var code = base_encode_t(t, bind, w, f);
  return LatentCode::from_flat(t.value(code), w.cfg.latent_layers, w.cfg.latent_dim,
                               w.cfg.split_index);
}

int RecurrentEncoderWeights::hidden_channels() const { return cfg.base_channels * 2; }

RecurrentEncoderWeights RecurrentEncoderWeights::make(const EncoderConfig& cfg) {
  if (cfg.image_resolution % cfg.noise_resolution != 0)
    throw ConfigError("recurrent encoder: noise_resolution must divide resolution");
  RecurrentEncoderWeights w;
  w.cfg = cfg;
  Rng rng(derive_seed(cfg.seed, "recurrent_encoder"));
  const int b = cfg.base_channels;
  const int hid = w.hidden_channels();
  // stride-2 stages bring the input down to the hidden resolution
  const int down = int_log2(cfg.image_resolution / cfg.noise_resolution);
  if (down > 4) throw ConfigError("recurrent encoder: resolution ratio too large");
  int chans[8] = {12, b, b, b * 3 / 2, b * 3 / 2, hid, hid, hid};
  for (int i = 0; i < 7; ++i) {
    const int stride = (i % 2 == 0 && i / 2 < down) ? 2 : 1;
    w.stages.push_back(nn::Conv2d::make(chans[i], chans[i + 1], 3, stride, 1, rng));
  }
  w.lstm = nn::ConvLSTM::make(hid, hid, rng);
  const int r = cfg.noise_resolution;
  w.code_head = nn::Linear::make(hid * r * r, cfg.latent_layers * cfg.latent_dim, rng,
                                 /*zero_init=*/true);
  w.noise_head = nn::Conv2d::make(hid, 1, 3, 1, 1, rng, /*zero_init=*/true);
  return w;
}

void RecurrentEncoderWeights::visit(const std::string& prefix,
                                    const nn::ParamVisitor& fn) {
  for (std::size_t i = 0; i < stages.size(); ++i)
    stages[i].visit(prefix + ".stage" + std::to_string(i), fn);
  lstm.visit(prefix + ".lstm", fn);
  code_head.visit(prefix + ".code_head", fn);
  noise_head.visit(prefix + ".noise_head", fn);
}

void RecurrentEncoderWeights::trainable(std::vector<nn::Param*>& out) {
  for (auto& s : stages) s.trainable(out);
  lstm.trainable(out);
  code_head.trainable(out);
  noise_head.trainable(out);
}

RecurrentState reset_state(const RecurrentEncoderWeights& w) {
  RecurrentState s;
  s.channels = w.hidden_channels();
  s.resolution = w.hidden_resolution();
  const Eigen::Index n =
      static_cast<Eigen::Index>(s.channels) * s.resolution * s.resolution;
  s.h = Array::Zero(n);
  s.c = Array::Zero(n);
  return s;
}

RecurrentStepVars recurrent_step_t(ad::Tape& t, nn::Binder& bind,
                                   const RecurrentEncoderWeights& w,
                                   ad::Var prev_aligned, ad::Var cur_aligned,
                                   ad::Var prev_inverted, ad::Var prev_edited,
                                   ad::Var state_h, ad::Var state_c) {
  const int res = w.cfg.image_resolution;
  check_frame_shape(t, prev_aligned, res, "recurrent_step: frame shape mismatch");
  check_frame_shape(t, cur_aligned, res, "recurrent_step: frame shape mismatch");
  check_frame_shape(t, prev_inverted, res, "recurrent_step: frame shape mismatch");
  check_frame_shape(t, prev_edited, res, "recurrent_step: frame shape mismatch");

  ad::Var x = t.concat({prev_aligned, cur_aligned, prev_inverted, prev_edited}, 0);
  if (t.shape(x).d0 != w.input_channels)
    throw ShapeError("recurrent_step: input channel count != 12");
  for (const auto& stage : w.stages) x = t.leaky_relu(stage(t, bind, x), 0.2);

  auto [h, c] = w.lstm.step(t, bind, x, state_h, state_c);

  const int r = w.hidden_resolution();
  ad::Var flat = t.reshape(h, ad::Shape::vec(w.hidden_channels() * r * r));
  ad::Var code = t.reshape(w.code_head(t, bind, flat),
                           ad::Shape::mat(w.cfg.latent_layers, w.cfg.latent_dim));
  ad::Var noise = w.noise_head(t, bind, h);

  RecurrentStepVars out;
  out.compensation = code;
  out.noise = noise;
  out.h = h;
  out.c = c;
  return out;
}

RecurrentStepResult recurrent_step(const RecurrentEncoderWeights& w,
                                   const RecurrentState& state,
                                   const AlignedFrame& prev_aligned,
                                   const AlignedFrame& cur_aligned,
                                   const AlignedFrame& prev_inverted,
                                   const AlignedFrame& prev_edited) {
  if (state.channels != w.hidden_channels() || state.resolution != w.hidden_resolution())
    throw ShapeError("recurrent_step: state shape does not match weights");
  ad::Tape t;
  nn::Binder bind(t);
  const ad::Shape state_shape =
      ad::Shape::image(state.channels, state.resolution, state.resolution);
  RecurrentStepVars vars = recurrent_step_t(
      t, bind, w, t.leaf(prev_aligned.pixels.flat(), prev_aligned.pixels.ad_shape()),
      t.leaf(cur_aligned.pixels.flat(), cur_aligned.pixels.ad_shape()),
      t.leaf(prev_inverted.pixels.flat(), prev_inverted.pixels.ad_shape()),
      t.leaf(prev_edited.pixels.flat(), prev_edited.pixels.ad_shape()),
      t.leaf(state.h, state_shape), t.leaf(state.c, state_shape));

  RecurrentStepResult out;
  out.compensation = LatentCode::from_flat(t.value(vars.compensation),
                                           w.cfg.latent_layers, w.cfg.latent_dim,
                                           w.cfg.split_index);
  out.noise = NoiseMap::from_flat(t.value(vars.noise), w.hidden_resolution());
  out.state.channels = state.channels;
  out.state.resolution = state.resolution;
  out.state.h = t.value(vars.h);
  out.state.c = t.value(vars.c);
  return out;
}

}  // namespace rigid::encoders
