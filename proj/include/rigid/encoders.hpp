#pragma once

// Per-frame base encoder producing initial latent codes, and the recurrent
// encoder producing the temporal compensation code and spatial noise map.

#include <vector>

#include "rigid/generator.hpp"
#include "rigid/image.hpp"
#include "rigid/nn.hpp"

namespace rigid::encoders {

using generator::LatentCode;

struct EncoderConfig {
  int image_resolution = 32;
  int latent_layers = 14;
  int latent_dim = 64;
  int split_index = 10;
  int noise_resolution = 4;  // recurrent hidden state lives at this resolution
  int base_channels = 32;
  std::uint64_t seed = 1;
};

// Five strided conv stages, global average pool, linear map to L×D.
struct BaseEncoderWeights {
  EncoderConfig cfg;
  std::vector<nn::Conv2d> stages;
  nn::Linear head;

  static BaseEncoderWeights make(const EncoderConfig& cfg);
  void visit(const std::string& prefix, const nn::ParamVisitor& fn);
  void trainable(std::vector<nn::Param*>& out);
};

ad::Var base_encode_t(ad::Tape& t, nn::Binder& bind, const BaseEncoderWeights& w,
                      ad::Var frame);  // (3,R,R) → mat(L,D)
LatentCode base_encode(const BaseEncoderWeights& w, const AlignedFrame& frame);

// Seven conv stages, a convolutional LSTM, a fully connected head for the
// compensation code and a conv head for the noise map. Input is the
// 12-channel concatenation of four aligned frames.
struct RecurrentEncoderWeights {
  EncoderConfig cfg;
  std::vector<nn::Conv2d> stages;
  nn::ConvLSTM lstm;
  nn::Linear code_head;    // zero-initialized: training starts at w' = 0
  nn::Conv2d noise_head;   // zero-initialized: training starts at n = 0
  int input_channels = 12;

  static RecurrentEncoderWeights make(const EncoderConfig& cfg);
  void visit(const std::string& prefix, const nn::ParamVisitor& fn);
  void trainable(std::vector<nn::Param*>& out);
  int hidden_resolution() const { return cfg.noise_resolution; }
  int hidden_channels() const;
};

// Hidden and cell maps of the recurrent stage.
struct RecurrentState {
  Array h, c;  // (hidden, r, r) flat
  int channels = 0, resolution = 0;
};

RecurrentState reset_state(const RecurrentEncoderWeights& w);

struct RecurrentStepVars {
  ad::Var compensation;  // mat(L,D)
  ad::Var noise;         // (1,r,r)
  ad::Var h, c;          // advanced state
};

// All four frames are (3,R,R) tape vars; state enters as tape vars so
// gradients flow through time.
RecurrentStepVars recurrent_step_t(ad::Tape& t, nn::Binder& bind,
                                   const RecurrentEncoderWeights& w,
                                   ad::Var prev_aligned, ad::Var cur_aligned,
                                   ad::Var prev_inverted, ad::Var prev_edited,
                                   ad::Var state_h, ad::Var state_c);

struct RecurrentStepResult {
  LatentCode compensation;
  NoiseMap noise;
  RecurrentState state;
};

RecurrentStepResult recurrent_step(const RecurrentEncoderWeights& w,
                                   const RecurrentState& state,
                                   const AlignedFrame& prev_aligned,
                                   const AlignedFrame& cur_aligned,
                                   const AlignedFrame& prev_inverted,
                                   const AlignedFrame& prev_edited);

}  // namespace rigid::encoders
