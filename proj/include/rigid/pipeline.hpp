#pragma once

// The recurrent rollout: per-episode sequential inversion + editing,
// the recurrent-encoder training loop, and streaming inference.

#include <functional>
#include <vector>

#include "rigid/composition.hpp"
#include "rigid/encoders.hpp"
#include "rigid/episode.hpp"
#include "rigid/generator.hpp"
#include "rigid/imaging.hpp"
#include "rigid/losses.hpp"
#include "rigid/optim.hpp"

namespace rigid::pipeline {

using generator::LatentCode;
using generator::SemanticDirection;

struct Models {
  generator::GeneratorWeights gen;
  encoders::BaseEncoderWeights base;
  encoders::RecurrentEncoderWeights rec;
  composition::VisibleNetWeights visnet;
  losses::PerceptualExtractorWeights perceptual;

  void visit(const nn::ParamVisitor& fn);
};

// Structural ablation switches applied at rollout time.
struct VariantFlags {
  bool use_compensation = true;  // false: w'_t forced to zero
  bool use_noise_map = true;     // false: n_t forced to zero
  bool use_lfd = true;           // false: per-frame latter rows kept
};

struct RolloutOptions {
  VariantFlags variant;
  // When an episode has no GT transforms/masks, fall back to a centered
  // square crop and an all-ones mask. Disabled → missing-prerequisite error.
  bool trivial_alignment_fallback = true;
};

struct RolloutResult {
  std::vector<AlignedFrame> aligned_input;      // I^a_t
  std::vector<AlignedFrame> inverted_aligned;   // O^a_t
  std::vector<AlignedFrame> edited_aligned;     // E^a_t
  std::vector<Frame> inverted_full;             // O_t
  std::vector<Frame> edited_full;               // E_t
  std::vector<LatentCode> codes;                // final (shared-latter) codes
  std::vector<NoiseMap> noises;
};

// Everything the per-frame step needs from the episode.
struct FrameInputs {
  const Frame* frame = nullptr;
  AffineTransform transform;
  Mask face_mask;    // M_{I_t}
  Mask edited_mask;  // M_{E_t}; defaults to M_{I_t} (no parser shipped)
};

std::vector<FrameInputs> frame_inputs_for(const Episode& episode,
                                          const RolloutOptions& options,
                                          int aligned_resolution);

// Tape-level rollout for training: one tape across the whole episode so
// gradients flow through the recurrent state and the fed-back frames.
struct RolloutVars {
  std::vector<ad::Var> aligned_input;
  std::vector<ad::Var> inverted_aligned, edited_aligned;
  std::vector<ad::Var> inverted_full, edited_full;
  std::vector<ad::Var> codes, noises;
};

RolloutVars rollout_t(ad::Tape& t, nn::Binder& bind, const Models& models,
                      const std::vector<FrameInputs>& inputs,
                      const SemanticDirection& direction, Scalar strength,
                      const VariantFlags& variant);

// Single-tape inference rollout (the reference driver).
RolloutResult rollout(const Models& models, const Episode& episode,
                      const SemanticDirection& direction, Scalar strength,
                      const RolloutOptions& options = {});

// Constant-memory sequential driver; reproduces rollout bit-exactly.
class StreamInverter {
 public:
  StreamInverter(const Models& models, SemanticDirection direction, Scalar strength,
                 VariantFlags variant = {});

  // Returns (O_t, E_t); outputs depend only on frames pushed so far.
  std::pair<Frame, Frame> push(const Frame& frame, const AffineTransform& transform,
                               const Mask& face_mask);
  std::pair<Frame, Frame> push(const FrameInputs& inputs);

 private:
  const Models& models_;
  SemanticDirection direction_;
  Scalar strength_;
  VariantFlags variant_;
  encoders::RecurrentState state_;
  bool first_ = true;
  Frame prev_aligned_, prev_inverted_a_, prev_edited_a_;
  Matrix shared_latter_;  // fixed by the first frame
};

struct TrainOptions {
  int steps = 200;
  optim::OptimizerParams opt;   // lr defaults to 1e-4
  losses::LossWeights weights;  // α = 0.8, λ = (1, 2, 5)
  std::uint64_t seed = 1;
  Scalar max_edit_strength = 2.0;
  // Eq. 6 flows during training come from the estimator run on the edited
  // frames; this substitutes the episode's original-video flows instead.
  bool edited_flows_from_gt = false;
  VariantFlags variant;
  bool train_generator = false;
  bool train_base_encoder = false;
  flow::EstimatorParams estimator;
  // step, l_rec, l_tc, l_ibfcc, total
  std::function<void(int, Scalar, Scalar, Scalar, Scalar)> on_step;
};

// Trains the recurrent encoder (and optionally generator / base encoder)
// with the full loss. The visibility net must already be trained and
// frozen when λ3 > 0.
void train(Models& models, const std::vector<Episode>& episodes,
           const TrainOptions& options);

struct BaseTrainOptions {
  int steps = 1500;
  optim::OptimizerParams opt{.lr = 1e-3};
  Scalar alpha = 0.8;  // perceptual weight when training through the generator
  std::uint64_t seed = 1;
  std::function<void(int, Scalar)> on_step;
};

// Trains the base encoder alone. Episodes carrying GT latents are fitted by
// code regression; otherwise by reconstruction through the frozen generator.
void train_base_encoder(Models& models, const std::vector<Episode>& episodes,
                        const BaseTrainOptions& options);

struct GeneratorPretrainOptions {
  int steps = 400;
  int batch = 4;
  optim::OptimizerParams opt{.lr = 1e-3};
  std::uint64_t seed = 1;
  std::function<void(int, Scalar)> on_step;
};

// Regresses the generator onto (code, aligned frame) pairs; used to give
// the toy generator a data-bearing range before inversion experiments.
void pretrain_generator(Models& models,
                        const std::vector<std::pair<LatentCode, AlignedFrame>>& pairs,
                        const GeneratorPretrainOptions& options);

}  // namespace rigid::pipeline
