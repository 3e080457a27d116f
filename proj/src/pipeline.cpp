#include "rigid/pipeline.hpp"

#include <cmath>

#include "rigid/flow.hpp"

namespace rigid::pipeline {

void Models::visit(const nn::ParamVisitor& fn) {
  gen.visit("generator", fn);
  base.visit("base_encoder", fn);
  rec.visit("recurrent_encoder", fn);
  visnet.visit("visible_net", fn);
}

namespace {

AffineTransform center_crop_transform(Eigen::Index h, Eigen::Index w, int aligned) {
  const Scalar span = static_cast<Scalar>(std::min(h, w));
  const Scalar s = span / static_cast<Scalar>(aligned);
  AffineTransform t = AffineTransform::identity();
  t.m(0, 0) = s;
  t.m(1, 1) = s;
  t.m(0, 2) = (static_cast<Scalar>(w - 1) - s * (aligned - 1)) / 2.0;
  t.m(1, 2) = (static_cast<Scalar>(h - 1) - s * (aligned - 1)) / 2.0;
  return t;
}

struct StepCarry {
  ad::Var prev_aligned, prev_inverted_a, prev_edited_a;
  ad::Var state_h, state_c;
  ad::Var shared_latter;
  bool first = true;
};

struct StepOutputs {
  ad::Var aligned, inverted_a, edited_a, inverted_full, edited_full, code, noise;
};

StepOutputs rollout_step(ad::Tape& t, nn::Binder& bind, const Models& m,
                         StepCarry& carry, const FrameInputs& in,
                         const Matrix& direction_rows, Scalar strength,
                         const VariantFlags& variant) {
  const auto& gcfg = m.gen.cfg;
  const int R = gcfg.image_resolution;
  const int L = gcfg.latent_layers, D = gcfg.latent_dim, k = gcfg.split_index;
  const int r = gcfg.noise_resolution;
  const int H = static_cast<int>(in.frame->height());
  const int W = static_cast<int>(in.frame->width());

  ad::Var full = t.leaf(in.frame->flat(), ad::Shape::image(3, H, W));
  ad::Var aligned = t.affine_sample(full, in.transform.m, R, R, false);

  if (carry.first) {
    // Bootstrap: the recurrent inputs of the first step are the current
    // aligned frame; the state starts at zero.
    carry.prev_aligned = aligned;
    carry.prev_inverted_a = aligned;
    carry.prev_edited_a = aligned;
    const encoders::RecurrentState zero = encoders::reset_state(m.rec);
    const ad::Shape ss = ad::Shape::image(zero.channels, zero.resolution, zero.resolution);
    carry.state_h = t.leaf(zero.h, ss);
    carry.state_c = t.leaf(zero.c, ss);
  }

  ad::Var initial = encoders::base_encode_t(t, bind, m.base, aligned);

  encoders::RecurrentStepVars rs = encoders::recurrent_step_t(
      t, bind, m.rec, carry.prev_aligned, aligned, carry.prev_inverted_a,
      carry.prev_edited_a, carry.state_h, carry.state_c);
  carry.state_h = rs.h;
  carry.state_c = rs.c;

  ad::Var compensation =
      variant.use_compensation
          ? rs.compensation
          : t.leaf(Array::Zero(static_cast<Eigen::Index>(L) * D), ad::Shape::mat(L, D));
  ad::Var noise = variant.use_noise_map
                      ? rs.noise
                      : t.leaf(Array::Zero(static_cast<Eigen::Index>(r) * r),
                               ad::Shape::image(1, r, r));

  ad::Var code = t.add(initial, compensation);
  ad::Var final_code;
  if (variant.use_lfd) {
    if (carry.first) {
      carry.shared_latter = t.slice(code, 1, k, L - k);
      final_code = code;
    } else {
      final_code = t.concat({t.slice(code, 1, 0, k), carry.shared_latter}, 1);
    }
  } else {
    final_code = code;
  }

  ad::Var inverted_a = generator::synthesize_t(t, bind, m.gen, final_code, noise);
  ad::Var dir = t.leaf(
      generator::LatentCode(direction_rows, k).flat(), ad::Shape::mat(L, D));
  ad::Var edited_code = t.add(final_code, t.scale(dir, strength));
  ad::Var edited_a = generator::synthesize_t(t, bind, m.gen, edited_code, noise);

  // Unalign and blend into the original frame.
  const Eigen::Matrix<Scalar, 2, 3> inv = in.transform.inverse().m;
  ad::Var inv_canvas = t.affine_sample(inverted_a, inv, H, W, true);
  ad::Var edit_canvas = t.affine_sample(edited_a, inv, H, W, true);

  const Mask blend_mask_edit = imaging::mask_union(in.edited_mask, in.face_mask);
  ad::Var m_inv = t.broadcast_channel(
      t.leaf(plane_to_flat(in.face_mask.values), ad::Shape::image(1, H, W)), 3);
  ad::Var m_edit = t.broadcast_channel(
      t.leaf(plane_to_flat(blend_mask_edit.values), ad::Shape::image(1, H, W)), 3);
  ad::Var ones = t.leaf(Array::Ones(static_cast<Eigen::Index>(3) * H * W),
                        ad::Shape::image(3, H, W));

  StepOutputs out;
  out.aligned = aligned;
  out.inverted_a = inverted_a;
  out.edited_a = edited_a;
  out.inverted_full =
      t.add(t.mul(m_inv, inv_canvas), t.mul(t.sub(ones, m_inv), full));
  out.edited_full =
      t.add(t.mul(m_edit, edit_canvas), t.mul(t.sub(ones, m_edit), full));
  out.code = final_code;
  out.noise = noise;

  carry.prev_aligned = aligned;
  carry.prev_inverted_a = inverted_a;
  carry.prev_edited_a = edited_a;
  carry.first = false;
  return out;
}

}  // namespace

std::vector<FrameInputs> frame_inputs_for(const Episode& episode,
                                          const RolloutOptions& options,
                                          int aligned_resolution) {
  if (episode.frames.empty()) throw ShapeError("rollout: empty episode");
  const bool has_gt = episode.gt.has_value() && !episode.gt->transforms.empty();
  if (!has_gt && !options.trivial_alignment_fallback)
    throw MissingPrerequisiteError(
        "rollout: episode has no masks/transforms and no fallback is configured");

  std::vector<FrameInputs> inputs;
  for (std::size_t i = 0; i < episode.frames.size(); ++i) {
    FrameInputs in;
    in.frame = &episode.frames[i];
    if (has_gt) {
      in.transform = episode.gt->transforms[i];
      in.face_mask = episode.gt->face_masks[i];
    } else {
      in.transform = center_crop_transform(episode.frames[i].height(),
                                           episode.frames[i].width(),
                                           aligned_resolution);
      in.face_mask = Mask::constant(episode.frames[i].height(),
                                    episode.frames[i].width(), 1.0);
    }
    in.edited_mask = in.face_mask;
    inputs.push_back(std::move(in));
  }
  return inputs;
}

RolloutVars rollout_t(ad::Tape& t, nn::Binder& bind, const Models& models,
                      const std::vector<FrameInputs>& inputs,
                      const SemanticDirection& direction, Scalar strength,
                      const VariantFlags& variant) {
  RolloutVars out;
  StepCarry carry;
  for (const auto& in : inputs) {
    StepOutputs s =
        rollout_step(t, bind, models, carry, in, direction.rows, strength, variant);
    out.aligned_input.push_back(s.aligned);
    out.inverted_aligned.push_back(s.inverted_a);
    out.edited_aligned.push_back(s.edited_a);
    out.inverted_full.push_back(s.inverted_full);
    out.edited_full.push_back(s.edited_full);
    out.codes.push_back(s.code);
    out.noises.push_back(s.noise);
  }
  return out;
}

RolloutResult rollout(const Models& models, const Episode& episode,
                      const SemanticDirection& direction, Scalar strength,
                      const RolloutOptions& options) {
  const auto& gcfg = models.gen.cfg;
  const std::vector<FrameInputs> inputs =
      frame_inputs_for(episode, options, gcfg.image_resolution);

  ad::Tape t;
  nn::Binder bind(t);
  RolloutVars rv =
      rollout_t(t, bind, models, inputs, direction, strength, options.variant);

  RolloutResult res;
  const int R = gcfg.image_resolution;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Eigen::Index h = inputs[i].frame->height(), w = inputs[i].frame->width();
    AlignedFrame ia, oa, ea;
    ia.pixels = Frame::from_flat(t.value(rv.aligned_input[i]), R, R);
    ia.source_transform = inputs[i].transform;
    oa.pixels = Frame::from_flat(t.value(rv.inverted_aligned[i]), R, R);
    oa.source_transform = inputs[i].transform;
    ea.pixels = Frame::from_flat(t.value(rv.edited_aligned[i]), R, R);
    ea.source_transform = inputs[i].transform;
    res.aligned_input.push_back(std::move(ia));
    res.inverted_aligned.push_back(std::move(oa));
    res.edited_aligned.push_back(std::move(ea));
    res.inverted_full.push_back(Frame::from_flat(t.value(rv.inverted_full[i]), h, w));
    res.edited_full.push_back(Frame::from_flat(t.value(rv.edited_full[i]), h, w));
    res.codes.push_back(LatentCode::from_flat(t.value(rv.codes[i]), gcfg.latent_layers,
                                              gcfg.latent_dim, gcfg.split_index));
    res.noises.push_back(
        NoiseMap::from_flat(t.value(rv.noises[i]), gcfg.noise_resolution));
  }
  return res;
}

StreamInverter::StreamInverter(const Models& models, SemanticDirection direction,
                               Scalar strength, VariantFlags variant)
    : models_(models),
      direction_(std::move(direction)),
      strength_(strength),
      variant_(variant),
      state_(encoders::reset_state(models.rec)) {}

std::pair<Frame, Frame> StreamInverter::push(const Frame& frame,
                                             const AffineTransform& transform,
                                             const Mask& face_mask) {
  FrameInputs in;
  in.frame = &frame;
  in.transform = transform;
  in.face_mask = face_mask;
  in.edited_mask = face_mask;
  return push(in);
}

std::pair<Frame, Frame> StreamInverter::push(const FrameInputs& in) {
  const auto& gcfg = models_.gen.cfg;
  const int R = gcfg.image_resolution;
  const int L = gcfg.latent_layers, D = gcfg.latent_dim, k = gcfg.split_index;

  ad::Tape t;
  nn::Binder bind(t);
  StepCarry carry;
  if (!first_) {
    carry.first = false;
    carry.prev_aligned = t.leaf(prev_aligned_.flat(), prev_aligned_.ad_shape());
    carry.prev_inverted_a =
        t.leaf(prev_inverted_a_.flat(), prev_inverted_a_.ad_shape());
    carry.prev_edited_a = t.leaf(prev_edited_a_.flat(), prev_edited_a_.ad_shape());
    const ad::Shape ss =
        ad::Shape::image(state_.channels, state_.resolution, state_.resolution);
    carry.state_h = t.leaf(state_.h, ss);
    carry.state_c = t.leaf(state_.c, ss);
    Array latter(static_cast<Eigen::Index>(L - k) * D);
    for (int i = 0; i < L - k; ++i)
      for (int j = 0; j < D; ++j) latter[i * D + j] = shared_latter_(i, j);
    carry.shared_latter = t.leaf(std::move(latter), ad::Shape::mat(L - k, D));
  }

  StepOutputs s =
      rollout_step(t, bind, models_, carry, in, direction_.rows, strength_, variant_);

  prev_aligned_ = Frame::from_flat(t.value(s.aligned), R, R);
  prev_inverted_a_ = Frame::from_flat(t.value(s.inverted_a), R, R);
  prev_edited_a_ = Frame::from_flat(t.value(s.edited_a), R, R);
  state_.h = t.value(carry.state_h);
  state_.c = t.value(carry.state_c);
  if (first_ && variant_.use_lfd) {
    const Array latter = t.value(carry.shared_latter);
    shared_latter_ = Matrix(L - k, D);
    for (int i = 0; i < L - k; ++i)
      for (int j = 0; j < D; ++j) shared_latter_(i, j) = latter[i * D + j];
  } else if (first_) {
    shared_latter_ = Matrix::Zero(L - k, D);
  }
  first_ = false;

  return {Frame::from_flat(t.value(s.inverted_full), in.frame->height(),
                           in.frame->width()),
          Frame::from_flat(t.value(s.edited_full), in.frame->height(),
                           in.frame->width())};
}

namespace {

// Per-episode constants reused across training steps.
struct EpisodeCache {
  std::vector<FrameInputs> inputs;
  std::vector<FlowField> tc_flows;  // f_{(j+1)⇒j}
};

EpisodeCache make_cache(const Episode& ep, int aligned_res,
                        const flow::EstimatorParams& est) {
  EpisodeCache c;
  c.inputs = frame_inputs_for(ep, RolloutOptions{}, aligned_res);
  if (ep.gt && !ep.gt->flows_to_prev.empty()) {
    c.tc_flows = ep.gt->flows_to_prev;
  } else {
    for (std::size_t j = 0; j + 1 < ep.frames.size(); ++j)
      c.tc_flows.push_back(flow::estimate_flow(ep.frames[j + 1], ep.frames[j], est));
  }
  return c;
}

Matrix random_unit_direction(Rng& rng, int layers, int dim) {
  Matrix m(layers, dim);
  for (int i = 0; i < layers; ++i)
    for (int j = 0; j < dim; ++j) m(i, j) = rng.normal();
  return m / m.norm();
}

}  // namespace

void train(Models& models, const std::vector<Episode>& episodes,
           const TrainOptions& options) {
  if (episodes.empty()) throw ShapeError("train: empty episode stream");
  const bool use_ibfcc = options.weights.lambda3 > 0.0;
  if (use_ibfcc && !models.visnet.frozen)
    throw MissingPrerequisiteError("train: visibility net must be trained and frozen");
  for (const auto& ep : episodes)
    if (use_ibfcc && ep.length() < 3)
      throw ShapeError("train: episodes must have T >= 3 when lambda3 > 0");

  std::vector<nn::Param*> params;
  models.rec.trainable(params);
  if (options.train_generator) models.gen.trainable(params);
  if (options.train_base_encoder) models.base.trainable(params);
  optim::Adam adam(params, options.opt);
  const auto trainable = adam.trainable_set();

  const int aligned_res = models.gen.cfg.image_resolution;
  std::vector<EpisodeCache> caches;
  caches.reserve(episodes.size());
  for (const auto& ep : episodes)
    caches.push_back(make_cache(ep, aligned_res, options.estimator));

  Rng rng(derive_seed(options.seed, "train"));
  const int L = models.gen.cfg.latent_layers, D = models.gen.cfg.latent_dim;

  for (int step = 0; step < options.steps; ++step) {
    const int idx = rng.uniform_int(static_cast<int>(episodes.size()));
    const Episode& ep = episodes[idx];
    const EpisodeCache& cache = caches[idx];

    SemanticDirection dir;
    dir.rows = random_unit_direction(rng, L, D);
    dir.name = "train";
    const Scalar strength =
        rng.uniform(-options.max_edit_strength, options.max_edit_strength);

    ad::Tape t;
    nn::Binder bind(t, &trainable);
    RolloutVars rv =
        rollout_t(t, bind, models, cache.inputs, dir, strength, options.variant);

    ad::Var l_rec = losses::reconstruction_loss_t(
        t, bind, rv.inverted_aligned, rv.aligned_input, models.perceptual,
        options.weights.alpha);

    std::vector<ad::Var> originals;
    for (const auto& in : cache.inputs)
      originals.push_back(t.leaf(in.frame->flat(), in.frame->ad_shape()));
    ad::Var l_tc =
        losses::temporal_consistency_loss_t(t, originals, rv.inverted_full,
                                            cache.tc_flows);

    ad::Var l_ibfcc = t.scalar(0.0);
    if (use_ibfcc) {
      std::vector<FlowField> fp, fn;
      if (options.edited_flows_from_gt && ep.gt && !ep.gt->flows_to_prev.empty()) {
        fp = ep.gt->flows_to_prev;
        fn = ep.gt->flows_to_next;
      } else {
        std::vector<Frame> edited;
        for (std::size_t i = 0; i < rv.edited_full.size(); ++i)
          edited.push_back(Frame::from_flat(t.value(rv.edited_full[i]),
                                            ep.frames[i].height(),
                                            ep.frames[i].width()));
        for (std::size_t j = 0; j + 1 < edited.size(); ++j) {
          fp.push_back(flow::estimate_flow(edited[j + 1], edited[j], options.estimator));
          fn.push_back(flow::estimate_flow(edited[j], edited[j + 1], options.estimator));
        }
      }
      l_ibfcc = composition::ibfcc_loss_t(t, bind, rv.edited_full, fp, fn,
                                          models.visnet);
    }

    ad::Var total = losses::total_loss_t(t, l_rec, l_tc, l_ibfcc, options.weights);
    if (!std::isfinite(t.value_scalar(total)))
      throw NumericalError("train: non-finite loss");
    t.backward(total);
    adam.step(bind);

    if (options.on_step)
      options.on_step(step, t.value_scalar(l_rec), t.value_scalar(l_tc),
                      t.value_scalar(l_ibfcc), t.value_scalar(total));
  }
}

void train_base_encoder(Models& models, const std::vector<Episode>& episodes,
                        const BaseTrainOptions& options) {
  if (episodes.empty()) throw ShapeError("train_base_encoder: empty episode stream");
  std::vector<nn::Param*> params;
  models.base.trainable(params);
  optim::Adam adam(params, options.opt);
  const auto trainable = adam.trainable_set();
  const auto& gcfg = models.gen.cfg;
  const int R = gcfg.image_resolution;

  // Aligned targets (and GT codes when present) are constants.
  struct Sample {
    Frame aligned;
    bool has_code = false;
    LatentCode code;
  };
  std::vector<Sample> samples;
  for (const auto& ep : episodes) {
    const auto inputs = frame_inputs_for(ep, RolloutOptions{}, R);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      Sample s;
      s.aligned = imaging::align(*inputs[i].frame, inputs[i].transform, R).pixels;
      if (ep.gt && !ep.gt->latents.empty()) {
        s.has_code = true;
        s.code = ep.gt->latents[i];
      }
      samples.push_back(std::move(s));
    }
  }

  Rng rng(derive_seed(options.seed, "base_train"));
  const Array zero_noise =
      Array::Zero(static_cast<Eigen::Index>(gcfg.noise_resolution) *
                  gcfg.noise_resolution);
  for (int step = 0; step < options.steps; ++step) {
    const Sample& s = samples[rng.uniform_int(static_cast<int>(samples.size()))];
    ad::Tape t;
    nn::Binder bind(t, &trainable);
    ad::Var frame = t.leaf(s.aligned.flat(), s.aligned.ad_shape());
    ad::Var code = encoders::base_encode_t(t, bind, models.base, frame);
    ad::Var loss;
    if (s.has_code) {
      loss = t.mse(code, t.leaf(s.code.flat(),
                                ad::Shape::mat(gcfg.latent_layers, gcfg.latent_dim)));
    } else {
      ad::Var noise = t.leaf(zero_noise, ad::Shape::image(1, gcfg.noise_resolution,
                                                          gcfg.noise_resolution));
      ad::Var img = generator::synthesize_t(t, bind, models.gen, code, noise);
      loss = t.mse(img, frame);
      if (options.alpha != 0.0)
        loss = t.add(loss, t.scale(losses::perceptual_distance_t(
                                       t, bind, models.perceptual, img, frame),
                                   options.alpha));
    }
    if (!std::isfinite(t.value_scalar(loss)))
      throw NumericalError("train_base_encoder: non-finite loss");
    t.backward(loss);
    adam.step(bind);
    if (options.on_step) options.on_step(step, t.value_scalar(loss));
  }
}

void pretrain_generator(Models& models,
                        const std::vector<std::pair<LatentCode, AlignedFrame>>& pairs,
                        const GeneratorPretrainOptions& options) {
  if (pairs.empty()) throw ShapeError("pretrain_generator: empty pair set");
  std::vector<nn::Param*> params;
  models.gen.trainable(params);
  optim::Adam adam(params, options.opt);
  const auto trainable = adam.trainable_set();
  const auto& gcfg = models.gen.cfg;
  Rng rng(derive_seed(options.seed, "gen_pretrain"));
  const Array zero_noise =
      Array::Zero(static_cast<Eigen::Index>(gcfg.noise_resolution) *
                  gcfg.noise_resolution);

  for (int step = 0; step < options.steps; ++step) {
    ad::Tape t;
    nn::Binder bind(t, &trainable);
    ad::Var noise = t.leaf(zero_noise, ad::Shape::image(1, gcfg.noise_resolution,
                                                        gcfg.noise_resolution));
    ad::Var loss = t.scalar(0.0);
    for (int b = 0; b < options.batch; ++b) {
      const auto& [code, target] = pairs[rng.uniform_int(static_cast<int>(pairs.size()))];
      ad::Var c = t.leaf(code.flat(),
                         ad::Shape::mat(gcfg.latent_layers, gcfg.latent_dim));
      ad::Var img = generator::synthesize_t(t, bind, models.gen, c, noise);
      loss = t.add(loss, t.mse(img, t.leaf(target.pixels.flat(),
                                           target.pixels.ad_shape())));
    }
    if (!std::isfinite(t.value_scalar(loss)))
      throw NumericalError("pretrain_generator: non-finite loss");
    t.backward(loss);
    adam.step(bind);
    if (options.on_step) options.on_step(step, t.value_scalar(loss));
  }
}

}  // namespace rigid::pipeline
