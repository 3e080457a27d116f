#pragma once

// Procedural "face" video generator with exact ground truth: flows derived
// analytically from the layer motions, alignment transforms from the face
// pose, masks and per-pair visibility labels from layer geometry.
//
// A scene is three z-ordered layers: a static textured background, a face
// (ellipse head, two eyes, mouth curve) moving under a similarity
// transform, and an optional sliding square occluder on top.

#include "rigid/episode.hpp"

namespace rigid::synthdata {

struct SceneParams {
  int T = 6;
  int resolution = 64;          // full frame, square
  int aligned_resolution = 32;  // crop resolution

  // face pose trajectory: smooth in t
  Eigen::Vector2d center_start{32, 32};
  Eigen::Vector2d center_velocity{0, 0};
  Scalar wiggle_amplitude = 0.0;
  Scalar wiggle_frequency = 0.9;
  Scalar wiggle_phase = 0.0;
  Scalar scale_start = 1.0;
  Scalar scale_delta = 0.0;  // per frame
  Scalar angle_start = 0.0;
  Scalar angle_delta = 0.0;  // radians per frame

  // attribute scalars in [0,1]
  Scalar face_width = 0.5;
  Scalar mouth_curvature = 0.5;
  Scalar eye_openness = 0.8;

  std::uint64_t texture_seed = 1;

  bool occluder = false;
  Eigen::Vector2d occluder_start{0, 0};
  Eigen::Vector2d occluder_velocity{0, 0};
  Scalar occluder_half_size = 8.0;

  // Deterministic scene with bounded per-frame motion.
  static SceneParams random(std::uint64_t seed, int T, int resolution,
                            int aligned_resolution, bool with_occluder);
};

// Face pose at frame t: maps aligned-crop coordinates to frame coordinates.
AffineTransform face_pose(const SceneParams& p, int t);

// Renders the episode with full ground truth. Throws ConfigError when the
// trajectory is invalid (non-positive scale or per-frame jumps larger than
// a quarter of the frame).
Episode render_episode(const SceneParams& params);

// Frames are generator outputs for the given code trajectory; alignment is
// the identity, masks are full. Codes and noises are recorded as GT.
Episode render_oracle_episode(const generator::GeneratorWeights& gen,
                              const std::vector<generator::LatentCode>& codes,
                              const std::vector<NoiseMap>& noises);

// Smooth code trajectories for oracle episodes: a shared anchor code, a
// per-episode offset inside a fixed low-dimensional subspace, and a small
// in-subspace random walk over time. Latter rows are constant in t.
std::vector<generator::LatentCode> sample_oracle_code_trajectory(
    std::uint64_t seed, int T, int layers, int dim, int split);

std::vector<NoiseMap> sample_oracle_noises(std::uint64_t seed, int T, int resolution,
                                           Scalar stddev = 0.5);

}  // namespace rigid::synthdata
