#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rigid/generator.hpp"
#include "rigid/image.hpp"

namespace rigid {

// Per-frame ground truth carried by synthetic episodes. Flow list j
// connects frames j and j+1:
//   flows_to_prev[j] = flow from frame j+1 toward frame j
//   flows_to_next[j] = flow from frame j toward frame j+1
struct EpisodeGT {
  std::vector<generator::LatentCode> latents;  // empty unless generator-native
  std::vector<NoiseMap> noises;                // empty unless generator-native
  std::vector<FlowField> flows_to_prev;
  std::vector<FlowField> flows_to_next;
  std::vector<Mask> face_masks;
  std::vector<AffineTransform> transforms;
  // visibility_from_prev[j]: binary map on frame j+1's grid, 1 where the
  // content was visible in frame j
  std::vector<Plane> visibility_from_prev;
  std::map<std::string, Scalar> attributes;
};

// Fixed-length consecutive-frame unit of training and evaluation.
struct Episode {
  std::vector<Frame> frames;
  std::optional<EpisodeGT> gt;
  int aligned_resolution = 32;

  int length() const { return static_cast<int>(frames.size()); }
};

}  // namespace rigid
