#pragma once

// Style-modulated convolutional generator with per-layer latent rows and a
// single spatial noise injection, plus latent-space editing helpers.

#include <vector>

#include "rigid/image.hpp"
#include "rigid/nn.hpp"

namespace rigid::generator {

// Layerwise latent code; rows [0, split) form the former part, rows
// [split, layers) the latter part.
struct LatentCode {
  Matrix rows;  // L×D
  int split = 0;

  LatentCode() = default;
  LatentCode(Matrix r, int s) : rows(std::move(r)), split(s) {
    if (split < 1 || split >= rows.rows())
      throw ShapeError("LatentCode: split index out of range");
  }
  int layers() const { return static_cast<int>(rows.rows()); }
  int dim() const { return static_cast<int>(rows.cols()); }

  Array flat() const {
    Array out(rows.size());
    for (int i = 0; i < rows.rows(); ++i)
      for (int j = 0; j < rows.cols(); ++j) out[i * rows.cols() + j] = rows(i, j);
    return out;
  }
  static LatentCode from_flat(const Array& a, int layers, int dim, int split) {
    require_shape(a.size() == static_cast<Eigen::Index>(layers) * dim,
                  "LatentCode::from_flat: size mismatch");
    Matrix m(layers, dim);
    for (int i = 0; i < layers; ++i)
      for (int j = 0; j < dim; ++j) m(i, j) = a[i * dim + j];
    return LatentCode(std::move(m), split);
  }
};

struct SemanticDirection {
  Matrix rows;  // L×D
  std::string name;
};

struct GeneratorConfig {
  int image_resolution = 32;
  int latent_layers = 14;
  int latent_dim = 64;
  int split_index = 10;
  int noise_resolution = 4;  // max(4, image_resolution/8)
  int base_channels = 32;
  std::uint64_t seed = 1;
};

// One style-modulated 3×3 convolution: the style row is mapped to
// per-input-channel scales, the convolution output is demodulated per
// output channel, then bias and a leaky rectifier are applied.
struct ModulatedConv {
  nn::Param w;      // (out, in*k*k)
  nn::Param b;      // (out)
  nn::Param aff_w;  // (in, D)
  nn::Param aff_b;  // (in), init 1 so styles start near identity
  int in_ch = 0, out_ch = 0, k = 3;

  static ModulatedConv make(int in_ch, int out_ch, int latent_dim, Rng& rng);
  // style_row: vec(D)
  ad::Var operator()(ad::Tape& t, nn::Binder& bind, ad::Var x, ad::Var style_row) const;
  void visit(const std::string& prefix, const nn::ParamVisitor& fn);
  void trainable(std::vector<nn::Param*>& out);
};

struct GeneratorWeights {
  GeneratorConfig cfg;
  nn::Param constant;  // learned 4×4 input tensor
  std::vector<ModulatedConv> layers;
  std::vector<int> layer_resolution;  // resolution each layer operates at
  int noise_layer = 0;                // noise is added after this layer
  nn::Param noise_gain;               // per-channel gain at the noise layer
  nn::Conv2d to_rgb;                  // fixed 1×1 projection, tanh output

  static GeneratorWeights make(const GeneratorConfig& cfg);
  void visit(const std::string& prefix, const nn::ParamVisitor& fn);
  void trainable(std::vector<nn::Param*>& out);
  int channels_at(int resolution) const;
};

// Tape-level synthesis; code: mat(L,D), noise: (1,r,r). Returns (3,R,R)
// image in (-1,1). Per-layer post-activation tensors are written to
// `activations` when provided (used by structural tests).
ad::Var synthesize_t(ad::Tape& t, nn::Binder& bind, const GeneratorWeights& g,
                     ad::Var code, ad::Var noise,
                     std::vector<Array>* activations = nullptr);

AlignedFrame synthesize(const GeneratorWeights& g, const LatentCode& code,
                        const NoiseMap& noise,
                        std::vector<Array>* activations = nullptr);

// Output t keeps its own former rows and takes the latter rows of input 1,
// bit-exactly. Output 1 equals input 1.
std::vector<LatentCode> latent_frequency_disentangle(
    const std::vector<LatentCode>& codes);

// rows + strength · direction.rows
LatentCode apply_edit(const LatentCode& code, const SemanticDirection& direction,
                      Scalar strength);

// mean(pos) − mean(neg), Frobenius-normalized. Throws on empty inputs and
// on a zero difference of means.
SemanticDirection learn_direction(const std::vector<LatentCode>& codes_pos,
                                  const std::vector<LatentCode>& codes_neg);

}  // namespace rigid::generator
