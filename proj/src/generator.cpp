#include "rigid/generator.hpp"

#include <cmath>

namespace rigid::generator {

ModulatedConv ModulatedConv::make(int in_ch, int out_ch, int latent_dim, Rng& rng) {
  ModulatedConv m;
  m.in_ch = in_ch;
  m.out_ch = out_ch;
  const Scalar std = std::sqrt(1.0 / (in_ch * m.k * m.k));
  m.w = nn::make_param(rng, ad::Shape::mat(out_ch, in_ch * m.k * m.k), std);
  m.b = nn::zeros_param(ad::Shape::vec(out_ch));
  m.aff_w = nn::make_param(rng, ad::Shape::mat(in_ch, latent_dim),
                           std::sqrt(1.0 / latent_dim) * 0.25);
  m.aff_b = nn::const_param(ad::Shape::vec(in_ch), 1.0);
  return m;
}

ad::Var ModulatedConv::operator()(ad::Tape& t, nn::Binder& bind, ad::Var x,
                                  ad::Var style_row) const {
  // style scales
  const int latent_dim = static_cast<int>(t.shape(style_row).size());
  ad::Var row_col = t.reshape(style_row, ad::Shape::mat(latent_dim, 1));
  ad::Var s = t.add(t.reshape(t.matmul(bind(aff_w), row_col), ad::Shape::vec(in_ch)),
                    bind(aff_b));
  ad::Var y = t.conv2d(t.channel_scale(x, s), bind(w), bind(b), k, k, 1, 1);
  // demodulation: per-output-channel rescale by rsqrt(Σ (w·s)²)
  ad::Var s2 = t.reshape(t.repeat_each(t.square(s), k * k),
                         ad::Shape::mat(in_ch * k * k, 1));
  ad::Var denom = t.reshape(t.matmul(t.square(bind(w)), s2), ad::Shape::vec(out_ch));
  ad::Var d = t.rsqrt(denom, 1e-8);
  return t.leaky_relu(t.channel_scale(y, d), 0.2);
}

void ModulatedConv::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
  fn(prefix + ".w", w);
  fn(prefix + ".b", b);
  fn(prefix + ".aff_w", aff_w);
  fn(prefix + ".aff_b", aff_b);
}

void ModulatedConv::trainable(std::vector<nn::Param*>& out) {
  out.push_back(&w);
  out.push_back(&b);
  out.push_back(&aff_w);
  out.push_back(&aff_b);
}

int GeneratorWeights::channels_at(int resolution) const {
  const int ch = cfg.base_channels * 16 / std::max(resolution, 1);
  return std::max(8, std::min(ch, cfg.base_channels));
}

GeneratorWeights GeneratorWeights::make(const GeneratorConfig& cfg) {
  if (cfg.image_resolution < 4 || (cfg.image_resolution & (cfg.image_resolution - 1)))
    throw ConfigError("generator: image_resolution must be a power of two ≥ 4");
  if (cfg.split_index < 1 || cfg.split_index >= cfg.latent_layers)
    throw ConfigError("generator: split_index must lie in [1, latent_layers)");

  GeneratorWeights g;
  g.cfg = cfg;
  Rng rng(derive_seed(cfg.seed, "generator"));

  int levels = 0;
  for (int r = 4; r <= cfg.image_resolution; r *= 2) ++levels;
  if (cfg.latent_layers < levels)
    throw ConfigError("generator: need at least one latent row per resolution level");

  // Distribute L layers over the resolution ladder, larger groups first.
  std::vector<int> group(levels, cfg.latent_layers / levels);
  for (int i = 0; i < cfg.latent_layers % levels; ++i) ++group[i];

  g.constant = nn::make_param(rng, ad::Shape::image(g.channels_at(4), 4, 4), 1.0);

  int res = 4;
  int prev_ch = g.channels_at(4);
  g.noise_layer = -1;
  for (int lev = 0; lev < levels; ++lev) {
    const int ch = g.channels_at(res);
    for (int j = 0; j < group[lev]; ++j) {
      g.layers.push_back(ModulatedConv::make(prev_ch, ch, cfg.latent_dim, rng));
      g.layer_resolution.push_back(res);
      prev_ch = ch;
      if (res == cfg.noise_resolution && g.noise_layer < 0)
        g.noise_layer = static_cast<int>(g.layers.size()) - 1;
    }
    res *= 2;
  }
  if (g.noise_layer < 0)
    throw ConfigError("generator: noise_resolution does not match any level");

  g.noise_gain =
      nn::const_param(ad::Shape::vec(g.channels_at(cfg.noise_resolution)), 0.3);
  g.to_rgb = nn::Conv2d::make(prev_ch, 3, 1, 1, 0, rng);
  return g;
}

void GeneratorWeights::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
  fn(prefix + ".constant", constant);
  for (std::size_t i = 0; i < layers.size(); ++i)
    layers[i].visit(prefix + ".layer" + std::to_string(i), fn);
  fn(prefix + ".noise_gain", noise_gain);
  to_rgb.visit(prefix + ".to_rgb", fn);
}

void GeneratorWeights::trainable(std::vector<nn::Param*>& out) {
  out.push_back(&constant);
  for (auto& l : layers) l.trainable(out);
  out.push_back(&noise_gain);
  to_rgb.trainable(out);
}

ad::Var synthesize_t(ad::Tape& t, nn::Binder& bind, const GeneratorWeights& g,
                     ad::Var code, ad::Var noise,
                     std::vector<Array>* activations) {
  const ad::Shape cs = t.shape(code);
  if (cs.d1 != g.cfg.latent_layers || cs.d2 != g.cfg.latent_dim)
    throw ShapeError("synthesize: code shape mismatch");
  const ad::Shape ns = t.shape(noise);
  if (ns.d0 != 1 || ns.d1 != g.cfg.noise_resolution || ns.d2 != g.cfg.noise_resolution)
    throw ShapeError("synthesize: noise map resolution mismatch");

  ad::Var x = bind(g.constant);
  int cur_res = 4;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    if (g.layer_resolution[i] > cur_res) {
      x = t.upsample2x(x);
      cur_res = g.layer_resolution[i];
    }
    ad::Var row = t.reshape(t.slice(code, 1, static_cast<int>(i), 1),
                            ad::Shape::vec(g.cfg.latent_dim));
    x = g.layers[i](t, bind, x, row);
    if (static_cast<int>(i) == g.noise_layer) {
      ad::Var nb = t.broadcast_channel(noise, t.shape(x).d0);
      x = t.add(x, t.channel_scale(nb, bind(g.noise_gain)));
    }
    if (activations) activations->push_back(t.value(x));
  }
  ad::Var rgb = t.tanh(g.to_rgb(t, bind, x));
  if (activations) activations->push_back(t.value(rgb));
  return rgb;
}

AlignedFrame synthesize(const GeneratorWeights& g, const LatentCode& code,
                        const NoiseMap& noise, std::vector<Array>* activations) {
  if (code.layers() != g.cfg.latent_layers || code.dim() != g.cfg.latent_dim)
    throw ShapeError("synthesize: code dimensions do not match generator");
  if (noise.resolution() != g.cfg.noise_resolution)
    throw ShapeError("synthesize: noise map resolution mismatch");
  ad::Tape t;
  nn::Binder bind(t);
  ad::Var c = t.leaf(code.flat(), ad::Shape::mat(code.layers(), code.dim()));
  ad::Var n = t.leaf(noise.flat(),
                     ad::Shape::image(1, g.cfg.noise_resolution, g.cfg.noise_resolution));
  ad::Var img = synthesize_t(t, bind, g, c, n, activations);
  AlignedFrame out;
  out.pixels =
      Frame::from_flat(t.value(img), g.cfg.image_resolution, g.cfg.image_resolution);
  return out;
}

std::vector<LatentCode> latent_frequency_disentangle(
    const std::vector<LatentCode>& codes) {
  if (codes.empty())
    throw ShapeError("latent_frequency_disentangle: empty sequence");
  const int L = codes[0].layers(), D = codes[0].dim(), k = codes[0].split;
  for (const auto& c : codes)
    if (c.layers() != L || c.dim() != D || c.split != k)
      throw ShapeError("latent_frequency_disentangle: mismatched codes");
  std::vector<LatentCode> out;
  out.reserve(codes.size());
  for (const auto& c : codes) {
    LatentCode o = c;
    o.rows.bottomRows(L - k) = codes[0].rows.bottomRows(L - k);
    out.push_back(std::move(o));
  }
  return out;
}

LatentCode apply_edit(const LatentCode& code, const SemanticDirection& direction,
                      Scalar strength) {
  if (direction.rows.rows() != code.rows.rows() ||
      direction.rows.cols() != code.rows.cols())
    throw ShapeError("apply_edit: direction shape mismatch");
  LatentCode out = code;
  out.rows = code.rows + strength * direction.rows;
  return out;
}

SemanticDirection learn_direction(const std::vector<LatentCode>& codes_pos,
                                  const std::vector<LatentCode>& codes_neg) {
  if (codes_pos.empty() || codes_neg.empty())
    throw ShapeError("learn_direction: empty code set");
  Matrix mean_pos = Matrix::Zero(codes_pos[0].layers(), codes_pos[0].dim());
  for (const auto& c : codes_pos) mean_pos += c.rows;
  mean_pos /= static_cast<Scalar>(codes_pos.size());
  Matrix mean_neg = Matrix::Zero(codes_neg[0].layers(), codes_neg[0].dim());
  for (const auto& c : codes_neg) mean_neg += c.rows;
  mean_neg /= static_cast<Scalar>(codes_neg.size());

  Matrix diff = mean_pos - mean_neg;
  const Scalar norm = diff.norm();
  if (norm < 1e-12)
    throw NumericalError("learn_direction: zero direction (identical code sets)");
  SemanticDirection dir;
  dir.rows = diff / norm;
  dir.name = "learned";
  return dir;
}

}  // namespace rigid::generator
