#include "rigid/synthdata.hpp"

#include <cmath>

namespace rigid::synthdata {

namespace {

Scalar smoothstep01(Scalar e) {
  e = std::min(std::max(e, Scalar(0)), Scalar(1));
  return e * e * (3.0 - 2.0 * e);
}

// Soft coverage from a signed distance (negative inside), ~1.5 px edge.
Scalar alpha_from_sdf(Scalar d) { return smoothstep01(0.5 - d / 1.5); }

// Bandlimited texture: a handful of sinusoids with wavelengths ≥ 8 px, so
// bilinear resampling stays within the documented tolerance.
struct Texture {
  struct Wave {
    Scalar ux, uy, phase, amp;
  };
  std::array<std::vector<Wave>, 3> waves;
  std::array<Scalar, 3> base;

  static Texture make(Rng& rng, std::array<Scalar, 3> base, Scalar amp) {
    Texture t;
    t.base = base;
    for (int c = 0; c < 3; ++c) {
      for (int k = 0; k < 4; ++k) {
        const Scalar wavelength = rng.uniform(9.0, 24.0);
        const Scalar dir = rng.uniform(0.0, 2.0 * EIGEN_PI);
        Wave w;
        w.ux = std::cos(dir) * 2.0 * EIGEN_PI / wavelength;
        w.uy = std::sin(dir) * 2.0 * EIGEN_PI / wavelength;
        w.phase = rng.uniform(0.0, 2.0 * EIGEN_PI);
        w.amp = amp * rng.uniform(0.5, 1.0) / 4.0;
        t.waves[c].push_back(w);
      }
    }
    return t;
  }

  Scalar eval(int c, Scalar x, Scalar y) const {
    Scalar v = base[c];
    for (const auto& w : waves[c]) v += w.amp * std::sin(w.ux * x + w.uy * y + w.phase);
    return v;
  }
};

struct FaceGeometry {
  Scalar cx, cy;          // crop center
  Scalar head_rx, head_ry;
  Scalar eye_dx, eye_dy, eye_rx, eye_ry;
  Scalar mouth_y, mouth_half, mouth_bend, mouth_thick;

  static FaceGeometry from(const SceneParams& p) {
    const Scalar a = static_cast<Scalar>(p.aligned_resolution);
    FaceGeometry g;
    g.cx = (a - 1.0) / 2.0;
    g.cy = (a - 1.0) / 2.0;
    g.head_rx = a * (0.22 + 0.16 * p.face_width);
    g.head_ry = a * 0.36;
    g.eye_dx = a * 0.13;
    g.eye_dy = -a * 0.10;
    g.eye_rx = a * 0.055;
    g.eye_ry = a * 0.055 * (0.25 + 0.75 * p.eye_openness);
    g.mouth_y = a * 0.14;
    g.mouth_half = a * 0.15;
    g.mouth_bend = (p.mouth_curvature - 0.5) * a * 0.12;
    g.mouth_thick = a * 0.030;
    return g;
  }

  Scalar head_sdf(Scalar x, Scalar y) const {
    const Scalar dx = (x - cx) / head_rx, dy = (y - cy) / head_ry;
    return (std::sqrt(dx * dx + dy * dy) - 1.0) * std::min(head_rx, head_ry);
  }
  Scalar eye_sdf(Scalar x, Scalar y, int side) const {
    const Scalar ex = cx + side * eye_dx, ey = cy + eye_dy;
    const Scalar dx = (x - ex) / eye_rx, dy = (y - ey) / eye_ry;
    return (std::sqrt(dx * dx + dy * dy) - 1.0) * std::min(eye_rx, eye_ry);
  }
  Scalar mouth_sdf(Scalar x, Scalar y) const {
    const Scalar mx = x - cx;
    if (std::abs(mx) > mouth_half)
      return std::abs(mx) - mouth_half + mouth_thick;
    const Scalar u = mx / mouth_half;
    const Scalar curve_y = cy + mouth_y + mouth_bend * (u * u - 0.5);
    return std::abs(y - curve_y) - mouth_thick;
  }
};

struct Pose {
  AffineTransform to_frame;  // crop → frame
  AffineTransform to_local;  // frame → crop
};

Pose pose_at(const SceneParams& p, int t) {
  const Scalar s = p.scale_start + p.scale_delta * t;
  const Scalar ang = p.angle_start + p.angle_delta * t;
  const Scalar wx =
      p.wiggle_amplitude * std::sin(p.wiggle_frequency * t + p.wiggle_phase);
  const Scalar wy = p.wiggle_amplitude * std::cos(0.8 * p.wiggle_frequency * t + 0.3);
  const Eigen::Vector2d center =
      p.center_start + p.center_velocity * static_cast<Scalar>(t) +
      Eigen::Vector2d(wx, wy);
  const Scalar cc = (p.aligned_resolution - 1.0) / 2.0;
  AffineTransform rot = AffineTransform::similarity(s, ang, 0, 0);
  const Eigen::Vector2d shifted = rot.apply(cc, cc);
  Pose out;
  out.to_frame = AffineTransform::similarity(s, ang, center.x() - shifted.x(),
                                             center.y() - shifted.y());
  out.to_local = out.to_frame.inverse();
  return out;
}

Eigen::Vector2d occluder_center(const SceneParams& p, int t) {
  return p.occluder_start + p.occluder_velocity * static_cast<Scalar>(t);
}

Scalar square_sdf(Scalar x, Scalar y, const Eigen::Vector2d& c, Scalar half) {
  return std::max(std::abs(x - c.x()), std::abs(y - c.y())) - half;
}

void validate(const SceneParams& p) {
  if (p.T < 1) throw ConfigError("render_episode: T must be positive");
  for (int t = 0; t < p.T; ++t) {
    const Scalar s = p.scale_start + p.scale_delta * t;
    if (s < 0.2 || s > 5.0)
      throw ConfigError("render_episode: scale trajectory leaves [0.2, 5]");
  }
  const Scalar limit = p.resolution / 4.0;
  for (int t = 1; t < p.T; ++t) {
    const Pose a = pose_at(p, t - 1), b = pose_at(p, t);
    const Scalar cc = (p.aligned_resolution - 1.0) / 2.0;
    const Eigen::Vector2d da = a.to_frame.apply(cc, cc);
    const Eigen::Vector2d db = b.to_frame.apply(cc, cc);
    if ((db - da).norm() > limit)
      throw ConfigError("render_episode: face trajectory jumps over 1/4 frame");
  }
  if (p.occluder && p.occluder_velocity.norm() > limit)
    throw ConfigError("render_episode: occluder trajectory jumps over 1/4 frame");
}

}  // namespace

AffineTransform face_pose(const SceneParams& p, int t) { return pose_at(p, t).to_frame; }

SceneParams SceneParams::random(std::uint64_t seed, int T, int resolution,
                                int aligned_resolution, bool with_occluder) {
  Rng rng(derive_seed(seed, "scene"));
  SceneParams p;
  p.T = T;
  p.resolution = resolution;
  p.aligned_resolution = aligned_resolution;
  const Scalar mid = (resolution - 1.0) / 2.0;
  p.center_start = {mid + rng.uniform(-resolution / 10.0, resolution / 10.0),
                    mid + rng.uniform(-resolution / 10.0, resolution / 10.0)};
  p.center_velocity = {rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2)};
  p.wiggle_amplitude = rng.uniform(0.0, 0.8);
  p.wiggle_frequency = rng.uniform(0.5, 1.2);
  p.wiggle_phase = rng.uniform(0.0, 2.0 * EIGEN_PI);
  p.scale_start = rng.uniform(0.9, 1.1);
  p.scale_delta = rng.uniform(-0.01, 0.01);
  p.angle_start = rng.uniform(-0.15, 0.15);
  p.angle_delta = rng.uniform(-0.02, 0.02);
  p.face_width = rng.uniform(0.25, 0.75);
  p.mouth_curvature = rng.uniform(0.15, 0.85);
  p.eye_openness = rng.uniform(0.3, 1.0);
  p.texture_seed = derive_seed(seed, "texture");
  p.occluder = with_occluder;
  if (with_occluder) {
    const bool from_left = rng.uniform() < 0.5;
    const Scalar y = mid + rng.uniform(-resolution / 6.0, resolution / 6.0);
    p.occluder_half_size = resolution / rng.uniform(6.0, 9.0);
    const Scalar speed = rng.uniform(2.0, 3.5);
    if (from_left) {
      p.occluder_start = {p.occluder_half_size, y};
      p.occluder_velocity = {speed, rng.uniform(-0.5, 0.5)};
    } else {
      p.occluder_start = {resolution - p.occluder_half_size, y};
      p.occluder_velocity = {-speed, rng.uniform(-0.5, 0.5)};
    }
  }
  return p;
}

Episode render_episode(const SceneParams& params) {
  validate(params);
  Rng tex_rng(params.texture_seed);
  const Texture bg = Texture::make(tex_rng, {-0.15, -0.05, 0.15}, 0.9);
  const Texture skin = Texture::make(tex_rng, {0.55, 0.15, -0.05}, 0.45);
  const Texture occ = Texture::make(tex_rng, {-0.35, 0.45, -0.25}, 0.7);
  const FaceGeometry geom = FaceGeometry::from(params);

  const int n = params.resolution;
  const int T = params.T;

  std::vector<Pose> poses;
  for (int t = 0; t < T; ++t) poses.push_back(pose_at(params, t));

  Episode ep;
  ep.aligned_resolution = params.aligned_resolution;
  ep.gt.emplace();
  ep.gt->attributes["face_width"] = params.face_width;
  ep.gt->attributes["mouth_curvature"] = params.mouth_curvature;
  ep.gt->attributes["eye_openness"] = params.eye_openness;

  std::vector<Eigen::ArrayXXi> layer_ids;

  for (int t = 0; t < T; ++t) {
    Frame frame(n, n);
    Mask face_mask(n, n);
    Eigen::ArrayXXi layer = Eigen::ArrayXXi::Zero(n, n);
    const Eigen::Vector2d oc = occluder_center(params, t);

    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const Eigen::Vector2d l = poses[t].to_local.apply(x, y);
        const Scalar fa = alpha_from_sdf(geom.head_sdf(l.x(), l.y()));
        const Scalar oa = params.occluder
                              ? alpha_from_sdf(square_sdf(x, y, oc,
                                                          params.occluder_half_size))
                              : 0.0;
        const Scalar ea = std::max(alpha_from_sdf(geom.eye_sdf(l.x(), l.y(), -1)),
                                   alpha_from_sdf(geom.eye_sdf(l.x(), l.y(), +1)));
        const Scalar ma = alpha_from_sdf(geom.mouth_sdf(l.x(), l.y()));

        for (int c = 0; c < 3; ++c) {
          const Scalar eye_col = c == 2 ? -0.45 : -0.65;
          const Scalar mouth_col = c == 0 ? 0.35 : -0.55;
          Scalar face_col = skin.eval(c, l.x(), l.y());
          face_col = ma * mouth_col + (1.0 - ma) * (ea * eye_col + (1.0 - ea) * face_col);
          Scalar v = fa * face_col + (1.0 - fa) * bg.eval(c, x, y);
          if (params.occluder)
            v = oa * occ.eval(c, x - oc.x(), y - oc.y()) + (1.0 - oa) * v;
          frame.ch[c](y, x) = std::min(std::max(v, Scalar(-1)), Scalar(1));
        }
        face_mask.values(y, x) = fa;
        layer(y, x) = oa > 0.5 ? 2 : (fa > 0.5 ? 1 : 0);
      }

    ep.frames.push_back(std::move(frame));
    ep.gt->face_masks.push_back(std::move(face_mask));
    ep.gt->transforms.push_back(poses[t].to_frame);
    layer_ids.push_back(std::move(layer));
  }

  // Analytic flow between frames t (grid) and s (source), per visible layer.
  auto flow_between = [&](int t, int s) {
    FlowField f(n, n);
    const Eigen::Vector2d doc = occluder_center(params, s) - occluder_center(params, t);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        switch (layer_ids[t](y, x)) {
          case 1: {
            const Eigen::Vector2d l = poses[t].to_local.apply(x, y);
            const Eigen::Vector2d q = poses[s].to_frame.apply(l.x(), l.y());
            f.dx(y, x) = q.x() - x;
            f.dy(y, x) = q.y() - y;
            break;
          }
          case 2:
            f.dx(y, x) = doc.x();
            f.dy(y, x) = doc.y();
            break;
          default:
            break;  // background is static
        }
      }
    return f;
  };

  for (int j = 0; j + 1 < T; ++j) {
    ep.gt->flows_to_prev.push_back(flow_between(j + 1, j));
    ep.gt->flows_to_next.push_back(flow_between(j, j + 1));
  }

  // Visibility labels: content at p in frame j+1 was visible at frame j iff
  // the traced-back location shows the same layer.
  for (int j = 0; j + 1 < T; ++j) {
    const FlowField& f = ep.gt->flows_to_prev[j];
    Plane vis(n, n);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const int lay = layer_ids[j + 1](y, x);
        const Scalar qx = x + f.dx(y, x), qy = y + f.dy(y, x);
        const int rx = static_cast<int>(std::lround(qx));
        const int ry = static_cast<int>(std::lround(qy));
        const bool inside = rx >= 0 && rx < n && ry >= 0 && ry < n;
        vis(y, x) = (inside && layer_ids[j](ry, rx) == lay) ? 1.0 : 0.0;
      }
    ep.gt->visibility_from_prev.push_back(std::move(vis));
  }

  return ep;
}

Episode render_oracle_episode(const generator::GeneratorWeights& gen,
                              const std::vector<generator::LatentCode>& codes,
                              const std::vector<NoiseMap>& noises) {
  if (codes.empty() || codes.size() != noises.size())
    throw ShapeError("render_oracle_episode: codes and noises must align");
  const int n = gen.cfg.image_resolution;
  Episode ep;
  ep.aligned_resolution = n;
  ep.gt.emplace();
  for (std::size_t t = 0; t < codes.size(); ++t) {
    ep.frames.push_back(generator::synthesize(gen, codes[t], noises[t]).pixels);
    ep.gt->latents.push_back(codes[t]);
    ep.gt->noises.push_back(noises[t]);
    ep.gt->face_masks.push_back(Mask::constant(n, n, 1.0));
    ep.gt->transforms.push_back(AffineTransform::identity());
  }
  return ep;
}

std::vector<generator::LatentCode> sample_oracle_code_trajectory(
    std::uint64_t seed, int T, int layers, int dim, int split) {
  const int subspace = 16;
  Rng anchor_rng(derive_seed(0xA11C0DE, "oracle_anchor"));
  Matrix anchor(layers, dim);
  for (int i = 0; i < layers; ++i)
    for (int j = 0; j < dim; ++j) anchor(i, j) = anchor_rng.normal();

  // Fixed subspaces shared by every episode: one over all rows for the
  // per-episode offset, one restricted to former rows for the walk.
  Rng basis_rng(derive_seed(0xA11C0DE, "oracle_basis"));
  std::vector<Matrix> basis_ep, basis_walk;
  for (int k = 0; k < subspace; ++k) {
    Matrix b(layers, dim);
    for (int i = 0; i < layers; ++i)
      for (int j = 0; j < dim; ++j) b(i, j) = basis_rng.normal();
    basis_ep.push_back(b / b.norm());
  }
  for (int k = 0; k < subspace; ++k) {
    Matrix b = Matrix::Zero(layers, dim);
    for (int i = 0; i < split; ++i)
      for (int j = 0; j < dim; ++j) b(i, j) = basis_rng.normal();
    basis_walk.push_back(b / b.norm());
  }

  Rng rng(derive_seed(seed, "oracle_codes"));
  Eigen::VectorXd offset(subspace);
  for (int k = 0; k < subspace; ++k) offset[k] = 0.6 * rng.normal();
  Matrix base = anchor;
  for (int k = 0; k < subspace; ++k) base += offset[k] * basis_ep[k];

  std::vector<generator::LatentCode> out;
  Eigen::VectorXd walk = Eigen::VectorXd::Zero(subspace);
  for (int t = 0; t < T; ++t) {
    if (t > 0)
      for (int k = 0; k < subspace; ++k) walk[k] += 0.25 * rng.normal();
    Matrix rows = base;
    for (int k = 0; k < subspace; ++k) rows += walk[k] * basis_walk[k];
    out.emplace_back(std::move(rows), split);
  }
  return out;
}

std::vector<NoiseMap> sample_oracle_noises(std::uint64_t seed, int T, int resolution,
                                           Scalar stddev) {
  Rng rng(derive_seed(seed, "oracle_noise"));
  std::vector<NoiseMap> out;
  for (int t = 0; t < T; ++t) {
    NoiseMap n(resolution);
    for (Eigen::Index y = 0; y < resolution; ++y)
      for (Eigen::Index x = 0; x < resolution; ++x)
        n.values(y, x) = stddev * rng.normal();
    out.push_back(std::move(n));
  }
  return out;
}

}  // namespace rigid::synthdata
