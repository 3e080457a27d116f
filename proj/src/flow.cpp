#include "rigid/flow.hpp"

#include <vector>

#include "rigid/tape.hpp"

namespace rigid::flow {

Frame warp(const Frame& source, const FlowField& flow) {
  require_shape(source.height() == flow.height() && source.width() == flow.width(),
                "warp: flow shape mismatch");
  ad::Tape t;
  ad::Var out = t.warp_bilinear(
      t.leaf(source.flat(), source.ad_shape()),
      t.leaf(flow.flat(), ad::Shape::image(2, static_cast<int>(flow.height()),
                                           static_cast<int>(flow.width()))));
  return Frame::from_flat(t.value(out), source.height(), source.width());
}

Plane warp_plane(const Plane& source, const FlowField& flow) {
  require_shape(source.rows() == flow.height() && source.cols() == flow.width(),
                "warp_plane: flow shape mismatch");
  ad::Tape t;
  ad::Var out = t.warp_bilinear(
      t.leaf(plane_to_flat(source), ad::Shape::image(1, static_cast<int>(source.rows()),
                                                     static_cast<int>(source.cols()))),
      t.leaf(flow.flat(), ad::Shape::image(2, static_cast<int>(flow.height()),
                                           static_cast<int>(flow.width()))));
  return plane_from_flat(t.value(out), source.rows(), source.cols());
}

NonOcclusionMask occlusion_mask(const FlowField& forward, const FlowField& backward,
                                Scalar tau_abs, Scalar tau_rel) {
  require_shape(forward.height() == backward.height() &&
                    forward.width() == backward.width(),
                "occlusion_mask: shape mismatch");
  // Backward flow pulled onto the forward grid.
  Plane bdx = warp_plane(backward.dx, forward);
  Plane bdy = warp_plane(backward.dy, forward);
  const Plane sum_sq =
      (forward.dx + bdx).square() + (forward.dy + bdy).square();
  const Plane mag_sq = forward.dx.square() + forward.dy.square() + bdx.square() +
                       bdy.square();
  NonOcclusionMask mask;
  mask.values = (sum_sq < tau_rel * mag_sq + tau_abs).cast<Scalar>();
  return mask;
}

namespace {

Plane luminance(const Frame& f) { return (f.ch[0] + f.ch[1] + f.ch[2]) / 3.0; }

Plane downsample2(const Plane& p) {
  const Eigen::Index h = (p.rows() + 1) / 2, w = (p.cols() + 1) / 2;
  Plane out(h, w);
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x) {
      const Eigen::Index y0 = 2 * y, x0 = 2 * x;
      const Eigen::Index y1 = std::min(y0 + 1, p.rows() - 1);
      const Eigen::Index x1 = std::min(x0 + 1, p.cols() - 1);
      out(y, x) = 0.25 * (p(y0, x0) + p(y0, x1) + p(y1, x0) + p(y1, x1));
    }
  return out;
}

inline Scalar sample_clamped(const Plane& p, Eigen::Index y, Eigen::Index x) {
  y = std::min(std::max<Eigen::Index>(y, 0), p.rows() - 1);
  x = std::min(std::max<Eigen::Index>(x, 0), p.cols() - 1);
  return p(y, x);
}

Scalar block_ssd(const Plane& target, const Plane& source, Eigen::Index by,
                 Eigen::Index bx, Eigen::Index bh, Eigen::Index bw, int dy, int dx) {
  Scalar acc = 0;
  for (Eigen::Index y = 0; y < bh; ++y)
    for (Eigen::Index x = 0; x < bw; ++x) {
      const Scalar d = target(by + y, bx + x) -
                       sample_clamped(source, by + y + dy, bx + x + dx);
      acc += d * d;
    }
  return acc;
}

// One parabolic sub-pixel step from SSD samples at -1/0/+1.
Scalar parabolic_offset(Scalar sm, Scalar s0, Scalar sp) {
  const Scalar denom = sm - 2.0 * s0 + sp;
  if (denom <= 1e-12) return 0.0;
  Scalar off = 0.5 * (sm - sp) / denom;
  return std::min(std::max(off, Scalar(-0.5)), Scalar(0.5));
}

struct BlockGrid {
  Eigen::Index nbx = 0, nby = 0;
  std::vector<Scalar> fx, fy;  // per block
  std::vector<Scalar> cx, cy;  // block centers
};

// Per-pixel field by bilinear interpolation between block centers.
FlowField grid_to_field(const BlockGrid& g, Eigen::Index h, Eigen::Index w) {
  FlowField f(h, w);
  auto interp = [&](const std::vector<Scalar>& v, Scalar gx, Scalar gy) {
    gx = std::min(std::max(gx, Scalar(0)), static_cast<Scalar>(g.nbx - 1));
    gy = std::min(std::max(gy, Scalar(0)), static_cast<Scalar>(g.nby - 1));
    const Eigen::Index x0 = static_cast<Eigen::Index>(gx);
    const Eigen::Index y0 = static_cast<Eigen::Index>(gy);
    const Eigen::Index x1 = std::min(x0 + 1, g.nbx - 1);
    const Eigen::Index y1 = std::min(y0 + 1, g.nby - 1);
    const Scalar wx = gx - x0, wy = gy - y0;
    return (1 - wy) * ((1 - wx) * v[y0 * g.nbx + x0] + wx * v[y0 * g.nbx + x1]) +
           wy * ((1 - wx) * v[y1 * g.nbx + x0] + wx * v[y1 * g.nbx + x1]);
  };
  const Scalar sx = g.nbx > 1 ? (g.cx[1] - g.cx[0]) : Scalar(1);
  const Scalar sy = g.nby > 1 ? (g.cy[g.nbx] - g.cy[0]) : Scalar(1);
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x) {
      const Scalar gx = g.nbx > 1 ? (x - g.cx[0]) / sx : Scalar(0);
      const Scalar gy = g.nby > 1 ? (y - g.cy[0]) / sy : Scalar(0);
      f.dx(y, x) = interp(g.fx, gx, gy);
      f.dy(y, x) = interp(g.fy, gx, gy);
    }
  return f;
}

}  // namespace

FlowField estimate_flow(const Frame& target, const Frame& source,
                        const EstimatorParams& params) {
  require_shape(target.height() == source.height() && target.width() == source.width(),
                "estimate_flow: shape mismatch");
  const int block = params.block_size;

  std::vector<Plane> tpyr{luminance(target)}, spyr{luminance(source)};
  while (static_cast<int>(tpyr.size()) < params.pyramid_levels &&
         tpyr.back().rows() >= 2 * block && tpyr.back().cols() >= 2 * block) {
    tpyr.push_back(downsample2(tpyr.back()));
    spyr.push_back(downsample2(spyr.back()));
  }

  FlowField prev;  // field from the coarser level, upscaled
  for (int level = static_cast<int>(tpyr.size()) - 1; level >= 0; --level) {
    const Plane& tp = tpyr[level];
    const Plane& sp = spyr[level];
    const Eigen::Index h = tp.rows(), w = tp.cols();
    const int radius = (level == static_cast<int>(tpyr.size()) - 1)
                           ? params.coarse_search_radius
                           : params.refine_search_radius;

    BlockGrid grid;
    grid.nbx = (w + block - 1) / block;
    grid.nby = (h + block - 1) / block;
    grid.fx.resize(grid.nbx * grid.nby);
    grid.fy.resize(grid.nbx * grid.nby);
    grid.cx.resize(grid.nbx * grid.nby);
    grid.cy.resize(grid.nbx * grid.nby);

    for (Eigen::Index byi = 0; byi < grid.nby; ++byi)
      for (Eigen::Index bxi = 0; bxi < grid.nbx; ++bxi) {
        const Eigen::Index by = byi * block, bx = bxi * block;
        const Eigen::Index bh = std::min<Eigen::Index>(block, h - by);
        const Eigen::Index bw = std::min<Eigen::Index>(block, w - bx);
        const Scalar cx = bx + (bw - 1) * 0.5, cy = by + (bh - 1) * 0.5;

        int init_dx = 0, init_dy = 0;
        if (prev.height() > 0) {
          const Eigen::Index py =
              std::min<Eigen::Index>(static_cast<Eigen::Index>(cy), prev.height() - 1);
          const Eigen::Index px =
              std::min<Eigen::Index>(static_cast<Eigen::Index>(cx), prev.width() - 1);
          init_dx = static_cast<int>(std::lround(prev.dx(py, px)));
          init_dy = static_cast<int>(std::lround(prev.dy(py, px)));
        }

        Scalar best = std::numeric_limits<Scalar>::max();
        int best_dx = init_dx, best_dy = init_dy;
        for (int dy = init_dy - radius; dy <= init_dy + radius; ++dy)
          for (int dx = init_dx - radius; dx <= init_dx + radius; ++dx) {
            const Scalar ssd = block_ssd(tp, sp, by, bx, bh, bw, dy, dx);
            if (ssd < best) {
              best = ssd;
              best_dx = dx;
              best_dy = dy;
            }
          }

        const Scalar sxm = block_ssd(tp, sp, by, bx, bh, bw, best_dy, best_dx - 1);
        const Scalar sxp = block_ssd(tp, sp, by, bx, bh, bw, best_dy, best_dx + 1);
        const Scalar sym = block_ssd(tp, sp, by, bx, bh, bw, best_dy - 1, best_dx);
        const Scalar syp = block_ssd(tp, sp, by, bx, bh, bw, best_dy + 1, best_dx);

        const Eigen::Index bi = byi * grid.nbx + bxi;
        grid.fx[bi] = best_dx + parabolic_offset(sxm, best, sxp);
        grid.fy[bi] = best_dy + parabolic_offset(sym, best, syp);
        grid.cx[bi] = cx;
        grid.cy[bi] = cy;
      }

    FlowField field = grid_to_field(grid, h, w);
    if (level > 0) {
      // carry to the next finer level: coordinates and displacements double
      const Eigen::Index fh = tpyr[level - 1].rows(), fw = tpyr[level - 1].cols();
      FlowField up(fh, fw);
      for (Eigen::Index y = 0; y < fh; ++y)
        for (Eigen::Index x = 0; x < fw; ++x) {
          const Eigen::Index sy = std::min(y / 2, h - 1);
          const Eigen::Index sx = std::min(x / 2, w - 1);
          up.dx(y, x) = 2.0 * field.dx(sy, sx);
          up.dy(y, x) = 2.0 * field.dy(sy, sx);
        }
      prev = std::move(up);
    } else {
      return field;
    }
  }
  return prev;  // unreachable for nonempty pyramids
}

}  // namespace rigid::flow
