#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck.hpp"
#include "rigid/core.hpp"
#include "rigid/tape.hpp"

using gradcheck::Input;
using rigid::Array;
using rigid::Rng;
using rigid::ad::Shape;
using rigid::ad::Tape;
using rigid::ad::Var;

namespace {

Array randn(Rng& rng, Eigen::Index n, double scale = 1.0) {
  return rng.normal_array(n, scale);
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(11);
  Input a{randn(rng, 24), Shape::image(2, 3, 4)};
  Input b{randn(rng, 24), Shape::image(2, 3, 4)};
  // keep leaky/abs kinks away from the probe points
  for (Eigen::Index i = 0; i < a.value.size(); ++i)
    if (std::abs(a.value[i]) < 0.05) a.value[i] += 0.2;

  auto f = [](Tape& t, const std::vector<Var>& v) {
    Var x = t.mul(t.add(v[0], v[1]), t.sub(v[0], t.scale(v[1], 0.5)));
    x = t.leaky_relu(x, 0.2);
    x = t.add(t.sigmoid(x), t.tanh(t.scale(x, 0.3)));
    x = t.add(x, t.rsqrt(t.square(v[0]), 0.1));
    return t.mean(t.square(x));
  };
  CHECK(gradcheck::max_rel_err(f, {a, b}) < 1e-5);
}

TEST_CASE("reductions and losses match finite differences") {
  Rng rng(12);
  Input a{randn(rng, 30), Shape::image(2, 3, 5)};
  Input b{randn(rng, 30), Shape::image(2, 3, 5)};
  auto f = [](Tape& t, const std::vector<Var>& v) {
    Var m = t.mse(v[0], v[1]);
    Var l = t.mae(v[0], v[1]);
    return t.add(t.add(m, l), t.scale(t.mean(t.abs(v[0])), 0.25));
  };
  CHECK(gradcheck::max_rel_err(f, {a, b}) < 1e-5);
}

TEST_CASE("slice and concat round trip and gradients") {
  Rng rng(13);
  Input a{randn(rng, 24), Shape::mat(4, 6)};
  Input b{randn(rng, 12), Shape::mat(2, 6)};

  {
    Tape t;
    Var va = t.leaf(a.value, a.shape);
    Var former = t.slice(va, 1, 0, 3);
    Var latter = t.slice(va, 1, 3, 1);
    Var back = t.concat({former, latter}, 1);
    CHECK((t.value(back) == a.value).all());
  }

  auto f = [](Tape& t, const std::vector<Var>& v) {
    Var c = t.concat({v[0], v[1]}, 1);
    Var s = t.slice(c, 1, 1, 4);
    return t.mean(t.square(s));
  };
  CHECK(gradcheck::max_rel_err(f, {a, b}) < 1e-5);
}

TEST_CASE("matmul gradients") {
  Rng rng(14);
  Input a{randn(rng, 12), Shape::mat(3, 4)};
  Input b{randn(rng, 20), Shape::mat(4, 5)};
  auto f = [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.square(t.matmul(v[0], v[1])));
  };
  CHECK(gradcheck::max_rel_err(f, {a, b}) < 1e-5);
}

TEST_CASE("channel helpers") {
  Rng rng(15);
  Input x{randn(rng, 3 * 4 * 4), Shape::image(3, 4, 4)};
  Input s{randn(rng, 3), Shape::vec(3)};
  Input n{randn(rng, 16), Shape::image(1, 4, 4)};
  auto f = [](Tape& t, const std::vector<Var>& v) {
    Var y = t.channel_scale(v[0], v[1]);
    y = t.channel_bias(y, v[1]);
    y = t.add(y, t.broadcast_channel(v[2], 3));
    y = t.channel_unit_normalize(y, 1e-8);
    return t.mean(t.square(y));
  };
  CHECK(gradcheck::max_rel_err(f, {x, s, n}) < 1e-5);

  {
    Tape t;
    Var v = t.leaf(randn(rng, 4), Shape::vec(4), true);
    Var r = t.repeat_each(v, 3);
    CHECK(t.shape(r).size() == 12);
    Var loss = t.mean(t.square(r));
    t.backward(loss);
    CHECK(t.grad(v).size() == 4);
  }
  Input v4{randn(rng, 4), Shape::vec(4)};
  auto fr = [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.square(t.repeat_each(v[0], 5)));
  };
  CHECK(gradcheck::max_rel_err(fr, {v4}) < 1e-5);
}

TEST_CASE("conv2d forward against direct sum and gradients") {
  Rng rng(16);
  const int cin = 2, h = 5, w = 6, cout = 3, k = 3, stride = 2, pad = 1;
  Input x{randn(rng, cin * h * w), Shape::image(cin, h, w)};
  Input wt{randn(rng, cout * cin * k * k), Shape::mat(cout, cin * k * k)};
  Input b{randn(rng, cout), Shape::vec(cout)};

  // direct convolution oracle
  Tape t;
  Var y = t.conv2d(t.leaf(x.value, x.shape), t.leaf(wt.value, wt.shape),
                   t.leaf(b.value, b.shape), k, k, stride, pad);
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  REQUIRE(t.shape(y) == Shape::image(cout, ho, wo));
  for (int co = 0; co < cout; ++co)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double acc = b.value[co];
        for (int ci = 0; ci < cin; ++ci)
          for (int u = 0; u < k; ++u)
            for (int v = 0; v < k; ++v) {
              const int iy = oy * stride + u - pad;
              const int ix = ox * stride + v - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += x.value[(ci * h + iy) * w + ix] *
                     wt.value[co * cin * k * k + (ci * k + u) * k + v];
            }
        CHECK(t.value(y)[(co * ho + oy) * wo + ox] == doctest::Approx(acc).epsilon(1e-12));
      }

  auto f = [=](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.square(t.conv2d(v[0], v[1], v[2], k, k, stride, pad)));
  };
  CHECK(gradcheck::max_rel_err(f, {x, wt, b}) < 1e-5);
}

TEST_CASE("conv_transpose2d inverts conv2d shape and has correct gradients") {
  Rng rng(17);
  const int cin = 3, h = 4, w = 4, cout = 2, k = 4, stride = 2, pad = 1;
  Input x{randn(rng, cin * h * w), Shape::image(cin, h, w)};
  Input wt{randn(rng, cin * cout * k * k), Shape::mat(cin, cout * k * k)};
  Input b{randn(rng, cout), Shape::vec(cout)};

  {
    Tape t;
    Var y = t.conv_transpose2d(t.leaf(x.value, x.shape), t.leaf(wt.value, wt.shape),
                               t.leaf(b.value, b.shape), k, k, stride, pad);
    CHECK(t.shape(y) == Shape::image(cout, 2 * h, 2 * w));
  }

  auto f = [=](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.square(t.conv_transpose2d(v[0], v[1], v[2], k, k, stride, pad)));
  };
  CHECK(gradcheck::max_rel_err(f, {x, wt, b}) < 1e-5);
}

TEST_CASE("upsample2x and global_avg_pool") {
  Rng rng(18);
  Input x{randn(rng, 2 * 3 * 3), Shape::image(2, 3, 3)};
  auto f = [](Tape& t, const std::vector<Var>& v) {
    Var u = t.upsample2x(v[0]);
    return t.mean(t.square(t.global_avg_pool(u)));
  };
  CHECK(gradcheck::max_rel_err(f, {x}) < 1e-5);

  Tape t;
  Var u = t.upsample2x(t.leaf(x.value, x.shape));
  CHECK(t.shape(u) == Shape::image(2, 6, 6));
  CHECK(t.value(u)[0] == x.value[0]);
  CHECK(t.value(u)[1] == x.value[0]);
}

TEST_CASE("warp_bilinear zero flow is bit exact identity") {
  Rng rng(19);
  const int c = 3, h = 6, w = 7;
  Array src = randn(rng, c * h * w);
  Array flow = Array::Zero(2 * h * w);
  Tape t;
  Var out = t.warp_bilinear(t.leaf(src, Shape::image(c, h, w)),
                            t.leaf(flow, Shape::image(2, h, w)));
  CHECK((t.value(out) == src).all());
}

TEST_CASE("warp_bilinear gradients w.r.t. source and flow") {
  Rng rng(20);
  const int c = 2, h = 6, w = 6;
  Input src{randn(rng, c * h * w), Shape::image(c, h, w)};
  // keep samples interior and away from integer grid points
  Array flow(2 * h * w);
  for (Eigen::Index i = 0; i < flow.size(); ++i) flow[i] = 0.3 + 0.2 * rng.uniform();
  Input fl{flow, Shape::image(2, h, w)};
  auto f = [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.square(t.warp_bilinear(v[0], v[1])));
  };
  CHECK(gradcheck::max_rel_err(f, {src, fl}) < 1e-4);
}

TEST_CASE("affine_sample identity and gradients") {
  Rng rng(21);
  const int c = 2, h = 5, w = 5;
  Input src{randn(rng, c * h * w), Shape::image(c, h, w)};
  Eigen::Matrix<double, 2, 3> id;
  id << 1, 0, 0, 0, 1, 0;
  {
    Tape t;
    Var out = t.affine_sample(t.leaf(src.value, src.shape), id, h, w, false);
    CHECK((t.value(out) == src.value).all());
  }
  Eigen::Matrix<double, 2, 3> m;
  m << 0.8, -0.1, 1.3, 0.1, 0.8, 0.7;
  auto f = [m, h, w](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.square(t.affine_sample(v[0], m, h, w, true)));
  };
  CHECK(gradcheck::max_rel_err(f, {src}) < 1e-4);
}

TEST_CASE("spatial_batchnorm training and eval gradients") {
  Rng rng(22);
  const int c = 3, h = 4, w = 4;
  Input x{randn(rng, c * h * w), Shape::image(c, h, w)};
  Input gamma{randn(rng, c).abs() + 0.5, Shape::vec(c)};
  Input beta{randn(rng, c), Shape::vec(c)};
  Array rmean = randn(rng, c, 0.1);
  Array rvar = randn(rng, c).abs() + 0.5;

  auto f_train = [&](Tape& t, const std::vector<Var>& v) {
    Var y = t.spatial_batchnorm(v[0], v[1], v[2], rmean, rvar, true, 1e-5);
    return t.mean(t.square(y));
  };
  CHECK(gradcheck::max_rel_err(f_train, {x, gamma, beta}) < 1e-4);

  auto f_eval = [&](Tape& t, const std::vector<Var>& v) {
    Var y = t.spatial_batchnorm(v[0], v[1], v[2], rmean, rvar, false, 1e-5);
    return t.mean(t.square(y));
  };
  CHECK(gradcheck::max_rel_err(f_eval, {x, gamma, beta}) < 1e-5);
}

TEST_CASE("backward resets gradients between calls") {
  Tape t;
  Var x = t.leaf(Array::Constant(4, 2.0), Shape::vec(4), true);
  Var loss = t.mean(t.square(x));
  t.backward(loss);
  Array g1 = t.grad(x);
  t.backward(loss);
  Array g2 = t.grad(x);
  CHECK((g1 == g2).all());
}
