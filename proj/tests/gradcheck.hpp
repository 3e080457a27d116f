#pragma once

// Central finite-difference checking used across the gradient suites.
// The comparison is relative with an absolute floor so near-zero gradient
// components do not blow up the ratio.

#include <functional>
#include <vector>

#include "rigid/core.hpp"
#include "rigid/tape.hpp"

namespace gradcheck {

using rigid::Array;
using rigid::Scalar;
using rigid::ad::Shape;
using rigid::ad::Tape;
using rigid::ad::Var;

using GraphFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct Input {
  Array value;
  Shape shape;
};

inline double rel_err(double ad, double fd) {
  const double denom = std::max({1e-6, std::abs(ad), std::abs(fd)});
  return std::abs(ad - fd) / denom;
}

// Checks d(root)/d(inputs) against central differences. If probes_per_input
// is 0 every coordinate is checked, otherwise a deterministic subset.
inline double max_rel_err(const GraphFn& f, const std::vector<Input>& inputs,
                          int probes_per_input = 0, double h = 1e-5,
                          std::uint64_t probe_seed = 7) {
  std::vector<Array> grads;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& in : inputs) leaves.push_back(tape.leaf(in.value, in.shape, true));
    Var root = f(tape, leaves);
    tape.backward(root);
    for (Var v : leaves) grads.push_back(tape.grad(v));
  }

  auto eval = [&](const std::vector<Array>& vals) {
    Tape tape;
    std::vector<Var> leaves;
    for (std::size_t i = 0; i < inputs.size(); ++i)
      leaves.push_back(tape.leaf(vals[i], inputs[i].shape, false));
    return tape.value_scalar(f(tape, leaves));
  };

  std::vector<Array> vals;
  for (const auto& in : inputs) vals.push_back(in.value);

  rigid::Rng rng(probe_seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Eigen::Index n = vals[i].size();
    std::vector<Eigen::Index> coords;
    if (probes_per_input <= 0 || probes_per_input >= n) {
      for (Eigen::Index k = 0; k < n; ++k) coords.push_back(k);
    } else {
      for (int k = 0; k < probes_per_input; ++k)
        coords.push_back(rng.uniform_int(static_cast<int>(n)));
    }
    for (Eigen::Index k : coords) {
      const Scalar orig = vals[i][k];
      vals[i][k] = orig + h;
      const Scalar fp = eval(vals);
      vals[i][k] = orig - h;
      const Scalar fm = eval(vals);
      vals[i][k] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      worst = std::max(worst, rel_err(grads[i][k], fd));
    }
  }
  return worst;
}

}  // namespace gradcheck
