#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ssdn/ops.hpp"
#include "ssdn/tape.hpp"

namespace ssdn {

// Compares reverse-mode gradients against central differences, coordinate by
// coordinate, in 64-bit arithmetic. The builder must be a pure function of
// its inputs. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
// denominator; the largest error over all coordinates is returned.
template <typename F>
double grad_check_multi(F&& build, const std::vector<Tensor<double>>& points,
                        double eps = 1e-4) {
  Tape<double> tape;
  std::vector<Var> xs;
  xs.reserve(points.size());
  for (const auto& p : points) xs.push_back(tape.leaf(p, true));
  Var loss = build(tape, xs);
  const int bad = tape.first_non_finite_node();
  if (bad >= 0) {
    throw DegenerateInput("grad_check: non-finite value at node " + std::to_string(bad));
  }
  if (tape.value(loss).size() != 1) {
    throw ContractViolation("grad_check: builder must return a scalar");
  }
  Gradients<double> grads = tape.backward(loss);

  auto eval_at = [&](size_t input, int64_t coord, double delta) {
    Tape<double> t2;
    std::vector<Var> ys;
    ys.reserve(points.size());
    for (size_t j = 0; j < points.size(); ++j) {
      Tensor<double> pj = points[j];
      if (j == input) pj[coord] += delta;
      ys.push_back(t2.leaf(pj, false));
    }
    Var l2 = build(t2, ys);
    const int bad2 = t2.first_non_finite_node();
    if (bad2 >= 0) {
      throw DegenerateInput("grad_check: non-finite value at node " + std::to_string(bad2));
    }
    return t2.value(l2)[0];
  };

  double max_rel = 0.0;
  for (size_t i = 0; i < points.size(); ++i) {
    const Tensor<double>* g = grads.find(xs[i]);
    for (int64_t c = 0; c < points[i].size(); ++c) {
      const double num = (eval_at(i, c, eps) - eval_at(i, c, -eps)) / (2.0 * eps);
      const double ana = g ? (*g)[c] : 0.0;
      const double rel =
          std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

template <typename F>
double grad_check(F&& build, const Tensor<double>& point, double eps = 1e-4) {
  return grad_check_multi(
      [&](Tape<double>& t, const std::vector<Var>& xs) { return build(t, xs[0]); },
      std::vector<Tensor<double>>{point}, eps);
}

}  // namespace ssdn
