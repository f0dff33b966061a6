#pragma once

// Central finite-difference oracle for tape gradients. Test-only: it only
// uses forward evaluations of the loss closure.

#include <algorithm>
#include <cmath>
#include <functional>

#include "chunkflow/core/tape.hpp"

namespace chunkflow::testing {

struct GradCheckResult {
  double coordinate_rel_error = 0.0;   // over the sampled coordinates
  double directional_rel_error = 0.0;  // along one random direction
  int coordinates_checked = 0;
  double worst() const { return std::max(coordinate_rel_error, directional_rel_error); }
};

using LossFn = std::function<Var(Tape&)>;

inline double eval_loss(const LossFn& f) {
  Tape t;
  return f(t).value().item();
}

/// Compares analytic gradients of `f` against central differences at step
/// `h`, over up to `max_coords` random coordinates plus one random direction.
inline GradCheckResult gradcheck(const LossFn& f, const ParameterList& params, Rng& rng, int max_coords = 48,
                                 double h = 1e-5) {
  {
    Tape t;
    t.backward(f(t));
  }
  std::vector<std::pair<Parameter*, Index>> coords;
  for (Parameter* p : params)
    for (Index i = 0; i < p->value.numel(); ++i) coords.emplace_back(p, i);
  std::shuffle(coords.begin(), coords.end(), rng.engine());
  if (static_cast<int>(coords.size()) > max_coords) coords.resize(static_cast<std::size_t>(max_coords));

  GradCheckResult r;
  double diff2 = 0.0, an2 = 0.0, num2 = 0.0;
  for (auto [p, i] : coords) {
    const double orig = p->value[i];
    p->value[i] = orig + h;
    const double fp = eval_loss(f);
    p->value[i] = orig - h;
    const double fm = eval_loss(f);
    p->value[i] = orig;
    const double num = (fp - fm) / (2 * h);
    const double an = p->grad[i];
    diff2 += (num - an) * (num - an);
    an2 += an * an;
    num2 += num * num;
  }
  r.coordinates_checked = static_cast<int>(coords.size());
  r.coordinate_rel_error = std::sqrt(diff2) / std::max({std::sqrt(an2), std::sqrt(num2), 1e-10});

  std::vector<Tensor> dir;
  double dot = 0.0;
  for (Parameter* p : params) {
    dir.push_back(Tensor::randn(p->value.shape, rng));
    for (Index i = 0; i < p->value.numel(); ++i) {
      dot += dir.back()[i] * p->grad[i];
    }
  }
  auto shift = [&](double s) {
    for (std::size_t k = 0; k < params.size(); ++k)
      for (Index i = 0; i < params[k]->value.numel(); ++i) params[k]->value[i] += s * dir[k][i];
  };
  const double step = h;
  shift(step);
  const double fp = eval_loss(f);
  shift(-2 * step);
  const double fm = eval_loss(f);
  shift(step);
  const double num = (fp - fm) / (2 * step);
  r.directional_rel_error = std::abs(num - dot) / std::max({std::abs(num), std::abs(dot), 1e-10});
  return r;
}

}  // namespace chunkflow::testing
