#pragma once

// Central-difference gradient oracle. Used by tests to validate every
// backward closure, and exposed by the CLI gradcheck command.

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tlab/tensor.hpp"

namespace tlab {

// d f / d param by central differences, perturbing param's values in place.
// f must rebuild its forward pass from the current leaf values on every
// call (it is invoked 2 * numel times). The default h = 1e-5 balances
// truncation (h^2) against roundoff (eps/h) for double precision; anything
// at or below 1e-12 would be all roundoff, so it is rejected.
inline std::vector<double> finite_diff_grad(const std::function<double()>& f, Tensor param,
                                            double h = 1e-5) {
  if (!(h > 1e-12)) {
    throw std::invalid_argument("finite_diff_grad: h too small for double precision");
  }
  auto& v = param.values();
  std::vector<double> g(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double keep = v[i];
    v[i] = keep + h;
    double fp = f();
    v[i] = keep - h;
    double fm = f();
    v[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Elementwise relative error with an absolute floor. The floor keeps the
// ratio meaningful where both gradients are close to zero and the 1e-10-ish
// central-difference noise would otherwise dominate.
inline double grad_rel_err(const std::vector<double>& a, const std::vector<double>& b,
                           double floor = 1e-3) {
  if (a.size() != b.size()) throw std::invalid_argument("grad_rel_err: size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
};

// Autodiff vs finite differences over a set of named leaf parameters.
// loss_builder must rebuild the whole graph from the leaves each call.
inline GradCheckReport check_gradients(
    const std::function<Tensor()>& loss_builder,
    const std::vector<std::pair<std::string, Tensor>>& params, double h = 1e-5) {
  // one autodiff sweep
  for (auto& [name, p] : params) const_cast<Tensor&>(p).zero_grad();
  Tensor loss = loss_builder();
  backward(loss);
  std::vector<std::vector<double>> ad;
  ad.reserve(params.size());
  for (auto& [name, p] : params) ad.push_back(p.grad());

  GradCheckReport rep;
  auto f = [&]() { return loss_builder().item(); };
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::vector<double> fd = finite_diff_grad(f, params[k].second, h);
    double e = grad_rel_err(ad[k], fd);
    if (e >= rep.max_rel_err) {
      rep.max_rel_err = e;
      rep.worst_param = params[k].first;
    }
  }
  return rep;
}

}  // namespace tlab
