#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "act/tensor.hpp"

namespace act_test {

// Central-difference gradient check in double precision. The functional is
// re-evaluated from scratch for every perturbed coordinate, so it must be a
// pure function of the leaf values (fresh tape per call).
struct GradCheckResult {
  bool ok = true;
  double worst_rel = 0.0;
  std::string detail;
};

inline GradCheckResult grad_check(
    const std::function<double(const std::vector<act::TensorT<double>>&)>& f,
    std::vector<act::TensorT<double>> leaves, double h = 1e-3, double rel_tol = 1e-4,
    double abs_floor = 1e-6) {
  GradCheckResult res;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    if (!leaf.requires_grad()) continue;
    const std::vector<double> analytic = [&] {
      for (auto& l : leaves) l.clear_grad();
      f(leaves);
      return leaf.g();
    }();
    for (int64_t i = 0; i < leaf.numel(); ++i) {
      const double keep = leaf.v()[static_cast<size_t>(i)];
      leaf.v()[static_cast<size_t>(i)] = keep + h;
      const double fp = f(leaves);
      leaf.v()[static_cast<size_t>(i)] = keep - h;
      const double fm = f(leaves);
      leaf.v()[static_cast<size_t>(i)] = keep;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[static_cast<size_t>(i)];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), abs_floor});
      const double rel = std::fabs(a - numeric) / denom;
      if (rel > res.worst_rel) {
        res.worst_rel = rel;
        res.detail = "leaf " + std::to_string(li) + " elem " + std::to_string(i) +
                     ": analytic " + std::to_string(a) + " numeric " + std::to_string(numeric);
      }
      if (rel > rel_tol) res.ok = false;
    }
  }
  return res;
}

// Convenience: wraps a tape-building function that returns the scalar loss
// tensor. Gradients land on the leaves; the return value feeds the FD side.
inline GradCheckResult grad_check_tape(
    const std::function<act::TensorT<double>(act::TapeT<double>&,
                                             const std::vector<act::TensorT<double>>&)>& build,
    std::vector<act::TensorT<double>> leaves, double h = 1e-3, double rel_tol = 1e-4) {
  auto f = [&build](const std::vector<act::TensorT<double>>& ls) {
    act::TapeT<double> tape;
    act::TensorT<double> loss = build(tape, ls);
    const double v = loss.item();
    tape.backward(loss);
    return v;
  };
  return grad_check(f, std::move(leaves), h, rel_tol);
}

inline act::TensorT<double> rand_tensor(act::Shape shape, act::Rng& rng, double scale = 1.0,
                                        bool requires_grad = true) {
  auto t = act::TensorT<double>::zeros(std::move(shape), requires_grad);
  for (auto& v : t.v()) v = scale * rng.normal();
  return t;
}

}  // namespace act_test
