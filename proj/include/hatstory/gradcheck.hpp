#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hatstory/errors.hpp"
#include "hatstory/tensor.hpp"

HATSTORY_BEGIN

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = true;
  std::size_t coordinates = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
};

/// |a - n| / max(1e-8, |a| + |n|)
inline double relative_error(Real analytic, Real numeric) {
  return static_cast<double>(std::abs(analytic - numeric) / std::max(Real(1e-8), std::abs(analytic) + std::abs(numeric)));
}

/// Compares tape gradients of the scalar `f` with respect to `params` against
/// central differences (f(x + h e) - f(x - h e)) / 2h, one coordinate at a
/// time. Parameters are perturbed in place and restored afterwards.
///
/// `analytic_override`, when given, replaces the tape gradients (used to
/// exercise the checker itself with a corrupted gradient).
inline GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double step,
                                  double tol,
                                  const std::function<void(std::vector<std::vector<Real>>&)>& analytic_override = {}) {
  if (!(step > 0.0)) throw ContractError("grad_check: step must be positive");
  for (Tensor& p : params) {
    p.set_requires_grad(true);
    p.clear_grad();
  }

  Real base = 0.0;
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor y = f();
    if (y.numel() != 1) throw ContractError("grad_check: function must be scalar-valued");
    base = y.item();
    tape.backward(y);
  }
  if (f().item() != base) throw DeterminismError("grad_check: function value changed on re-evaluation");

  std::vector<std::vector<Real>> analytic;
  for (const Tensor& p : params) {
    analytic.emplace_back(p.has_grad() ? std::vector<Real>(p.grad().begin(), p.grad().end())
                                       : std::vector<Real>(p.numel(), 0.0));
  }
  if (analytic_override) analytic_override(analytic);

  GradCheckReport report;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const Real saved = values[i];
      values[i] = saved + step;
      const Real up = f().item();
      values[i] = saved - step;
      const Real down = f().item();
      values[i] = saved;
      const Real numeric = (up - down) / (2 * static_cast<Real>(step));
      const double err = relative_error(analytic[t][i], numeric);
      ++report.coordinates;
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst_tensor = t;
        report.worst_index = i;
      }
    }
    params[t].clear_grad();
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

/// Single-argument form: checks d f(x) / dx at `point`.
inline GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                                  double step = 1e-5, double tol = 1e-5) {
  std::vector<Tensor> params{point.clone()};
  Tensor& x = params.front();
  return grad_check([&] { return f(x); }, params, step, tol);
}

HATSTORY_END
