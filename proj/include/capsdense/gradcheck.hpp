#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "capsdense/tape.hpp"
#include "capsdense/tensor.hpp"

namespace capsdense {

// Compares the taped gradient of f (a scalar-valued forward pass over
// `params`) against central finite differences, elementwise. Returns the
// worst relative error  |a - n| / max(1e-8, |a| + |n|).
//
// The analytic pass runs on a fresh tape; the numeric probes run untaped.
// A non-finite f at or around the base point violates the oracle's
// precondition and throws ContractError.
template <typename T>
double finite_diff_check(const std::function<TensorT<T>()>& f, std::vector<TensorT<T>> params,
                         T h) {
  if (h <= T(0)) throw ContractError("finite_diff_check: step h must be positive");
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }

  std::vector<std::vector<T>> analytic;
  {
    TapeT<T> tape;
    TensorT<T> y = f();
    if (!y.defined() || y.numel() != 1)
      throw ContractError("finite_diff_check: f must return a scalar");
    if (!std::isfinite(static_cast<double>(y.item())))
      throw ContractError("finite_diff_check: f is non-finite at the base point");
    tape.backward(y);
    for (auto& p : params) {
      p.ensure_grad();  // params f never touches check against an all-zero gradient
      analytic.emplace_back(p.grad(), p.grad() + p.numel());
      p.zero_grad();
    }
  }

  auto eval = [&]() -> double {
    typename TapeT<T>::NoGrad ng;
    const double v = static_cast<double>(f().item());
    if (!std::isfinite(v))
      throw ContractError("finite_diff_check: f is non-finite at a probe point");
    return v;
  };

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    T* d = params[pi].data();
    for (int64_t i = 0; i < params[pi].numel(); ++i) {
      const T orig = d[i];
      d[i] = orig + h;
      const double up = eval();
      d[i] = orig - h;
      const double down = eval();
      d[i] = orig;
      const double numeric = (up - down) / (2.0 * static_cast<double>(h));
      const double a = static_cast<double>(analytic[pi][static_cast<size_t>(i)]);
      const double rel = std::fabs(a - numeric) / std::max(1e-8, std::fabs(a) + std::fabs(numeric));
      if (rel > worst) worst = rel;
    }
  }
  return worst;
}

// Named gradient cases for every differentiable op, run in double precision
// with small random inputs. Each returns its worst relative error.
struct OpGradCase {
  std::string name;
  double tolerance;
  std::function<double()> run;
};

const std::vector<OpGradCase>& op_grad_cases();

}  // namespace capsdense
