#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "comem/error.hpp"
#include "comem/parameters.hpp"
#include "comem/rng.hpp"
#include "comem/tape.hpp"

namespace comem {

/// Precision used for finite-difference checks.
using wide_t = long double;

struct GradCheckOptions {
  double eps = 1e-6;
  /// Coordinates sampled per parameter tensor; 0 checks every coordinate.
  std::size_t samples_per_param = 0;
  std::uint64_t seed = 0;
  /// Only these parameters are checked when non-empty.
  std::vector<std::string> subset;
  /// Test hook: perturb one analytic gradient entry before comparing.
  bool corrupt_analytic = false;
};

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

/// Relative error used throughout: |a - n| / max(1, |a|, |n|).
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

/// Compare reverse-mode gradients of a scalar loss against central
/// differences (f(x+eps) - f(x-eps)) / (2 eps). `loss_fn(tape, store)` must
/// build the loss deterministically on the given tape.
template <typename T, typename LossFn>
GradCheckResult grad_check(ParameterStore<T>& store, LossFn&& loss_fn, const GradCheckOptions& opt = {}) {
  auto evaluate = [&]() -> T {
    Tape<T> tape;
    Var<T> loss = loss_fn(tape, store);
    const T v = loss.item();
    if (!std::isfinite(double(v))) throw NumericError("grad_check: loss is not finite");
    return v;
  };

  Gradients<T> analytic(store);
  {
    Tape<T> tape;
    Var<T> loss = loss_fn(tape, store);
    if (!std::isfinite(double(loss.item()))) throw NumericError("grad_check: loss is not finite");
    tape.backward(loss);
    tape.accumulate(analytic);
  }

  Rng rng(opt.seed);
  GradCheckResult result;
  bool corrupted = false;
  for (std::size_t p = 0; p < store.size(); ++p) {
    if (!opt.subset.empty() && std::find(opt.subset.begin(), opt.subset.end(), store.name(p)) == opt.subset.end()) continue;
    auto& values = store.value(p).storage();
    std::vector<std::size_t> coords;
    if (opt.samples_per_param == 0 || opt.samples_per_param >= values.size()) {
      coords.resize(values.size());
      for (std::size_t k = 0; k < coords.size(); ++k) coords[k] = k;
    } else {
      for (std::size_t s = 0; s < opt.samples_per_param; ++s) coords.push_back(std::size_t(rng.below(values.size())));
    }
    for (auto k : coords) {
      const T saved = values[k];
      values[k] = saved + T(opt.eps);
      const T plus = evaluate();
      values[k] = saved - T(opt.eps);
      const T minus = evaluate();
      values[k] = saved;
      const double numeric = double((plus - minus) / (T(2) * T(opt.eps)));
      double a = double(analytic[p][k]);
      if (opt.corrupt_analytic && !corrupted) {
        a += 1e-2 * std::max(1.0, std::abs(a));
        corrupted = true;
      }
      const double err = relative_error(a, numeric);
      ++result.checked;
      if (err > result.max_rel_error || result.worst_param.empty()) {
        result.max_rel_error = std::max(result.max_rel_error, err);
        if (err >= result.max_rel_error) {
          result.worst_param = store.name(p);
          result.worst_index = k;
          result.worst_analytic = a;
          result.worst_numeric = numeric;
        }
      }
    }
  }
  return result;
}

}  // namespace comem
