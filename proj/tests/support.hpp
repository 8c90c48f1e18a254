#pragma once

#include <functional>
#include <string>
#include <vector>

#include "comem/grad_check.hpp"
#include "comem/ops.hpp"
#include "comem/parameters.hpp"
#include "comem/rng.hpp"
#include "comem/tape.hpp"

namespace comem::testing {

inline std::vector<double> normals(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

template <typename T>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, double scale = 1.0) {
  const auto v = normals(s.numel(), seed, scale);
  return Tensor<T>(s, std::vector<T>(v.begin(), v.end()));
}

/// Store of named random inputs, for checking one op at a time.
inline ParameterStore<wide_t> random_inputs(const std::vector<std::pair<std::string, Shape>>& specs, std::uint64_t seed,
                                            double scale = 1.0) {
  ParameterStore<wide_t> store;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto idx = store.add(specs[i].first, specs[i].second);
    store.value(idx) = random_tensor<wide_t>(specs[i].second, derive_seed(seed, i), scale);
  }
  return store;
}

/// Reduce any output to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
template <typename T>
Var<T> project_to_scalar(Var<T> out, std::uint64_t seed) {
  auto w = out.tape().constant(random_tensor<T>(out.shape(), seed));
  return sum(mul(out, w));
}

using BuildFn = std::function<Var<wide_t>(Tape<wide_t>&, const ParameterStore<wide_t>&)>;

inline double op_grad_error(ParameterStore<wide_t> store, const BuildFn& build, std::uint64_t seed = 99) {
  auto loss = [&](Tape<wide_t>& tape, const ParameterStore<wide_t>& s) { return project_to_scalar(build(tape, s), seed); };
  return grad_check(store, loss).max_rel_error;
}

}  // namespace comem::testing
