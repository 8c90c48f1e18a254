#pragma once

#include <cstdint>
#include <vector>

#include "comem/grad_check.hpp"
#include "comem/model.hpp"
#include "comem/rng.hpp"

namespace comem {

/// A random but valid example for `cfg`: Gaussian features, short random
/// question and candidates, and an answer drawn from the task's range.
template <typename T>
Example<T> random_example(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  Example<T> ex;
  ex.appearance = Tensor<T>(Shape{cfg.length, cfg.feature_dim_a});
  ex.motion = Tensor<T>(Shape{cfg.length, cfg.feature_dim_b});
  for (auto& v : ex.appearance.storage()) v = T(rng.normal());
  for (auto& v : ex.motion.storage()) v = T(rng.normal());
  auto tokens = [&](std::size_t n) {
    std::vector<std::size_t> ids(n);
    for (auto& id : ids) id = std::size_t(rng.below(cfg.vocab_size));
    return ids;
  };
  auto& item = ex.item;
  item.id = "check";
  item.task = cfg.task;
  item.video = "check";
  item.question = tokens(3);
  switch (cfg.task) {
    case TaskKind::RepeatingAction:
    case TaskKind::StateTransition:
      for (std::size_t k = 0; k < kNumCandidates; ++k) item.candidates.push_back(tokens(1 + rng.below(2)));
      item.answer = int(rng.below(kNumCandidates));
      break;
    case TaskKind::RepetitionCount:
      item.answer = rng.range(0, kMaxCount);
      break;
    case TaskKind::FrameQA:
      item.answer = cfg.answer_values.at(rng.below(cfg.answer_values.size()));
      break;
  }
  return ex;
}

/// Finite-difference check of the full task loss in wide precision.
inline GradCheckResult model_gradient_check(const ModelConfig& cfg, std::uint64_t seed, const GradCheckOptions& opt = {}) {
  CoMemoryModel<wide_t> model(cfg);
  auto store = model.make_store(derive_seed(seed, 1));
  // Zero biases put ReLU inputs exactly on the kink; move off it.
  Rng jitter(derive_seed(seed, 3));
  for (std::size_t p = 0; p < store.size(); ++p)
    if (store.value(p).shape().rank() == 1)
      for (auto& v : store.value(p).storage()) v = wide_t(jitter.uniform(-0.1, 0.1));
  const auto ex = random_example<wide_t>(cfg, derive_seed(seed, 2));
  return grad_check(store, [&](Tape<wide_t>& tape, const ParameterStore<wide_t>& s) { return model.forward(tape, s, ex).loss; }, opt);
}

}  // namespace comem
