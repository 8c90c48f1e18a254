#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "comem/error.hpp"
#include "comem/ops.hpp"
#include "comem/parameters.hpp"
#include "comem/tape.hpp"

namespace comem {

enum class TaskKind { RepeatingAction, StateTransition, RepetitionCount, FrameQA };

inline constexpr int kMaxCount = 10;
inline constexpr std::size_t kNumCandidates = 5;

inline const char* task_tag(TaskKind t) {
  switch (t) {
    case TaskKind::RepeatingAction: return "action";
    case TaskKind::StateTransition: return "trans";
    case TaskKind::RepetitionCount: return "count";
    case TaskKind::FrameQA: return "frame";
  }
  return "?";
}

inline TaskKind parse_task(const std::string& tag) {
  if (tag == "action") return TaskKind::RepeatingAction;
  if (tag == "trans") return TaskKind::StateTransition;
  if (tag == "count") return TaskKind::RepetitionCount;
  if (tag == "frame") return TaskKind::FrameQA;
  throw FormatError("unknown task '" + tag + "' (expected action, trans, count or frame)");
}

inline bool is_multiple_choice(TaskKind t) { return t == TaskKind::RepeatingAction || t == TaskKind::StateTransition; }

/// Register the answer head of one task on top of m_h [memory_out]:
/// multiple choice W_m [M x 1]; count W_n [M x 1] + b [1]; frame W_w [M x V] + b [V].
template <typename T>
void register_decoder(ParameterStore<T>& store, TaskKind task, std::size_t mh_dim, std::size_t answer_classes) {
  switch (task) {
    case TaskKind::RepeatingAction:
    case TaskKind::StateTransition:
      store.add("dec.mc.W", Shape{mh_dim, 1});
      break;
    case TaskKind::RepetitionCount:
      store.add("dec.count.W", Shape{mh_dim, 1});
      store.add("dec.count.b", Shape{1});
      break;
    case TaskKind::FrameQA:
      if (answer_classes < 1) throw ConfigError("frame decoder needs at least one answer class");
      store.add("dec.frame.W", Shape{mh_dim, answer_classes});
      store.add("dec.frame.b", Shape{answer_classes});
      break;
  }
}

/// s = W_m^T m_h
template <typename T>
Var<T> score_choice(Var<T> m_h, Var<T> w_m) {
  return matmul(m_h, w_m);
}

/// Mean over incorrect candidates of max(0, 1 + s_n - s_p).
template <typename T>
Var<T> hinge_loss(Var<T> s_pos, const std::vector<Var<T>>& s_neg) {
  if (s_neg.empty()) throw DomainError("hinge_loss: no incorrect candidates");
  Var<T> total;
  for (const auto& s : s_neg) {
    auto margin = relu(scale_shift(sub(s, s_pos), T(1), T(1)));
    total = total.valid() ? add(total, margin) : margin;
  }
  return scale_shift(total, T(1) / T(s_neg.size()));
}

/// Unrounded count regression r = W_n^T m_h + b.
template <typename T>
Var<T> count_regression(Var<T> m_h, Var<T> w_n, Var<T> b) {
  return add(matmul(m_h, w_n), b);
}

/// Round half up, then clamp to the 11-answer range {0..10}.
inline int predict_count(double r) {
  if (!std::isfinite(r)) return r > 0 ? kMaxCount : 0;
  const double rounded = std::floor(r + 0.5);
  return int(std::clamp(rounded, 0.0, double(kMaxCount)));
}

/// (r - y)^2
template <typename T>
Var<T> l2_count_loss(Var<T> r, int y) {
  auto d = scale_shift(r, T(1), -T(y));
  return mul(d, d);
}

/// Logits W_w^T m_h + b of the open-ended word decoder.
template <typename T>
Var<T> word_logits(Var<T> m_h, Var<T> w_w, Var<T> b) {
  return add_bias(matmul(m_h, w_w), b);
}

/// Probability distribution over answer classes.
template <typename T>
Var<T> classify_word(Var<T> m_h, Var<T> w_w, Var<T> b) {
  return softmax(word_logits(m_h, w_w, b));
}

/// Index of the largest value; ties resolve to the lowest index.
template <typename Range>
std::size_t argmax(const Range& values) {
  std::size_t best = 0;
  std::size_t i = 0;
  for (auto it = std::begin(values); it != std::end(values); ++it, ++i)
    if (*it > *(std::begin(values) + best)) best = i;
  return best;
}

}  // namespace comem
