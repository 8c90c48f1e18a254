#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "comem/encoders.hpp"
#include "comem/error.hpp"
#include "comem/facts.hpp"
#include "comem/ops.hpp"
#include "comem/parameters.hpp"
#include "comem/tape.hpp"

namespace comem {

struct CoMemoryConfig {
  std::size_t fact_dim = 1024;     // C, width of every contextual fact
  std::size_t memory_dim = 1024;   // size of m_a and m_b
  std::size_t question_dim = 512;  // size of q
  std::size_t attention_dim = 512; // size of za / zb
  std::size_t fact_hidden = 512;   // attention-GRU hidden size, size of c_a / c_b
  std::size_t cycles = 2;          // T
};

/// Weights for one modality. W1..W4 carry no biases; the memory update does.
template <typename T>
struct ModalityMemoryParams {
  Var<T> w1, w2, w3, w4;
  Var<T> init_proj;
  GruParams<T> gru;
  Var<T> update_w, update_b;
};

template <typename T>
struct CoMemoryParams {
  CoMemoryConfig config;
  ModalityMemoryParams<T> a;  // appearance
  ModalityMemoryParams<T> b;  // motion
};

template <typename T>
void register_co_memory(ParameterStore<T>& store, const std::string& prefix, const CoMemoryConfig& cfg) {
  const std::size_t mq = cfg.memory_dim + cfg.question_dim;
  for (const char* m : {"a", "b"}) {
    const std::string p = prefix + "." + m;
    store.add(p + ".W1", Shape{mq, cfg.fact_dim});
    store.add(p + ".W2", Shape{cfg.fact_dim, cfg.attention_dim});
    store.add(p + ".W3", Shape{mq, cfg.attention_dim});
    store.add(p + ".W4", Shape{cfg.attention_dim, 1});
    store.add(p + ".init.P", Shape{cfg.question_dim, cfg.memory_dim});
    register_gru(store, p + ".gru", cfg.fact_dim, cfg.fact_hidden, /*update_gate=*/false);
    store.add(p + ".update.W", Shape{mq + cfg.fact_hidden, cfg.memory_dim});
    store.add(p + ".update.b", Shape{cfg.memory_dim});
  }
}

template <typename T>
CoMemoryParams<T> bind_co_memory(Tape<T>& tape, const ParameterStore<T>& store, const std::string& prefix,
                                 const CoMemoryConfig& cfg) {
  auto bind = [&](const std::string& p) {
    ModalityMemoryParams<T> m;
    m.w1 = tape.param(store, p + ".W1");
    m.w2 = tape.param(store, p + ".W2");
    m.w3 = tape.param(store, p + ".W3");
    m.w4 = tape.param(store, p + ".W4");
    m.init_proj = tape.param(store, p + ".init.P");
    m.gru = bind_gru(tape, store, p + ".gru");
    m.update_w = tape.param(store, p + ".update.W");
    m.update_b = tape.param(store, p + ".update.b");
    return m;
  };
  return {cfg, bind(prefix + ".a"), bind(prefix + ".b")};
}

template <typename T>
struct MemoryState {
  Var<T> m_a;
  Var<T> m_b;
  std::size_t cycle = 0;
};

/// Attention produced in one cycle. Raw gates are [N x L]; level weights are
/// softmax over levels (each column sums to 1); step gates are softmax over
/// steps of the level-mean gate (sum to 1).
template <typename T>
struct AttentionMaps {
  Var<T> ga, gb;
  Var<T> level_weights_a, level_weights_b;
  Var<T> step_gates_a, step_gates_b;
  std::size_t cycle = 0;
};

struct EpisodeOptions {
  /// Test hook: replace both step-gate vectors by zeros during fact encoding.
  bool zero_step_gates = false;
};

/// m^0 = relu(q P) for each modality.
template <typename T>
MemoryState<T> init_memory(Var<T> q, const CoMemoryParams<T>& p) {
  if (q.shape() != Shape{p.config.question_dim})
    throw DimensionError("init_memory: question " + q.shape().str() + " does not match " + std::to_string(p.config.question_dim));
  return {relu(matmul(q, p.a.init_proj)), relu(matmul(q, p.b.init_proj)), 0};
}

namespace detail {

// g[i, j] = W4 (tanh(W2 (f[i, j] + W1 [own, q])) + W3 [other, q]) for all levels i, steps j.
template <typename T>
Var<T> co_attention_gates(const ContextualFactSet<T>& facts, Var<T> own_memory, Var<T> other_memory, Var<T> q,
                          const ModalityMemoryParams<T>& p) {
  const std::size_t levels = facts.size(), len = facts.length();
  for (const auto& f : facts.levels) require_same_shape(f.shape(), facts.levels[0].shape(), "co_attention");
  auto stacked = levels == 1 ? facts.levels[0] : concat(facts.levels, 0);  // [N*L x C]
  auto inner = matmul(concat<T>({own_memory, q}), p.w1);                     // [C]
  auto z = tanh(matmul(add_bias(stacked, inner), p.w2));                     // [N*L x Z]
  auto outer = matmul(concat<T>({other_memory, q}), p.w3);                   // [Z]
  auto g = matmul(add_bias(z, outer), p.w4);                                 // [N*L x 1]
  return reshape(g, Shape{levels, len});
}

}  // namespace detail

/// Co-memory attention: appearance gates use the appearance memory inside
/// the tanh and the motion memory outside it; motion gates the reverse.
template <typename T>
AttentionMaps<T> co_attention(const ContextualFactSet<T>& a, const ContextualFactSet<T>& b, const MemoryState<T>& m,
                              Var<T> q, const CoMemoryParams<T>& p) {
  if (a.size() != b.size() || a.length() != b.length())
    throw DimensionError("co_attention: appearance and motion fact sets differ in levels or length");
  AttentionMaps<T> maps;
  maps.cycle = m.cycle + 1;
  maps.ga = detail::co_attention_gates(a, m.m_a, m.m_b, q, p.a);
  maps.gb = detail::co_attention_gates(b, m.m_b, m.m_a, q, p.b);
  maps.level_weights_a = softmax(maps.ga, 0);
  maps.level_weights_b = softmax(maps.gb, 0);
  maps.step_gates_a = softmax(mean(maps.ga, 0));
  maps.step_gates_b = softmax(mean(maps.gb, 0));
  return maps;
}

/// Per-step weighted average of the fact levels: f_j = sum_i s[i, j] f_j^i.
template <typename T>
Var<T> dynamic_fact_ensemble(const ContextualFactSet<T>& facts, Var<T> level_weights) {
  const std::size_t levels = facts.size(), len = facts.length();
  if (level_weights.shape() != Shape{levels, len})
    throw DimensionError("dynamic_fact_ensemble: weights " + level_weights.shape().str() + " do not match " +
                         std::to_string(levels) + " levels of length " + std::to_string(len));
  auto w = level_weights.value();
  for (std::size_t j = 0; j < len; ++j) {
    double col = 0;
    for (std::size_t i = 0; i < levels; ++i) col += double(w[i * len + j]);
    if (std::abs(col - 1.0) > 1e-4)
      throw DomainError("dynamic_fact_ensemble: level weights at step " + std::to_string(j) + " sum to " + std::to_string(col));
  }
  Var<T> out;
  for (std::size_t i = 0; i < levels; ++i) {
    auto term = scale_rows(facts.levels[i], row(level_weights, i));
    out = out.valid() ? add(out, term) : term;
  }
  return out;
}

template <typename T>
struct CycleResult {
  MemoryState<T> memory;
  AttentionMaps<T> maps;
  Var<T> c_a, c_b;
};

/// One reading cycle: attention, ensemble, attention-GRU encoding, and the
/// separate memory updates m^t = relu(W [m^{t-1}, q, c^t] + b).
template <typename T>
CycleResult<T> memory_cycle(const ContextualFactSet<T>& a, const ContextualFactSet<T>& b, const MemoryState<T>& m, Var<T> q,
                            const CoMemoryParams<T>& p, const EpisodeOptions& opt = {}) {
  CycleResult<T> r;
  r.maps = co_attention(a, b, m, q, p);
  auto fused_a = dynamic_fact_ensemble(a, r.maps.level_weights_a);
  auto fused_b = dynamic_fact_ensemble(b, r.maps.level_weights_b);
  auto gates_a = r.maps.step_gates_a, gates_b = r.maps.step_gates_b;
  if (opt.zero_step_gates) {
    gates_a = q.tape().zeros(gates_a.shape());
    gates_b = q.tape().zeros(gates_b.shape());
  }
  r.c_a = attention_gru_encode(fused_a, gates_a, p.a.gru);
  r.c_b = attention_gru_encode(fused_b, gates_b, p.b.gru);
  r.memory.m_a = relu(affine(concat<T>({m.m_a, q, r.c_a}), p.a.update_w, p.a.update_b));
  r.memory.m_b = relu(affine(concat<T>({m.m_b, q, r.c_b}), p.b.update_w, p.b.update_b));
  r.memory.cycle = m.cycle + 1;
  return r;
}

template <typename T>
struct EpisodeResult {
  Var<T> m_h;  // [m_a^T ; m_b^T]
  MemoryState<T> memory;
  std::vector<AttentionMaps<T>> maps;
};

/// Run `cycles` memory cycles from init_memory(q).
template <typename T>
EpisodeResult<T> run_episodes(const ContextualFactSet<T>& a, const ContextualFactSet<T>& b, Var<T> q, const CoMemoryParams<T>& p,
                              std::size_t cycles, const EpisodeOptions& opt = {}) {
  if (cycles < 1) throw DomainError("run_episodes: need at least one cycle, got " + std::to_string(cycles));
  EpisodeResult<T> out;
  out.memory = init_memory(q, p);
  for (std::size_t t = 0; t < cycles; ++t) {
    auto step = memory_cycle(a, b, out.memory, q, p, opt);
    out.memory = step.memory;
    out.maps.push_back(step.maps);
  }
  out.m_h = concat<T>({out.memory.m_a, out.memory.m_b});
  return out;
}

}  // namespace comem
