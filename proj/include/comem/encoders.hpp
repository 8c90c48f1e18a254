#pragma once

#include <cstddef>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "comem/error.hpp"
#include "comem/ops.hpp"
#include "comem/parameters.hpp"
#include "comem/tape.hpp"

namespace comem {

/// Weights of a GRU cell bound to a tape. Input maps are [Din x H],
/// recurrent maps [H x H], biases [H]. The update-gate triple is absent for
/// the attention-based variant, whose update gate comes from outside.
template <typename T>
struct GruParams {
  Var<T> wz, uz, bz;
  Var<T> wr, ur, br;
  Var<T> wh, uh, bh;

  std::size_t input_size() const { return wr.shape()[0]; }
  std::size_t hidden_size() const { return wr.shape()[1]; }
  bool has_update_gate() const { return wz.valid(); }
};

/// Register GRU weights named `<prefix>.{Wz,Uz,bz,Wr,Ur,br,Wh,Uh,bh}`.
template <typename T>
void register_gru(ParameterStore<T>& store, const std::string& prefix, std::size_t din, std::size_t hidden,
                  bool update_gate = true) {
  const char* gates = update_gate ? "zrh" : "rh";
  for (const char* g = gates; *g; ++g) {
    store.add(prefix + ".W" + *g, Shape{din, hidden});
    store.add(prefix + ".U" + *g, Shape{hidden, hidden});
    store.add(prefix + ".b" + *g, Shape{hidden});
  }
}

template <typename T>
GruParams<T> bind_gru(Tape<T>& tape, const ParameterStore<T>& store, const std::string& prefix) {
  GruParams<T> p;
  if (store.contains(prefix + ".Wz")) {
    p.wz = tape.param(store, prefix + ".Wz");
    p.uz = tape.param(store, prefix + ".Uz");
    p.bz = tape.param(store, prefix + ".bz");
  }
  p.wr = tape.param(store, prefix + ".Wr");
  p.ur = tape.param(store, prefix + ".Ur");
  p.br = tape.param(store, prefix + ".br");
  p.wh = tape.param(store, prefix + ".Wh");
  p.uh = tape.param(store, prefix + ".Uh");
  p.bh = tape.param(store, prefix + ".bh");
  return p;
}

namespace detail {

template <typename T>
void check_gru_input(const GruParams<T>& p, const Shape& x, const char* op) {
  if (x.cols() != p.input_size())
    throw DimensionError(std::string(op) + ": input " + x.str() + " does not match GRU input size " +
                         std::to_string(p.input_size()));
}

// h_prev + z * (candidate - h_prev), i.e. z*candidate + (1 - z)*h_prev.
template <typename T>
Var<T> interpolate(Var<T> h_prev, Var<T> candidate, Var<T> z) {
  auto delta = sub(candidate, h_prev);
  return add(h_prev, z.shape().numel() == 1 && h_prev.shape().numel() != 1 ? mul_scalar(delta, z) : mul(z, delta));
}

}  // namespace detail

/// One standard GRU step:
///   z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
///   h~ = tanh(x Wh + (r*h) Uh + bh), h = z*h~ + (1 - z)*h.
template <typename T>
Var<T> gru_step(Var<T> x, Var<T> h_prev, const GruParams<T>& p) {
  if (!p.has_update_gate()) throw ConfigError("gru_step: parameters have no update gate");
  detail::check_gru_input(p, x.shape(), "gru_step");
  if (h_prev.shape() != Shape{p.hidden_size()})
    throw DimensionError("gru_step: hidden state " + h_prev.shape().str() + " does not match H=" + std::to_string(p.hidden_size()));
  auto z = sigmoid(add(add_bias(matmul(x, p.wz), p.bz), matmul(h_prev, p.uz)));
  auto r = sigmoid(add(add_bias(matmul(x, p.wr), p.br), matmul(h_prev, p.ur)));
  auto cand = tanh(add(add_bias(matmul(x, p.wh), p.bh), matmul(mul(r, h_prev), p.uh)));
  return detail::interpolate(h_prev, cand, z);
}

/// Run a GRU over the rows of xs [n x Din] from h0 = 0; returns all hidden
/// states as [n x H]. Input projections are computed for all steps at once.
template <typename T>
Var<T> gru_sequence(Var<T> xs, const GruParams<T>& p) {
  detail::check_gru_input(p, xs.shape(), "gru_sequence");
  auto& tape = xs.tape();
  const std::size_t n = xs.shape().rows();
  auto xz = add_bias(matmul(xs, p.wz), p.bz);
  auto xr = add_bias(matmul(xs, p.wr), p.br);
  auto xh = add_bias(matmul(xs, p.wh), p.bh);
  if (xs.shape().rank() == 1) {
    xz = reshape(xz, Shape{1, p.hidden_size()});
    xr = reshape(xr, Shape{1, p.hidden_size()});
    xh = reshape(xh, Shape{1, p.hidden_size()});
  }
  Var<T> h = tape.zeros(Shape{p.hidden_size()});
  std::vector<Var<T>> states;
  states.reserve(n);
  for (std::size_t j = 0; j < n; ++j) {
    auto z = sigmoid(add(row(xz, j), matmul(h, p.uz)));
    auto r = sigmoid(add(row(xr, j), matmul(h, p.ur)));
    auto cand = tanh(add(row(xh, j), matmul(mul(r, h), p.uh)));
    h = detail::interpolate(h, cand, z);
    states.push_back(h);
  }
  return stack(states);
}

/// Attention-based GRU: the update gate at step j is the external scalar
/// gates[j], h_j = g_j * h~_j + (1 - g_j) * h_{j-1}, with h_0 = 0. Returns
/// the final hidden state. `gates` must lie in [0, 1].
template <typename T>
Var<T> attention_gru_encode(Var<T> facts, Var<T> gates, const GruParams<T>& p) {
  detail::require_rank(facts, 2, 2, "attention_gru_encode");
  detail::check_gru_input(p, facts.shape(), "attention_gru_encode");
  const std::size_t len = facts.shape()[0];
  if (gates.shape() != Shape{len})
    throw DimensionError("attention_gru_encode: gates " + gates.shape().str() + " do not match facts " + facts.shape().str());
  for (auto g : gates.value()) {
    if (g < T(0) || g > T(1)) throw DomainError("attention_gru_encode: gate " + std::to_string(double(g)) + " outside [0, 1]");
  }
  auto& tape = facts.tape();
  auto xr = add_bias(matmul(facts, p.wr), p.br);
  auto xh = add_bias(matmul(facts, p.wh), p.bh);
  Var<T> h = tape.zeros(Shape{p.hidden_size()});
  for (std::size_t j = 0; j < len; ++j) {
    auto r = sigmoid(add(row(xr, j), matmul(h, p.ur)));
    auto cand = tanh(add(row(xh, j), matmul(mul(r, h), p.uh)));
    h = detail::interpolate(h, cand, element(gates, j));
  }
  return h;
}

/// Token id -> embedding lookup table of shape [V x E].
template <typename T>
Var<T> embed_tokens(Var<T> table, const std::vector<std::size_t>& tokens) {
  const std::size_t vocab = table.shape()[0];
  for (auto id : tokens) {
    if (id >= vocab) throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(vocab));
  }
  return gather_rows(table, tokens);
}

/// Question (and answer-candidate) encoder: embed tokens, run a two-layer
/// GRU, return the final top-layer hidden state.
template <typename T>
Var<T> encode_question(const std::vector<std::size_t>& tokens, Var<T> table, const GruParams<T>& layer1,
                       const GruParams<T>& layer2) {
  if (tokens.empty()) throw DomainError("encode_question: empty token sequence");
  auto embedded = embed_tokens(table, tokens);
  auto h1 = gru_sequence(embedded, layer1);
  auto h2 = gru_sequence(h1, layer2);
  return row(h2, tokens.size() - 1);
}

/// Candidate answers share the question encoder's weights.
template <typename T>
Var<T> encode_answer_candidate(const std::vector<std::size_t>& tokens, Var<T> table, const GruParams<T>& layer1,
                               const GruParams<T>& layer2) {
  return encode_question(tokens, table, layer1, layer2);
}

/// Load "word v1 ... vE" lines into the rows of `table` [V x E] for words
/// present in `vocab`. Unknown words are skipped. Returns the rows set.
template <typename T>
std::size_t load_pretrained_embeddings(std::istream& in, const std::map<std::string, std::size_t>& vocab, Tensor<T>& table) {
  const std::size_t rows = table.shape()[0], dim = table.shape()[1];
  std::string line;
  std::size_t lineno = 0, loaded = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word)) continue;
    std::vector<T> values;
    double v;
    while (ls >> v) values.push_back(T(v));
    if (!ls.eof()) throw FormatError("embeddings line " + std::to_string(lineno) + ": non-numeric value");
    if (values.size() != dim)
      throw FormatError("embeddings line " + std::to_string(lineno) + ": expected " + std::to_string(dim) + " values, got " +
                        std::to_string(values.size()));
    auto it = vocab.find(word);
    if (it == vocab.end()) continue;
    if (it->second >= rows) throw VocabularyError("embeddings: id " + std::to_string(it->second) + " outside table");
    std::copy(values.begin(), values.end(), table.storage().begin() + it->second * dim);
    ++loaded;
  }
  return loaded;
}

}  // namespace comem
