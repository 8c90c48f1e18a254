#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "comem/error.hpp"
#include "comem/rng.hpp"
#include "comem/tensor.hpp"

namespace comem {

/// Named collection of learnable tensors, kept in registration order. The
/// order is part of the checkpoint format and of every deterministic
/// reduction over parameters.
template <typename T>
class ParameterStore {
 public:
  std::size_t add(const std::string& name, Shape shape) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({name, Tensor<T>(std::move(shape))});
    return entries_.size() - 1;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t size() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_.at(i).name; }
  Tensor<T>& value(std::size_t i) { return entries_.at(i).value; }
  const Tensor<T>& value(std::size_t i) const { return entries_.at(i).value; }
  Tensor<T>& value(const std::string& name) { return value(index(name)); }
  const Tensor<T>& value(const std::string& name) const { return value(index(name)); }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& e : entries_) {
      auto i = out.add(e.name, e.value.shape());
      out.value(i) = e.value.template cast<U>();
    }
    return out;
  }

 private:
  struct Entry {
    std::string name;
    Tensor<T> value;
  };
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Gradient accumulator laid out parallel to a ParameterStore.
template <typename T>
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(const ParameterStore<T>& store) {
    slots_.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) slots_.emplace_back(store.value(i).size(), T(0));
  }

  std::size_t size() const { return slots_.size(); }
  std::vector<T>& operator[](std::size_t i) { return slots_[i]; }
  const std::vector<T>& operator[](std::size_t i) const { return slots_[i]; }

  void zero() {
    for (auto& s : slots_) std::fill(s.begin(), s.end(), T(0));
  }

  void add(const Gradients& other) {
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      auto& dst = slots_[i];
      const auto& src = other.slots_[i];
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }

  void scale(T factor) {
    for (auto& s : slots_)
      for (auto& v : s) v *= factor;
  }

  double norm() const {
    double acc = 0;
    for (const auto& s : slots_)
      for (auto v : s) acc += double(v) * double(v);
    return std::sqrt(acc);
  }

 private:
  std::vector<std::vector<T>> slots_;
};

/// Uniform Glorot initialization: rank >= 2 tensors draw from [-s, s] with
/// s = sqrt(6 / (fan_in + fan_out)); vectors (biases) are zeroed. For rank-3
/// kernels (taps x in x out) the fans are taps*in and taps*out.
template <typename T>
void glorot_init(ParameterStore<T>& store, Rng& rng) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& t = store.value(i);
    const auto& s = t.shape();
    if (s.rank() == 1) {
      std::fill(t.storage().begin(), t.storage().end(), T(0));
      continue;
    }
    double fan_in = 0, fan_out = 0;
    if (s.rank() == 2) {
      fan_in = double(s[0]);
      fan_out = double(s[1]);
    } else {
      double taps = 1;
      for (std::size_t d = 0; d + 2 < s.rank(); ++d) taps *= double(s[d]);
      fan_in = taps * double(s[s.rank() - 2]);
      fan_out = taps * double(s[s.rank() - 1]);
    }
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& v : t.storage()) v = T(rng.uniform(-bound, bound));
  }
}

}  // namespace comem
