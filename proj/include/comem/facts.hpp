#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "comem/error.hpp"
#include "comem/ops.hpp"
#include "comem/parameters.hpp"
#include "comem/tape.hpp"

namespace comem {

enum class Modality { Appearance, Motion };

inline const char* modality_name(Modality m) { return m == Modality::Appearance ? "appearance" : "motion"; }

/// Geometry of the temporal conv-deconv pyramid.
struct PyramidConfig {
  std::size_t input_dim = 2048;
  std::size_t channels = 1024;
  std::size_t levels = 3;
  std::size_t conv_taps = 3;
  std::size_t deconv_taps = 2;
  std::size_t pool_window = 2;
  std::size_t pool_stride = 2;
};

/// N fact levels of identical shape [L x C] for one modality.
template <typename T>
struct ContextualFactSet {
  std::vector<Var<T>> levels;
  Modality modality = Modality::Appearance;

  std::size_t size() const { return levels.size(); }
  std::size_t length() const { return levels.at(0).shape()[0]; }
  std::size_t channels() const { return levels.at(0).shape()[1]; }
};

/// Encoder-path lengths: lengths[0] = L, lengths[k] = maxpool(lengths[k-1]).
/// Throws when the coarsest level would be shorter than two steps.
inline std::vector<std::size_t> pyramid_lengths(std::size_t length, const PyramidConfig& cfg) {
  if (cfg.levels < 1) throw GeometryError("pyramid: need at least one level");
  if (length < 1) throw GeometryError("pyramid: empty input sequence");
  std::vector<std::size_t> lengths{length};
  for (std::size_t n = 1; n < cfg.levels; ++n)
    lengths.push_back(maxpool1d_output_length(lengths.back(), cfg.pool_window, cfg.pool_stride));
  if (cfg.levels > 1 && lengths.back() < 2)
    throw GeometryError("pyramid: L=" + std::to_string(length) + " too short for " + std::to_string(cfg.levels) +
                        " levels (coarsest length " + std::to_string(lengths.back()) + ")");
  return lengths;
}

/// Register pyramid weights under `prefix`:
///   conv{n}.K [k x Cin x C], conv{n}.b [C]        encoder conv of level n
///   up{n}_{s}.K [kd x C x C], up{n}_{s}.b [C]     deconv of level n from length index s to s-1
template <typename T>
void register_pyramid(ParameterStore<T>& store, const std::string& prefix, const PyramidConfig& cfg) {
  for (std::size_t n = 1; n <= cfg.levels; ++n) {
    const std::size_t cin = n == 1 ? cfg.input_dim : cfg.channels;
    store.add(prefix + ".conv" + std::to_string(n) + ".K", Shape{cfg.conv_taps, cin, cfg.channels});
    store.add(prefix + ".conv" + std::to_string(n) + ".b", Shape{cfg.channels});
  }
  for (std::size_t n = 2; n <= cfg.levels; ++n) {
    for (std::size_t s = n - 1; s >= 1; --s) {
      const std::string name = prefix + ".up" + std::to_string(n) + "_" + std::to_string(s);
      store.add(name + ".K", Shape{cfg.deconv_taps, cfg.channels, cfg.channels});
      store.add(name + ".b", Shape{cfg.channels});
    }
  }
}

template <typename T>
struct PyramidParams {
  PyramidConfig config;
  std::vector<Var<T>> conv_kernel, conv_bias;
  // up_kernel[n-2][k] is the k-th deconv (coarsest first) of level n.
  std::vector<std::vector<Var<T>>> up_kernel, up_bias;
};

template <typename T>
PyramidParams<T> bind_pyramid(Tape<T>& tape, const ParameterStore<T>& store, const std::string& prefix,
                              const PyramidConfig& cfg) {
  PyramidParams<T> p;
  p.config = cfg;
  for (std::size_t n = 1; n <= cfg.levels; ++n) {
    p.conv_kernel.push_back(tape.param(store, prefix + ".conv" + std::to_string(n) + ".K"));
    p.conv_bias.push_back(tape.param(store, prefix + ".conv" + std::to_string(n) + ".b"));
  }
  for (std::size_t n = 2; n <= cfg.levels; ++n) {
    std::vector<Var<T>> ks, bs;
    for (std::size_t s = n - 1; s >= 1; --s) {
      const std::string name = prefix + ".up" + std::to_string(n) + "_" + std::to_string(s);
      ks.push_back(tape.param(store, name + ".K"));
      bs.push_back(tape.param(store, name + ".b"));
    }
    p.up_kernel.push_back(std::move(ks));
    p.up_bias.push_back(std::move(bs));
  }
  return p;
}

/// Build N contextual fact levels from unit features [L x D]:
///   encoder  E1 = relu(conv(units)), En = relu(conv(maxpool(E(n-1))))
///   decoder  Fn = relu(deconv(...relu(deconv(En))...)) back to length L, F1 = E1.
template <typename T>
ContextualFactSet<T> build_contextual_facts(Var<T> units, const PyramidParams<T>& p, Modality modality = Modality::Appearance) {
  const auto& cfg = p.config;
  detail::require_rank(units, 2, 2, "build_contextual_facts");
  if (units.shape()[1] != cfg.input_dim)
    throw DimensionError("build_contextual_facts: input " + units.shape().str() + " does not match feature width " +
                         std::to_string(cfg.input_dim));
  const auto lengths = pyramid_lengths(units.shape()[0], cfg);
  const std::size_t pad = (cfg.conv_taps - 1) / 2;

  std::vector<Var<T>> encoded;
  Var<T> x = units;
  for (std::size_t n = 0; n < cfg.levels; ++n) {
    if (n > 0) x = maxpool1d(x, cfg.pool_window, cfg.pool_stride);
    x = relu(add_bias(conv1d_temporal(x, p.conv_kernel[n], 1, pad), p.conv_bias[n]));
    encoded.push_back(x);
  }

  ContextualFactSet<T> facts;
  facts.modality = modality;
  facts.levels.push_back(encoded[0]);
  for (std::size_t n = 1; n < cfg.levels; ++n) {
    Var<T> y = encoded[n];
    const auto& ks = p.up_kernel[n - 1];
    const auto& bs = p.up_bias[n - 1];
    for (std::size_t k = 0; k < ks.size(); ++k) {
      const std::size_t target = lengths[n - 1 - k];
      y = relu(add_bias(deconv1d_temporal(y, ks[k], cfg.pool_stride, target), bs[k]));
    }
    facts.levels.push_back(y);
  }
  return facts;
}

/// Number of input units that can influence one output step of `level`
/// (1-based), by composing the usual (size, jump) receptive-field recurrence.
inline std::size_t receptive_field(std::size_t level, const PyramidConfig& cfg) {
  if (level < 1 || level > cfg.levels)
    throw DomainError("receptive_field: level " + std::to_string(level) + " outside 1.." + std::to_string(cfg.levels));
  std::size_t size = 1, jump = 1;
  size += (cfg.conv_taps - 1) * jump;
  for (std::size_t n = 1; n < level; ++n) {
    size += (cfg.pool_window - 1) * jump;
    jump *= cfg.pool_stride;
    size += (cfg.conv_taps - 1) * jump;
  }
  // A stride-s deconv output draws on ceil(kd / s) coarse steps.
  const std::size_t span = (cfg.deconv_taps + cfg.pool_stride - 1) / cfg.pool_stride;
  for (std::size_t n = 1; n < level; ++n) {
    size += (span - 1) * jump;
    jump /= cfg.pool_stride;
  }
  return size;
}

}  // namespace comem
