#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "comem/co_memory.hpp"
#include "comem/data.hpp"
#include "comem/decoders.hpp"
#include "comem/encoders.hpp"
#include "comem/error.hpp"
#include "comem/facts.hpp"
#include "comem/parameters.hpp"
#include "comem/rng.hpp"
#include "comem/tape.hpp"

namespace comem {

/// Every dimension of one task model.
struct ModelConfig {
  TaskKind task = TaskKind::RepetitionCount;
  std::size_t length = 34;
  std::size_t feature_dim_a = 2048;
  std::size_t feature_dim_b = 2048;
  std::size_t channels = 1024;
  std::size_t levels = 3;
  std::size_t memory_dim = 1024;
  std::size_t fact_hidden = 512;
  std::size_t attention_dim = 512;
  std::size_t question_dim = 512;
  std::size_t embedding_dim = 300;
  std::size_t vocab_size = 1;
  std::size_t cycles = 2;
  std::size_t conv_taps = 3;
  std::size_t deconv_taps = 2;
  /// Frame QA: raw answer values seen in training, in class-index order.
  std::vector<int> answer_values;

  /// Dimensions of the published configuration.
  static ModelConfig full(TaskKind task, std::size_t vocab) {
    ModelConfig c;
    c.task = task;
    c.vocab_size = vocab;
    return c;
  }

  /// Narrow widths that train in minutes on one CPU core.
  static ModelConfig desk(TaskKind task, std::size_t vocab, std::size_t feature_dim_a, std::size_t feature_dim_b) {
    ModelConfig c;
    c.task = task;
    c.vocab_size = vocab;
    c.feature_dim_a = feature_dim_a;
    c.feature_dim_b = feature_dim_b;
    c.channels = 32;
    c.memory_dim = 32;
    c.fact_hidden = 32;
    c.attention_dim = 16;
    c.question_dim = 32;
    c.embedding_dim = 16;
    return c;
  }

  /// Smallest configuration exercising every mechanism (gradient checks).
  static ModelConfig tiny(TaskKind task, std::size_t vocab = 6) {
    ModelConfig c;
    c.task = task;
    c.vocab_size = vocab;
    c.length = 4;
    c.feature_dim_a = 4;
    c.feature_dim_b = 4;
    c.channels = 4;
    c.levels = 2;
    c.memory_dim = 4;
    c.fact_hidden = 3;
    c.attention_dim = 3;
    c.question_dim = 3;
    c.embedding_dim = 2;
    c.cycles = 2;
    if (task == TaskKind::FrameQA) c.answer_values = {0, 1, 2};
    return c;
  }

  std::size_t mh_dim() const { return 2 * memory_dim; }

  PyramidConfig pyramid(Modality m) const {
    PyramidConfig p;
    p.input_dim = m == Modality::Appearance ? feature_dim_a : feature_dim_b;
    p.channels = channels;
    p.levels = levels;
    p.conv_taps = conv_taps;
    p.deconv_taps = deconv_taps;
    return p;
  }

  CoMemoryConfig co_memory() const {
    return {channels, memory_dim, question_dim, attention_dim, fact_hidden, cycles};
  }

  /// Class index of a raw frame answer, if it was seen in training.
  std::optional<std::size_t> answer_class(int value) const {
    for (std::size_t i = 0; i < answer_values.size(); ++i)
      if (answer_values[i] == value) return i;
    return std::nullopt;
  }

  void validate() const {
    for (auto v : {length, feature_dim_a, feature_dim_b, channels, levels, memory_dim, fact_hidden, attention_dim, question_dim,
                   embedding_dim, vocab_size, cycles, conv_taps, deconv_taps}) {
      if (v < 1) throw ConfigError("model config: all dimensions must be positive");
    }
    if (conv_taps % 2 == 0) throw ConfigError("model config: conv taps must be odd to keep level length");
    if (task == TaskKind::FrameQA && answer_values.empty()) throw ConfigError("model config: frame task needs answer classes");
    pyramid_lengths(length, pyramid(Modality::Appearance));
  }
};

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["task"] = task_tag(c.task);
  j["length"] = c.length;
  j["feature_dim_a"] = c.feature_dim_a;
  j["feature_dim_b"] = c.feature_dim_b;
  j["channels"] = c.channels;
  j["levels"] = c.levels;
  j["memory_dim"] = c.memory_dim;
  j["fact_hidden"] = c.fact_hidden;
  j["attention_dim"] = c.attention_dim;
  j["question_dim"] = c.question_dim;
  j["embedding_dim"] = c.embedding_dim;
  j["vocab_size"] = c.vocab_size;
  j["cycles"] = c.cycles;
  j["conv_taps"] = c.conv_taps;
  j["deconv_taps"] = c.deconv_taps;
  j["answer_values"] = c.answer_values;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.task = parse_task(j.at("task").get<std::string>());
    c.length = j.at("length").get<std::size_t>();
    c.feature_dim_a = j.at("feature_dim_a").get<std::size_t>();
    c.feature_dim_b = j.at("feature_dim_b").get<std::size_t>();
    c.channels = j.at("channels").get<std::size_t>();
    c.levels = j.at("levels").get<std::size_t>();
    c.memory_dim = j.at("memory_dim").get<std::size_t>();
    c.fact_hidden = j.at("fact_hidden").get<std::size_t>();
    c.attention_dim = j.at("attention_dim").get<std::size_t>();
    c.question_dim = j.at("question_dim").get<std::size_t>();
    c.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.cycles = j.at("cycles").get<std::size_t>();
    c.conv_taps = j.at("conv_taps").get<std::size_t>();
    c.deconv_taps = j.at("deconv_taps").get<std::size_t>();
    c.answer_values = j.at("answer_values").get<std::vector<int>>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
}

/// Register every parameter of a task model, in a fixed order.
template <typename T>
ParameterStore<T> make_parameters(const ModelConfig& cfg) {
  cfg.validate();
  ParameterStore<T> store;
  store.add("embed", Shape{cfg.vocab_size, cfg.embedding_dim});
  register_gru(store, "qenc.l1", cfg.embedding_dim, cfg.question_dim);
  register_gru(store, "qenc.l2", cfg.question_dim, cfg.question_dim);
  if (is_multiple_choice(cfg.task)) {
    store.add("cand.fuse.W", Shape{2 * cfg.question_dim, cfg.question_dim});
    store.add("cand.fuse.b", Shape{cfg.question_dim});
  }
  register_pyramid(store, "pyr.a", cfg.pyramid(Modality::Appearance));
  register_pyramid(store, "pyr.b", cfg.pyramid(Modality::Motion));
  register_co_memory(store, "comem", cfg.co_memory());
  register_decoder(store, cfg.task, cfg.mh_dim(), cfg.answer_values.size());
  return store;
}

/// Inputs of one forward pass, already padded to the model length.
template <typename T>
struct Example {
  Tensor<T> appearance;  // [L x Da]
  Tensor<T> motion;      // [L x Db]
  QAItem item;
};

template <typename T>
Example<T> make_example(const FeatureSequence& appearance, const FeatureSequence& motion, const QAItem& item, std::size_t length) {
  return {pad_or_truncate(appearance, length).template cast<T>(), pad_or_truncate(motion, length).template cast<T>(), item};
}

/// Result of one full forward pass.
template <typename T>
struct Forward {
  Var<T> loss;                                          // invalid when the gold answer has no class
  std::vector<T> scores;                                // MC scores, count regression, or class probabilities
  int prediction = 0;                                   // candidate index, count, or raw frame answer value
  std::vector<EpisodeResult<T>> episodes;               // one per candidate for MC, else one
  ContextualFactSet<T> facts_a, facts_b;
  Var<T> question;
};

/// The co-memory network for one task. Holds the configuration; parameters
/// live in a ParameterStore so that several precisions and optimizers can
/// share the forward definition.
template <typename T>
class CoMemoryModel {
 public:
  explicit CoMemoryModel(ModelConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const ModelConfig& config() const { return cfg_; }

  ParameterStore<T> make_store(std::uint64_t seed) const {
    auto store = make_parameters<T>(cfg_);
    Rng rng(seed);
    glorot_init(store, rng);
    return store;
  }

  Forward<T> forward(Tape<T>& tape, const ParameterStore<T>& store, const Example<T>& ex, const EpisodeOptions& opt = {}) const {
    const auto& item = ex.item;
    if (item.task != cfg_.task)
      throw ConfigError(std::string("model trained for task '") + task_tag(cfg_.task) + "' got item of task '" + task_tag(item.task) + "'");
    Forward<T> out;
    auto pa = bind_pyramid(tape, store, "pyr.a", cfg_.pyramid(Modality::Appearance));
    auto pb = bind_pyramid(tape, store, "pyr.b", cfg_.pyramid(Modality::Motion));
    out.facts_a = build_contextual_facts(tape.constant(ex.appearance), pa, Modality::Appearance);
    out.facts_b = build_contextual_facts(tape.constant(ex.motion), pb, Modality::Motion);

    auto table = tape.param(store, "embed");
    auto l1 = bind_gru(tape, store, "qenc.l1");
    auto l2 = bind_gru(tape, store, "qenc.l2");
    auto cm = bind_co_memory(tape, store, "comem", cfg_.co_memory());
    out.question = encode_question(item.question, table, l1, l2);

    switch (cfg_.task) {
      case TaskKind::RepeatingAction:
      case TaskKind::StateTransition: {
        if (item.candidates.size() != kNumCandidates)
          throw DomainError("answer_multiple_choice: expected 5 candidates, got " + std::to_string(item.candidates.size()));
        auto fuse_w = tape.param(store, "cand.fuse.W");
        auto fuse_b = tape.param(store, "cand.fuse.b");
        auto w_m = tape.param(store, "dec.mc.W");
        std::vector<Var<T>> scores;
        for (const auto& cand : item.candidates) {
          auto e = encode_answer_candidate(cand, table, l1, l2);
          auto qk = tanh(affine(concat<T>({out.question, e}), fuse_w, fuse_b));
          out.episodes.push_back(run_episodes(out.facts_a, out.facts_b, qk, cm, cfg_.cycles, opt));
          scores.push_back(score_choice(out.episodes.back().m_h, w_m));
          out.scores.push_back(scores.back().item());
        }
        out.prediction = int(argmax(out.scores));
        std::vector<Var<T>> negatives;
        for (std::size_t k = 0; k < scores.size(); ++k)
          if (int(k) != item.answer) negatives.push_back(scores[k]);
        out.loss = hinge_loss(scores.at(std::size_t(item.answer)), negatives);
        break;
      }
      case TaskKind::RepetitionCount: {
        out.episodes.push_back(run_episodes(out.facts_a, out.facts_b, out.question, cm, cfg_.cycles, opt));
        auto r = count_regression(out.episodes.back().m_h, tape.param(store, "dec.count.W"), tape.param(store, "dec.count.b"));
        out.scores = {r.item()};
        out.prediction = predict_count(double(r.item()));
        out.loss = l2_count_loss(r, item.answer);
        break;
      }
      case TaskKind::FrameQA: {
        out.episodes.push_back(run_episodes(out.facts_a, out.facts_b, out.question, cm, cfg_.cycles, opt));
        auto logits = word_logits(out.episodes.back().m_h, tape.param(store, "dec.frame.W"), tape.param(store, "dec.frame.b"));
        auto probs = softmax(logits);
        out.scores.assign(probs.value().begin(), probs.value().end());
        out.prediction = cfg_.answer_values.at(argmax(out.scores));
        if (auto cls = cfg_.answer_class(item.answer)) out.loss = cross_entropy(logits, *cls);
        break;
      }
    }
    return out;
  }

  /// Forward without gradient recording; returns the prediction only.
  int predict(const ParameterStore<T>& store, const Example<T>& ex) const {
    Tape<T> tape(false);
    return forward(tape, store, ex).prediction;
  }

 private:
  ModelConfig cfg_;
};

}  // namespace comem
