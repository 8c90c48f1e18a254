#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "comem/data.hpp"
#include "comem/error.hpp"
#include "comem/model.hpp"
#include "comem/parameters.hpp"
#include "comem/rng.hpp"

namespace comem {

/// Adam with bias correction; moments persist per parameter.
template <typename T>
class Adam {
 public:
  Adam(const ParameterStore<T>& store, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(store), v_(store) {}

  void step(ParameterStore<T>& store, const Gradients<T>& grads) {
    if (grads.size() != store.size()) throw DimensionError("adam: gradient count does not match parameters");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, double(t_));
    const double c2 = 1.0 - std::pow(beta2_, double(t_));
    for (std::size_t p = 0; p < store.size(); ++p) {
      auto& w = store.value(p).storage();
      const auto& g = grads[p];
      if (g.size() != w.size()) throw DimensionError("adam: gradient shape mismatch for '" + store.name(p) + "'");
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = T(beta1_ * double(m[k]) + (1.0 - beta1_) * double(g[k]));
        v[k] = T(beta2_ * double(v[k]) + (1.0 - beta2_) * double(g[k]) * double(g[k]));
        const double mhat = double(m[k]) / c1;
        const double vhat = double(v[k]) / c2;
        w[k] = T(double(w[k]) - lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  std::uint64_t steps() const { return t_; }
  const Gradients<T>& first_moment() const { return m_; }
  const Gradients<T>& second_moment() const { return v_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  Gradients<T> m_, v_;
};

/// Worker count from CMEM_THREADS (default 1).
inline std::size_t worker_count() {
  if (const char* env = std::getenv("CMEM_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return std::size_t(n);
  }
  return 1;
}

/// Run fn(i) for i in [0, n) on up to `workers` threads.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Features of every referenced video plus the QA splits of one task.
struct TaskData {
  TaskKind task = TaskKind::RepetitionCount;
  std::size_t vocab_size = 0;
  std::size_t feature_dim_a = 0, feature_dim_b = 0;
  std::map<std::string, std::pair<FeatureSequence, FeatureSequence>> videos;  // appearance, motion
  std::vector<QAItem> train, val, test;
};

inline std::filesystem::path feature_path(const std::filesystem::path& dir, const std::string& video, Modality m) {
  return dir / "features" / (video + (m == Modality::Appearance ? ".appearance.cmf" : ".motion.cmf"));
}

inline std::filesystem::path qa_path(const std::filesystem::path& dir, TaskKind task, const std::string& split) {
  return dir / (std::string(task_tag(task)) + "_" + split + ".jsonl");
}

/// Read the features of every video referenced by `items` into `data`,
/// checking token ids against the vocabulary and widths for consistency.
inline void load_videos(const std::filesystem::path& dir, const std::vector<QAItem>& items, TaskData& data) {
  for (const auto& item : items) {
    auto check_ids = [&](const std::vector<std::size_t>& ids) {
      for (auto id : ids)
        if (id >= data.vocab_size) throw FormatError("item '" + item.id + "': token id " + std::to_string(id) + " outside vocabulary");
    };
    check_ids(item.question);
    for (const auto& c : item.candidates) check_ids(c);
    if (data.videos.count(item.video)) continue;
    auto a = read_feature_file(feature_path(dir, item.video, Modality::Appearance));
    auto b = read_feature_file(feature_path(dir, item.video, Modality::Motion));
    if (data.feature_dim_a == 0) {
      data.feature_dim_a = a.shape().cols();
      data.feature_dim_b = b.shape().cols();
    }
    if (a.shape().cols() != data.feature_dim_a || b.shape().cols() != data.feature_dim_b)
      throw FormatError("video '" + item.video + "': feature width differs from the rest of the dataset");
    data.videos.emplace(item.video, std::make_pair(std::move(a), std::move(b)));
  }
}

/// Load and validate everything training needs before the first step.
inline TaskData load_task_data(const std::filesystem::path& dir, TaskKind task) {
  if (!std::filesystem::is_directory(dir)) throw FormatError("data directory '" + dir.string() + "' does not exist");
  TaskData data;
  data.task = task;
  data.vocab_size = vocabulary_size(load_vocabulary(dir / "vocab.json"));
  data.train = load_qa_file(qa_path(dir, task, "train"));
  data.val = load_qa_file(qa_path(dir, task, "val"));
  data.test = load_qa_file(qa_path(dir, task, "test"));
  for (const auto* split : {&data.train, &data.val, &data.test}) {
    for (const auto& item : *split)
      if (item.task != task)
        throw FormatError("item '" + item.id + "' has task '" + task_tag(item.task) + "', expected '" + task_tag(task) + "'");
    load_videos(dir, *split, data);
  }
  if (data.train.empty()) throw FormatError("no training items for task '" + std::string(task_tag(task)) + "'");
  return data;
}

/// Sorted distinct training answers; these become the frame classes.
inline std::vector<int> answer_classes(const std::vector<QAItem>& train) {
  std::set<int> values;
  for (const auto& item : train) values.insert(item.answer);
  return {values.begin(), values.end()};
}

struct TrainConfig {
  TaskKind task = TaskKind::RepetitionCount;
  double lr = 1e-3;
  std::size_t batch = 64;
  std::size_t epochs = 50;
  std::size_t cycles = 2;
  std::size_t levels = 3;
  std::size_t length = 34;
  std::uint64_t seed = 1;
  std::string precision = "single";
  std::string dims = "desk";   // "desk" or "full" widths
  double clip_norm = 0;        // global gradient-norm clip; 0 disables
  std::size_t threads = 1;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("train: learning rate must be positive");
    if (batch < 1 || epochs < 1 || cycles < 1 || levels < 1 || length < 1) throw ConfigError("train: counts must be positive");
    if (precision != "single" && precision != "double") throw ConfigError("train: precision must be single or double");
    if (dims != "desk" && dims != "full") throw ConfigError("train: dims must be desk or full");
    if (clip_norm < 0) throw ConfigError("train: clip norm must be >= 0");
  }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["task"] = task_tag(c.task);
  j["lr"] = c.lr;
  j["batch"] = c.batch;
  j["epochs"] = c.epochs;
  j["cycles"] = c.cycles;
  j["levels"] = c.levels;
  j["length"] = c.length;
  j["seed"] = c.seed;
  j["precision"] = c.precision;
  j["dims"] = c.dims;
  j["clip_norm"] = c.clip_norm;
  j["adam"] = {{"beta1", 0.9}, {"beta2", 0.999}, {"eps", 1e-8}};
  return j;
}

inline ModelConfig model_config_for(const TrainConfig& tc, const TaskData& data) {
  ModelConfig mc = tc.dims == "full" ? ModelConfig::full(tc.task, data.vocab_size)
                                      : ModelConfig::desk(tc.task, data.vocab_size, data.feature_dim_a, data.feature_dim_b);
  mc.feature_dim_a = data.feature_dim_a;
  mc.feature_dim_b = data.feature_dim_b;
  mc.length = tc.length;
  mc.levels = tc.levels;
  mc.cycles = tc.cycles;
  if (tc.task == TaskKind::FrameQA) mc.answer_values = answer_classes(data.train);
  return mc;
}

struct Prediction {
  std::string id;
  int pred = 0;
  int gold = 0;
};

struct EvalResult {
  double metric = 0;
  std::string metric_name;  // "ACC" or "MSE"
  std::vector<Prediction> predictions;
};

inline bool lower_is_better(TaskKind task) { return task == TaskKind::RepetitionCount; }

/// ACC: fraction of exact matches. MSE: mean squared difference between the
/// clamped integer predictions and the ground truth.
inline double score_predictions(TaskKind task, const std::vector<Prediction>& preds) {
  if (preds.empty()) return 0;
  double acc = 0;
  for (const auto& p : preds) {
    if (lower_is_better(task)) acc += double(p.pred - p.gold) * double(p.pred - p.gold);
    else acc += p.pred == p.gold ? 1.0 : 0.0;
  }
  return acc / double(preds.size());
}

template <typename T>
EvalResult evaluate(const CoMemoryModel<T>& model, const ParameterStore<T>& store, const TaskData& data,
                    const std::vector<QAItem>& items, std::size_t workers = 1) {
  const auto& cfg = model.config();
  EvalResult r;
  r.metric_name = lower_is_better(cfg.task) ? "MSE" : "ACC";
  r.predictions.resize(items.size());
  parallel_for(items.size(), workers, [&](std::size_t i) {
    const auto& item = items[i];
    if (item.task != cfg.task)
      throw ConfigError(std::string("checkpoint task '") + task_tag(cfg.task) + "' does not match item task '" + task_tag(item.task) + "'");
    const auto& [a, b] = data.videos.at(item.video);
    r.predictions[i] = {item.id, model.predict(store, make_example<T>(a, b, item, cfg.length)), item.answer};
  });
  r.metric = score_predictions(cfg.task, r.predictions);
  return r;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_metric = 0;
  double seconds = 0;
};

/// Best-validation parameters plus everything needed to rebuild the model.
struct Checkpoint {
  ModelConfig model;
  nlohmann::ordered_json train_config;
  std::size_t epoch = 0;
  nlohmann::ordered_json history = nlohmann::ordered_json::array();
  ParameterStore<float> params;
};

inline nlohmann::ordered_json history_json(const std::vector<EpochRecord>& log) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& e : log) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["train_loss"] = e.train_loss;
    j["val_metric"] = e.val_metric;
    j["seconds"] = e.seconds;
    arr.push_back(j);
  }
  return arr;
}

/// Manifest JSON at `path`, parameter blob (float32 little-endian, in
/// registration order) at `path` + ".bin". Both are written atomically.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  auto blob_path = path;
  blob_path += ".bin";
  std::string blob;
  nlohmann::ordered_json params = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    const auto& t = ck.params.value(i);
    nlohmann::ordered_json e;
    e["name"] = ck.params.name(i);
    e["shape"] = t.shape().dims();
    e["offset"] = blob.size();
    e["bytes"] = t.size() * 4;
    params.push_back(e);
    for (float v : t.storage()) detail::put_u32(blob, std::bit_cast<std::uint32_t>(v));
  }
  nlohmann::ordered_json m;
  m["format"] = "comem-checkpoint";
  m["version"] = 1;
  m["model"] = to_json(ck.model);
  m["train"] = ck.train_config;
  m["epoch"] = ck.epoch;
  m["history"] = ck.history;
  m["blob"] = blob_path.filename().string();
  m["params"] = params;
  detail::write_file_atomic(blob_path, blob);
  detail::write_file_atomic(path, m.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  nlohmann::ordered_json m;
  try {
    m = nlohmann::ordered_json::parse(detail::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": invalid checkpoint manifest: " + e.what());
  }
  try {
    if (m.at("format") != "comem-checkpoint" || m.at("version") != 1)
      throw FormatError(path.string() + ": not a version-1 checkpoint manifest");
    Checkpoint ck;
    ck.model = model_config_from_json(m.at("model"));
    ck.train_config = m.at("train");
    ck.epoch = m.at("epoch").get<std::size_t>();
    ck.history = m.at("history");
    const std::string blob = detail::read_file(path.parent_path() / m.at("blob").get<std::string>());
    const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
    auto expected = make_parameters<float>(ck.model);
    const auto& entries = m.at("params");
    if (entries.size() != expected.size())
      throw FormatError(path.string() + ": manifest lists " + std::to_string(entries.size()) + " parameters, model needs " +
                        std::to_string(expected.size()));
    std::size_t end = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      const auto name = e.at("name").get<std::string>();
      Shape shape(e.at("shape").get<std::vector<std::size_t>>());
      const auto offset = e.at("offset").get<std::size_t>();
      const auto nbytes = e.at("bytes").get<std::size_t>();
      if (name != expected.name(i) || !(shape == expected.value(i).shape()))
        throw FormatError(path.string() + ": parameter " + std::to_string(i) + " is '" + name + "' " + shape.str() + ", expected '" +
                          expected.name(i) + "' " + expected.value(i).shape().str());
      if (nbytes != shape.numel() * 4 || offset + nbytes > blob.size())
        throw FormatError(path.string() + ": parameter '" + name + "' does not resolve to a blob slice of " +
                          std::to_string(shape.numel() * 4) + " bytes");
      auto& dst = expected.value(i).storage();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = std::bit_cast<float>(detail::get_u32(bytes + offset + 4 * k));
      end = std::max(end, offset + nbytes);
    }
    if (end != blob.size()) throw FormatError(path.string() + ": blob has " + std::to_string(blob.size() - end) + " trailing bytes");
    ck.params = std::move(expected);
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed checkpoint manifest: " + e.what());
  }
}

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochRecord> log;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Per-task training loop: seeded shuffling, fixed-order gradient
/// accumulation over each batch (mean loss), Adam, validation each epoch,
/// keeping the best-validation parameters (earliest epoch on ties).
template <typename T>
TrainResult train(const TrainConfig& tc, const TaskData& data, const EpochCallback& on_epoch = {}) {
  tc.validate();
  if (data.task != tc.task) throw ConfigError("train: dataset task does not match config");
  const auto mc = model_config_for(tc, data);
  CoMemoryModel<T> model(mc);
  auto store = model.make_store(derive_seed(tc.seed, 1));
  Adam<T> adam(store, tc.lr);
  const std::size_t workers = std::max<std::size_t>(1, tc.threads);

  std::vector<Example<T>> train_examples;
  train_examples.reserve(data.train.size());
  for (const auto& item : data.train) {
    const auto& [a, b] = data.videos.at(item.video);
    train_examples.push_back(make_example<T>(a, b, item, mc.length));
  }

  TrainResult result;
  ParameterStore<T> best = store;
  std::size_t best_epoch = 0;
  double best_metric = 0;
  std::vector<std::size_t> order(train_examples.size());
  Gradients<T> batch_grads(store);
  std::vector<Gradients<T>> item_grads(workers, Gradients<T>(store));
  std::vector<double> item_loss(workers);
  std::size_t batch_id = 0;

  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffler(derive_seed(tc.seed, 1000 + epoch));
    shuffler.shuffle(order);
    double loss_sum = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += tc.batch, ++batch_id) {
      const std::size_t bn = std::min(tc.batch, order.size() - b0);
      batch_grads.zero();
      double batch_loss = 0;
      // Items run in waves of `workers`; their gradients are added in item order.
      for (std::size_t w0 = 0; w0 < bn; w0 += workers) {
        const std::size_t wn = std::min(workers, bn - w0);
        parallel_for(wn, workers, [&](std::size_t k) {
          item_grads[k].zero();
          Tape<T> tape;
          auto fwd = model.forward(tape, store, train_examples[order[b0 + w0 + k]]);
          item_loss[k] = double(fwd.loss.item());
          tape.backward(fwd.loss);
          tape.accumulate(item_grads[k]);
        });
        for (std::size_t k = 0; k < wn; ++k) {
          if (!std::isfinite(item_loss[k]))
            throw NumericError("non-finite loss in batch " + std::to_string(batch_id) + " (epoch " + std::to_string(epoch) + ")");
          batch_loss += item_loss[k];
          batch_grads.add(item_grads[k]);
        }
      }
      batch_grads.scale(T(1) / T(bn));
      if (tc.clip_norm > 0) {
        const double norm = batch_grads.norm();
        if (norm > tc.clip_norm) batch_grads.scale(T(tc.clip_norm / norm));
      }
      adam.step(store, batch_grads);
      loss_sum += batch_loss;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / double(order.size());
    rec.val_metric = data.val.empty() ? rec.train_loss : evaluate(model, store, data, data.val, workers).metric;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool better = best_epoch == 0 ||
                        (lower_is_better(tc.task) ? rec.val_metric < best_metric : rec.val_metric > best_metric);
    if (better) {
      best = store;
      best_epoch = epoch;
      best_metric = rec.val_metric;
    }
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }

  result.checkpoint.model = mc;
  result.checkpoint.train_config = to_json(tc);
  result.checkpoint.epoch = best_epoch;
  result.checkpoint.history = history_json(result.log);
  if constexpr (std::is_same_v<T, float>) result.checkpoint.params = std::move(best);
  else result.checkpoint.params = best.template cast<float>();
  return result;
}

inline std::string metric_csv(const std::vector<EpochRecord>& log) {
  std::string out = "epoch,train_loss,val_metric,seconds\n";
  char buf[160];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.3f\n", e.epoch, e.train_loss, e.val_metric, e.seconds);
    out += buf;
  }
  return out;
}

}  // namespace comem
