#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "comem/data.hpp"
#include "comem/error.hpp"
#include "comem/rng.hpp"

// Desk-scale surrogate for a video QA corpus. A video is a sequence of runs;
// each run is one action performed by one object for a few units. Motion
// features encode the action, appearance features the object.

namespace comem {

struct SyntheticSpec {
  std::size_t length = 34;   // units per video
  std::size_t actions = 8;
  std::size_t objects = 8;
  int min_run = 4;           // run duration range, in units
  int max_run = 4;
  std::size_t dim_a = 16;    // appearance feature width
  std::size_t dim_b = 16;    // motion feature width
  double noise = 0.1;        // per-element noise scale
  std::size_t cast = 1;      // distinct objects acting in one video
  int max_count = 6;         // count questions draw their target from 0..max_count
  std::uint64_t seed = 1;

  void validate() const {
    if (length < 1) throw DomainError("synthetic: length must be >= 1");
    if (actions < 1 || objects < 1) throw DomainError("synthetic: need at least one action and one object");
    if (min_run < 1 || max_run < min_run) throw DomainError("synthetic: run lengths must satisfy 1 <= min_run <= max_run");
    if (dim_a < 1 || dim_b < 1) throw DomainError("synthetic: feature widths must be >= 1");
    if (cast < 1 || cast > objects) throw DomainError("synthetic: cast must lie in 1..objects");
    if (noise < 0) throw DomainError("synthetic: noise must be >= 0");
    if (max_count < 0 || max_count > kMaxCount) throw DomainError("synthetic: max_count must lie in 0..10");
  }
};

struct Run {
  std::size_t action = 0;
  std::size_t object = 0;
  std::size_t start = 0;
  std::size_t duration = 0;
  bool operator==(const Run&) const = default;
};

/// Ground truth behind an episode, kept for answer replay.
struct LatentTrace {
  std::vector<Run> runs;
  std::size_t focus = 0;  // action whose run count was drawn as the count target
  std::size_t attempts = 1;
};

struct Episode {
  std::string video;
  FeatureSequence appearance;
  FeatureSequence motion;
  std::vector<QAItem> items;
  LatentTrace trace;
};

/// Fixed question grammar. Token ids are assigned in this order.
class SyntheticVocabulary {
 public:
  explicit SyntheticVocabulary(const SyntheticSpec& spec) {
    for (const char* w : {"how", "many", "times", "does", "the", "actor", "what", "do", "after", "which", "object", "?"})
      add(w);
    for (std::size_t a = 0; a < spec.actions; ++a) add("act_" + std::to_string(a));
    for (int k = 0; k <= kMaxCount; ++k) add("num_" + std::to_string(k));
    for (std::size_t o = 0; o < spec.objects; ++o) add("obj_" + std::to_string(o));
  }

  std::size_t id(const std::string& token) const {
    auto it = map_.find(token);
    if (it == map_.end()) throw VocabularyError("unknown token '" + token + "'");
    return it->second;
  }
  std::size_t action(std::size_t a) const { return id("act_" + std::to_string(a)); }
  std::size_t number(int k) const { return id("num_" + std::to_string(k)); }
  std::size_t size() const { return map_.size(); }
  const Vocabulary& map() const { return map_; }

  std::vector<std::size_t> sentence(std::initializer_list<std::string> words) const {
    std::vector<std::size_t> ids;
    for (const auto& w : words) ids.push_back(id(w));
    return ids;
  }

 private:
  void add(const std::string& w) { map_.emplace(w, map_.size()); }
  Vocabulary map_;
};

inline std::vector<std::size_t> run_counts(const LatentTrace& trace, std::size_t actions) {
  std::vector<std::size_t> counts(actions, 0);
  for (const auto& r : trace.runs) ++counts[r.action];
  return counts;
}

/// Fixed per-dataset projection of one-hot codes to feature rows.
inline std::vector<double> synthetic_projection(const SyntheticSpec& spec, std::size_t codes, std::size_t width, std::uint64_t stream) {
  Rng rng(derive_seed(spec.seed, stream));
  std::vector<double> proj(codes * width);
  for (auto& v : proj) v = rng.normal();
  return proj;
}

inline std::string video_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "v%05zu", index);
  return buf;
}

namespace detail {

// Draw a run list covering spec.length units. Returns false when this draw
// cannot satisfy the constraints (caller retries with a new sub-seed).
inline bool draw_runs(const SyntheticSpec& spec, Rng& rng, LatentTrace& trace) {
  auto& runs = trace.runs;
  runs.clear();
  trace.focus = 0;
  std::vector<std::size_t> durations;
  for (std::size_t covered = 0; covered < spec.length;) {
    std::size_t d = std::size_t(rng.range(spec.min_run, spec.max_run));
    d = std::min(d, spec.length - covered);
    durations.push_back(d);
    covered += d;
  }
  const std::size_t n = durations.size();
  std::vector<std::size_t> action(n, 0);
  if (spec.actions > 1) {
    // Count target: exactly k non-adjacent runs of a focus action.
    const std::size_t focus = std::size_t(rng.below(spec.actions));
    trace.focus = focus;
    const std::size_t max_k = std::min<std::size_t>(std::size_t(spec.max_count), (n + 1) / 2);
    const std::size_t k = std::size_t(rng.below(max_k + 1));
    // Uniform over non-adjacent k-subsets: pick k of n-k+1 slots, shift the
    // i-th smallest by i.
    std::vector<std::size_t> slots(n - k + 1);
    for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
    rng.shuffle(slots);
    slots.resize(k);
    std::sort(slots.begin(), slots.end());
    std::vector<bool> is_focus(n, false);
    for (std::size_t i = 0; i < k; ++i) is_focus[slots[i] + i] = true;
    for (std::size_t i = 0; i < n; ++i) {
      if (is_focus[i]) {
        action[i] = focus;
        continue;
      }
      std::vector<std::size_t> allowed;
      for (std::size_t a = 0; a < spec.actions; ++a) {
        if (a == focus) continue;
        if (i > 0 && action[i - 1] == a) continue;
        allowed.push_back(a);
      }
      if (allowed.empty()) return false;
      action[i] = allowed[rng.below(allowed.size())];
    }
  }
  // Objects: a cast of distinct objects; each action is bound to one member.
  std::vector<std::size_t> pool(spec.objects);
  for (std::size_t o = 0; o < spec.objects; ++o) pool[o] = o;
  rng.shuffle(pool);
  std::vector<std::size_t> actor_of(spec.actions);
  for (auto& o : actor_of) o = pool[rng.below(spec.cast)];
  std::size_t start = 0;
  for (std::size_t i = 0; i < n; ++i) {
    runs.push_back({action[i], actor_of[action[i]], start, durations[i]});
    start += durations[i];
  }
  return true;
}

}  // namespace detail

/// Generate one episode deterministically from (spec, seed): features,
/// one QA item per answerable task, and the latent run trace.
inline Episode generate_episode(const SyntheticSpec& spec, std::uint64_t seed, const std::string& video = "v00000") {
  spec.validate();
  const SyntheticVocabulary vocab(spec);
  Episode ep;
  ep.video = video;

  bool ok = false;
  Rng rng(0);
  for (std::size_t attempt = 0; attempt < 100 && !ok; ++attempt) {
    rng = Rng(derive_seed(seed, attempt));
    ok = detail::draw_runs(spec, rng, ep.trace);
    ep.trace.attempts = attempt + 1;
  }
  if (!ok) throw DomainError("synthetic: could not satisfy the run constraints in 100 attempts");

  // Features.
  const auto proj_b = synthetic_projection(spec, spec.actions, spec.dim_b, 0xB0B0);
  const auto proj_a = synthetic_projection(spec, spec.objects, spec.dim_a, 0xA0A0);
  ep.motion = FeatureSequence(Shape{spec.length, spec.dim_b});
  ep.appearance = FeatureSequence(Shape{spec.length, spec.dim_a});
  Rng noise(derive_seed(seed, 0x5EED));
  for (const auto& r : ep.trace.runs) {
    for (std::size_t t = r.start; t < r.start + r.duration; ++t) {
      for (std::size_t c = 0; c < spec.dim_b; ++c)
        ep.motion.at(t, c) = float(proj_b[r.action * spec.dim_b + c] + spec.noise * noise.normal());
      for (std::size_t c = 0; c < spec.dim_a; ++c)
        ep.appearance.at(t, c) = float(proj_a[r.object * spec.dim_a + c] + spec.noise * noise.normal());
    }
  }

  const auto counts = run_counts(ep.trace, spec.actions);
  auto pick_candidates = [&](std::size_t truth, std::vector<std::size_t> distractor_pool, QAItem& item) {
    rng.shuffle(distractor_pool);
    distractor_pool.resize(kNumCandidates - 1);
    const std::size_t pos = std::size_t(rng.below(kNumCandidates));
    std::vector<std::size_t> options = distractor_pool;
    options.insert(options.begin() + long(pos), truth);
    for (auto a : options) item.candidates.push_back({vocab.action(a)});
    item.answer = int(pos);
  };

  // Count: asks about the focus action, whose run count was drawn uniformly.
  {
    const std::size_t subject = ep.trace.focus;
    QAItem item;
    item.id = video + "_count";
    item.task = TaskKind::RepetitionCount;
    item.video = video;
    item.question = vocab.sentence({"how", "many", "times", "does", "the", "actor", "act_" + std::to_string(subject), "?"});
    item.answer = int(std::min<std::size_t>(counts[subject], kMaxCount));
    ep.items.push_back(item);
  }
  // Repeating action: which action occurs exactly k times.
  if (spec.actions >= kNumCandidates) {
    std::vector<std::size_t> eligible;
    for (std::size_t a = 0; a < spec.actions; ++a) {
      if (counts[a] < 1 || counts[a] > std::size_t(kMaxCount)) continue;
      std::size_t others = 0;
      for (std::size_t b = 0; b < spec.actions; ++b) others += counts[b] != counts[a];
      if (others >= kNumCandidates - 1) eligible.push_back(a);
    }
    if (!eligible.empty()) {
      const std::size_t y = eligible[rng.below(eligible.size())];
      const int k = int(counts[y]);
      std::vector<std::size_t> pool;
      for (std::size_t b = 0; b < spec.actions; ++b)
        if (counts[b] != counts[y]) pool.push_back(b);
      QAItem item;
      item.id = video + "_action";
      item.task = TaskKind::RepeatingAction;
      item.video = video;
      item.question = vocab.sentence({"what", "does", "the", "actor", "do", "num_" + std::to_string(k), "times", "?"});
      pick_candidates(y, pool, item);
      ep.items.push_back(item);
    }
  }
  // State transition: which action follows the first run of action x.
  if (spec.actions >= kNumCandidates) {
    std::vector<std::size_t> first(spec.actions, ep.trace.runs.size());
    for (std::size_t i = 0; i < ep.trace.runs.size(); ++i)
      if (first[ep.trace.runs[i].action] == ep.trace.runs.size()) first[ep.trace.runs[i].action] = i;
    std::vector<std::size_t> eligible;
    for (std::size_t a = 0; a < spec.actions; ++a)
      if (first[a] + 1 < ep.trace.runs.size() && ep.trace.runs[first[a] + 1].action != a) eligible.push_back(a);
    if (!eligible.empty()) {
      const std::size_t x = eligible[rng.below(eligible.size())];
      const std::size_t y = ep.trace.runs[first[x] + 1].action;
      std::vector<std::size_t> pool;
      for (std::size_t b = 0; b < spec.actions; ++b)
        if (b != y) pool.push_back(b);
      QAItem item;
      item.id = video + "_trans";
      item.task = TaskKind::StateTransition;
      item.video = video;
      item.question = vocab.sentence({"what", "does", "the", "actor", "do", "after", "act_" + std::to_string(x), "?"});
      pick_candidates(y, pool, item);
      ep.items.push_back(item);
    }
  }
  // Frame QA: which object performs action x.
  {
    std::vector<std::size_t> present;
    for (std::size_t a = 0; a < spec.actions; ++a)
      if (counts[a] > 0) present.push_back(a);
    const std::size_t x = present[rng.below(present.size())];
    std::size_t object = 0;
    for (const auto& r : ep.trace.runs)
      if (r.action == x) {
        object = r.object;
        break;
      }
    QAItem item;
    item.id = video + "_frame";
    item.task = TaskKind::FrameQA;
    item.video = video;
    item.question = vocab.sentence({"which", "object", "does", "act_" + std::to_string(x), "?"});
    item.answer = int(object);
    ep.items.push_back(item);
  }
  return ep;
}

/// Episode counts of the train/val/test split (80/10/10 by episode index).
struct SplitSizes {
  std::size_t train = 0, val = 0, test = 0;
};

inline SplitSizes split_sizes(std::size_t episodes) {
  SplitSizes s;
  s.train = episodes * 8 / 10;
  s.val = episodes / 10;
  s.test = episodes - s.train - s.val;
  return s;
}

inline const char* split_of(std::size_t index, const SplitSizes& s) {
  if (index < s.train) return "train";
  if (index < s.train + s.val) return "val";
  return "test";
}

/// Write a complete dataset: features/<video>.{appearance,motion}.cmf,
/// <task>_<split>.jsonl, vocab.json and manifest.json. Episode i uses
/// derive_seed(spec.seed, i).
inline nlohmann::ordered_json write_synthetic_dataset(const std::filesystem::path& dir, const SyntheticSpec& spec, std::size_t episodes) {
  spec.validate();
  if (episodes < 1) throw DomainError("synthetic: need at least one episode");
  const SyntheticVocabulary vocab(spec);
  const auto sizes = split_sizes(episodes);
  std::filesystem::create_directories(dir / "features");
  std::map<std::string, std::string> qa;  // "<task>_<split>" -> lines
  for (auto task : {TaskKind::RepeatingAction, TaskKind::StateTransition, TaskKind::RepetitionCount, TaskKind::FrameQA})
    for (const char* split : {"train", "val", "test"}) qa[std::string(task_tag(task)) + "_" + split];
  std::map<std::string, std::size_t> item_counts;
  for (std::size_t i = 0; i < episodes; ++i) {
    const auto ep = generate_episode(spec, derive_seed(spec.seed, i), video_name(i));
    write_feature_file(dir / "features" / (ep.video + ".appearance.cmf"), ep.appearance);
    write_feature_file(dir / "features" / (ep.video + ".motion.cmf"), ep.motion);
    for (const auto& item : ep.items) {
      const auto key = std::string(task_tag(item.task)) + "_" + split_of(i, sizes);
      qa[key] += qa_to_json(item).dump() + "\n";
      ++item_counts[key];
    }
  }
  for (const auto& [key, lines] : qa) detail::write_file_atomic(dir / (key + ".jsonl"), lines);
  detail::write_file_atomic(dir / "vocab.json", nlohmann::ordered_json(vocab.map()).dump(2) + "\n");

  nlohmann::ordered_json m;
  m["episodes"] = episodes;
  m["splits"] = {{"train", sizes.train}, {"val", sizes.val}, {"test", sizes.test}};
  nlohmann::ordered_json items;
  for (const auto& [key, lines] : qa) items[key] = item_counts[key];
  m["items"] = items;
  m["vocab_size"] = vocab.size();
  m["length"] = spec.length;
  m["feature_dim_a"] = spec.dim_a;
  m["feature_dim_b"] = spec.dim_b;
  detail::write_file_atomic(dir / "manifest.json", m.dump(2) + "\n");
  return m;
}

inline nlohmann::ordered_json to_json(const SyntheticSpec& s) {
  nlohmann::ordered_json j;
  j["length"] = s.length;
  j["actions"] = s.actions;
  j["objects"] = s.objects;
  j["min_run"] = s.min_run;
  j["max_run"] = s.max_run;
  j["dim_a"] = s.dim_a;
  j["dim_b"] = s.dim_b;
  j["noise"] = s.noise;
  j["cast"] = s.cast;
  j["max_count"] = s.max_count;
  j["seed"] = s.seed;
  return j;
}

}  // namespace comem
