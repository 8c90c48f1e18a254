// comem: generate synthetic data, train, evaluate, inspect attention and
// gradient-check the co-memory network.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "comem/model_check.hpp"
#include "comem/synthetic.hpp"
#include "comem/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace comem;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct UsageError : Error {
  using Error::Error;
};

fs::path sidecar(const fs::path& path, const std::string& suffix = ".config.json") {
  auto p = path;
  p += suffix;
  return p;
}

void write_echo(const fs::path& path, const json& echo) { detail::write_file_atomic(path, echo.dump(2) + "\n"); }

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// ---- gen -------------------------------------------------------------------

struct GenArgs {
  std::string out;
  std::size_t episodes = 2500;
  bool force = false;
  SyntheticSpec spec;
};

int run_gen(const GenArgs& a) {
  const fs::path dir(a.out);
  if (fs::exists(dir) && !fs::is_directory(dir)) throw FormatError("'" + a.out + "' exists and is not a directory");
  if (fs::is_directory(dir) && !fs::is_empty(dir)) {
    if (!a.force) throw FormatError("output directory '" + a.out + "' is not empty (use --force to overwrite)");
    fs::remove_all(dir);
  }
  json echo;
  echo["command"] = "gen";
  echo["episodes"] = a.episodes;
  echo["spec"] = to_json(a.spec);
  const auto manifest = write_synthetic_dataset(dir, a.spec, a.episodes);
  write_echo(dir / "gen.config.json", echo);
  std::cout << "wrote " << a.episodes << " episodes to " << a.out << "\n";
  for (const auto& [key, n] : manifest["items"].items()) std::cout << "  " << key << ": " << n.get<std::size_t>() << " items\n";
  return kOk;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string task, data, out;
  TrainConfig cfg;
};

int run_train(TrainArgs a) {
  a.cfg.task = parse_task(a.task);
  a.cfg.threads = worker_count();
  a.cfg.validate();
  json echo;
  echo["command"] = "train";
  echo["data"] = a.data;
  echo["out"] = a.out;
  echo["config"] = to_json(a.cfg);
  echo["threads"] = a.cfg.threads;
  write_echo(sidecar(a.out), echo);

  const auto data = load_task_data(a.data, a.cfg.task);
  std::cerr << "train: " << data.train.size() << " items, val " << data.val.size() << ", test " << data.test.size() << "\n";
  auto log_epoch = [&](const EpochRecord& r) {
    std::cerr << "epoch " << r.epoch << " loss " << fmt(r.train_loss) << " val " << fmt(r.val_metric) << " (" << fmt(r.seconds)
              << " s)\n";
  };
  auto result = a.cfg.precision == "double" ? train<double>(a.cfg, data, log_epoch) : train<float>(a.cfg, data, log_epoch);
  save_checkpoint(a.out, result.checkpoint);
  detail::write_file_atomic(sidecar(a.out, ".metrics.csv"), metric_csv(result.log));
  const auto& best = result.log.at(result.checkpoint.epoch - 1);
  std::cout << "best epoch " << best.epoch << " val " << (lower_is_better(a.cfg.task) ? "MSE=" : "ACC=") << fmt(best.val_metric)
            << "\n";
  return kOk;
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, data, dump, split = "test", qa;
};

int run_eval(const EvalArgs& a) {
  auto ck = load_checkpoint(a.ckpt);
  const auto task = ck.model.task;
  TaskData data;
  data.task = task;
  data.vocab_size = vocabulary_size(load_vocabulary(fs::path(a.data) / "vocab.json"));
  const fs::path qa = a.qa.empty() ? qa_path(a.data, task, a.split) : fs::path(a.qa);
  auto items = load_qa_file(qa);
  for (const auto& item : items)
    if (item.task != task)
      throw ConfigError(std::string("checkpoint was trained for '") + task_tag(task) + "' but '" + item.id + "' is a '" +
                        task_tag(item.task) + "' item");
  load_videos(a.data, items, data);

  json echo;
  echo["command"] = "eval";
  echo["ckpt"] = a.ckpt;
  echo["data"] = a.data;
  echo["qa"] = qa.string();
  echo["dump"] = a.dump;
  echo["task"] = task_tag(task);
  echo["threads"] = worker_count();
  write_echo(sidecar(a.dump.empty() ? a.ckpt + ".eval" : a.dump), echo);

  CoMemoryModel<float> model(ck.model);
  const auto r = evaluate(model, ck.params, data, items, worker_count());
  if (!a.dump.empty()) {
    std::string lines;
    for (const auto& p : r.predictions) lines += json{{"id", p.id}, {"pred", p.pred}, {"gold", p.gold}}.dump() + "\n";
    detail::write_file_atomic(a.dump, lines);
  }
  std::cout << r.metric_name << "=" << fmt(r.metric) << "\n";
  return kOk;
}

// ---- inspect ---------------------------------------------------------------

struct InspectArgs {
  std::string ckpt, data, id, out;
};

template <typename T>
json rows_json(const Var<T>& v) {
  const auto& s = v.shape();
  json out = json::array();
  if (s.rank() == 1) {
    for (auto x : v.value()) out.push_back(double(x));
    return out;
  }
  for (std::size_t r = 0; r < s.rows(); ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < s.cols(); ++c) row.push_back(double(v.value()[r * s.cols() + c]));
    out.push_back(row);
  }
  return out;
}

int run_inspect(const InspectArgs& a) {
  auto ck = load_checkpoint(a.ckpt);
  const auto task = ck.model.task;
  std::optional<QAItem> found;
  for (const char* split : {"train", "val", "test"}) {
    const auto path = qa_path(a.data, task, split);
    if (!fs::exists(path)) continue;
    for (const auto& item : load_qa_file(path))
      if (item.id == a.id) found = item;
  }
  if (!found) throw FormatError("no " + std::string(task_tag(task)) + " item with id '" + a.id + "' in " + a.data);
  TaskData data;
  data.task = task;
  data.vocab_size = vocabulary_size(load_vocabulary(fs::path(a.data) / "vocab.json"));
  load_videos(a.data, {*found}, data);

  json echo;
  echo["command"] = "inspect";
  echo["ckpt"] = a.ckpt;
  echo["data"] = a.data;
  echo["id"] = a.id;
  echo["out"] = a.out;
  write_echo(sidecar(a.out), echo);

  CoMemoryModel<float> model(ck.model);
  const auto& [fa, fb] = data.videos.at(found->video);
  Tape<float> tape(false);
  const auto fwd = model.forward(tape, ck.params, make_example<float>(fa, fb, *found, ck.model.length));
  // Multiple choice runs one episode per candidate; report the chosen one.
  const std::size_t shown = is_multiple_choice(task) ? std::size_t(fwd.prediction) : 0;
  json cycles = json::array();
  for (const auto& m : fwd.episodes.at(shown).maps) {
    json c;
    c["cycle"] = m.cycle;
    c["appearance"] = {{"level_weights", rows_json(m.level_weights_a)}, {"step_gates", rows_json(m.step_gates_a)}};
    c["motion"] = {{"level_weights", rows_json(m.level_weights_b)}, {"step_gates", rows_json(m.step_gates_b)}};
    cycles.push_back(c);
  }
  json out;
  out["id"] = a.id;
  out["task"] = task_tag(task);
  out["levels"] = ck.model.levels;
  out["length"] = ck.model.length;
  if (is_multiple_choice(task)) out["candidate"] = shown;
  out["prediction"] = fwd.prediction;
  out["gold"] = found->answer;
  out["scores"] = fwd.scores;
  out["cycles"] = cycles;
  detail::write_file_atomic(a.out, out.dump(2) + "\n");
  std::cout << "prediction " << fwd.prediction << " (gold " << found->answer << "), wrote " << a.out << "\n";
  return kOk;
}

// ---- gradcheck -------------------------------------------------------------

struct GradCheckArgs {
  std::string config = "tiny";
  std::uint64_t seed = 1;
  bool corrupt = false;
  std::string echo = "gradcheck.config.json";
};

constexpr double kGradTolerance = 1e-4;

int run_gradcheck(const GradCheckArgs& a) {
  json echo;
  echo["command"] = "gradcheck";
  echo["config"] = a.config;
  echo["seed"] = a.seed;
  echo["tolerance"] = kGradTolerance;
  echo["precision"] = "long double";
  GradCheckOptions opt;
  opt.seed = a.seed;
  opt.corrupt_analytic = a.corrupt;
  if (a.config == "default") opt.samples_per_param = 4;
  echo["samples_per_param"] = opt.samples_per_param;
  write_echo(a.echo, echo);

  double worst = 0;
  for (auto task : {TaskKind::RepeatingAction, TaskKind::StateTransition, TaskKind::RepetitionCount, TaskKind::FrameQA}) {
    ModelConfig cfg = ModelConfig::tiny(task);
    if (a.config == "default") {
      const SyntheticSpec spec;
      cfg = ModelConfig::desk(task, SyntheticVocabulary(spec).size(), spec.dim_a, spec.dim_b);
      if (task == TaskKind::FrameQA)
        for (int o = 0; o < int(spec.objects); ++o) cfg.answer_values.push_back(o);
    }
    const auto r = model_gradient_check(cfg, derive_seed(a.seed, std::uint64_t(task)), opt);
    std::cout << task_tag(task) << " max_rel_error=" << r.max_rel_error << " checked=" << r.checked << " worst=" << r.worst_param << "["
              << r.worst_index << "]\n";
    worst = std::max(worst, r.max_rel_error);
  }
  std::cout << "max_rel_error=" << worst << "\n";
  if (!(worst <= kGradTolerance)) {
    std::cerr << "gradient check failed: " << worst << " > " << kGradTolerance << "\n";
    return kNumeric;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Co-memory network for video question answering"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "comem 1.0");

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic video QA dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--episodes", gen.episodes, "Number of episodes (split 80/10/10)")->capture_default_str()->check(CLI::PositiveNumber);
  g->add_option("--seed", gen.spec.seed, "Dataset seed")->capture_default_str();
  g->add_option("--length", gen.spec.length, "Units per video")->capture_default_str();
  g->add_option("--actions", gen.spec.actions, "Number of actions")->capture_default_str();
  g->add_option("--objects", gen.spec.objects, "Number of objects")->capture_default_str();
  g->add_option("--dim-a", gen.spec.dim_a, "Appearance feature width")->capture_default_str();
  g->add_option("--dim-b", gen.spec.dim_b, "Motion feature width")->capture_default_str();
  g->add_option("--noise", gen.spec.noise, "Feature noise scale")->capture_default_str();
  g->add_option("--min-run", gen.spec.min_run, "Shortest run, in units")->capture_default_str();
  g->add_option("--max-run", gen.spec.max_run, "Longest run, in units")->capture_default_str();
  g->add_option("--cast", gen.spec.cast, "Distinct objects per video")->capture_default_str();
  g->add_option("--max-count", gen.spec.max_count, "Largest drawn count target")->capture_default_str();
  g->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train one task model");
  t->add_option("--task", tr.task, "action, trans, count or frame")->required()->check(CLI::IsMember({"action", "trans", "count", "frame"}));
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--out", tr.out, "Checkpoint path")->required();
  t->add_option("--epochs", tr.cfg.epochs)->capture_default_str();
  t->add_option("--lr", tr.cfg.lr)->capture_default_str();
  t->add_option("--batch", tr.cfg.batch)->capture_default_str();
  t->add_option("--cycles", tr.cfg.cycles, "Memory cycles T")->capture_default_str();
  t->add_option("--levels", tr.cfg.levels, "Contextual fact levels N")->capture_default_str();
  t->add_option("--length", tr.cfg.length, "Units per video")->capture_default_str();
  t->add_option("--seed", tr.cfg.seed)->capture_default_str();
  t->add_option("--precision", tr.cfg.precision, "single or double")->capture_default_str()->check(CLI::IsMember({"single", "double"}));
  t->add_option("--dims", tr.cfg.dims, "Layer widths: desk or full")->capture_default_str()->check(CLI::IsMember({"desk", "full"}));
  t->add_option("--clip", tr.cfg.clip_norm, "Gradient-norm clip (0 = off)")->capture_default_str();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--ckpt", ev.ckpt)->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--dump", ev.dump, "Write per-item predictions as JSON lines");
  e->add_option("--split", ev.split)->capture_default_str()->check(CLI::IsMember({"train", "val", "test"}));
  e->add_option("--qa", ev.qa, "Evaluate this QA file instead of the split");

  InspectArgs in;
  auto* i = app.add_subcommand("inspect", "Export attention maps of one item");
  i->add_option("--ckpt", in.ckpt)->required();
  i->add_option("--data", in.data)->required();
  i->add_option("--id", in.id)->required();
  i->add_option("--out", in.out)->required();

  GradCheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference check of all four task losses");
  c->add_option("--config", gc.config)->capture_default_str()->check(CLI::IsMember({"tiny", "default"}));
  c->add_option("--seed", gc.seed)->capture_default_str();
  c->add_option("--echo", gc.echo, "Config echo path")->capture_default_str();
  c->add_flag("--corrupt-gradient", gc.corrupt)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return run_gen(gen);
    if (*t) return run_train(tr);
    if (*e) return run_eval(ev);
    if (*i) return run_inspect(in);
    if (*c) return run_gradcheck(gc);
  } catch (const NumericError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kNumeric;
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const GeometryError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kData;
  }
  return kUsage;
}
