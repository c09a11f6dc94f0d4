// patchscope: command-line front end for the patch-based deepfake detector
// engine. One binary, one subcommand per workflow:
//   synth | manifest | train | distill | score | heatmap | eval |
//   jpeg-sweep | ensemble | bench
//
// Every run resolves its settings from (defaults < config file < flags),
// rejects unknown keys, and writes the fully resolved key=value config
// beside its outputs so the run can be replayed from that artifact alone.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "patchscope/distiller.hpp"
#include "patchscope/evaluator.hpp"

namespace fs = std::filesystem;
using namespace patchscope;

namespace {

// ------------------------------------------------------------- settings

const std::set<std::string>& key_registry() {
  static const std::set<std::string> keys = {
      "run.seed", "run.threads", "run.precision",
      "path.data", "path.out", "path.model", "path.teacher", "path.image",
      "path.a", "path.b", "path.val_a", "path.val_b", "path.from_set",
      "path.materialize", "path.dir",
      "model.kind", "model.preset", "model.q", "model.pooling",
      "model.stem_width", "model.channels", "model.mids", "model.blocks",
      "model.strides",
      "pre.resize_to", "pre.crop", "pre.representation",
      "train.lr", "train.beta1", "train.beta2", "train.adam_eps",
      "train.batch_size", "train.micro_batch", "train.max_epochs",
      "train.patience", "train.plateau_threshold", "train.lr_drop_factor",
      "distill.mode", "distill.batch_size",
      "synth.train", "synth.val", "synth.test", "synth.size", "synth.mode",
      "synth.confound_quality", "synth.sigma",
      "eval.split", "eval.sets",
      "sweep.qualities",
      "ensemble.alpha", "ensemble.grid",
      "bench.input", "bench.repeats",
      "manifest.split", "manifest.fractions",
      "heatmap.top_k",
  };
  return keys;
}

struct RunSettings {
  std::map<std::string, std::string> kv;

  void set(const std::string& key, const std::string& value) {
    if (!key_registry().count(key)) {
      throw ConfigError("unknown config key: " + key);
    }
    kv[key] = value;
  }

  void set_default(const std::string& key, const std::string& value) {
    if (!kv.count(key)) set(key, value);
  }

  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("config line " + std::to_string(lineno) +
                          " is not key=value: " + line);
      }
      set(line.substr(0, eq), line.substr(eq + 1));
    }
  }

  bool has(const std::string& key) const { return kv.count(key) > 0; }

  std::string get(const std::string& key) const {
    auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError("missing config key: " + key);
    return it->second;
  }

  std::int64_t get_i(const std::string& key) const {
    try {
      return std::stoll(get(key));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + " is not an integer: " +
                        get(key));
    }
  }

  double get_f(const std::string& key) const {
    try {
      return std::stod(get(key));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + " is not a number: " + get(key));
    }
  }

  std::string resolved_text() const {
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
  }
};

std::vector<int> parse_int_list(const std::string& s, const std::string& what) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("bad integer list for " + what + ": " + s);
    }
  }
  if (out.empty()) throw ConfigError("empty list for " + what);
  return out;
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

// ------------------------------------------------------------- shared glue

void apply_threads(const RunSettings& s) {
  if (s.has("run.threads")) {
    set_thread_count(static_cast<std::size_t>(s.get_i("run.threads")));
  }
}

void fill_run_defaults(RunSettings& s) {
  s.set_default("run.seed", "1");
  s.set_default("run.precision", "f32");
}

void fill_model_defaults(RunSettings& s) {
  s.set_default("model.kind", "ladeda");
  s.set_default("model.preset", "full");
  s.set_default("model.q", "9");
  s.set_default("model.pooling", "average");
}

void fill_pre_defaults(RunSettings& s) {
  s.set_default("pre.resize_to", "256");
  s.set_default("pre.crop", "224");
  s.set_default("pre.representation", "raw");
}

void fill_train_defaults(RunSettings& s) {
  s.set_default("train.lr", "0.0002");
  s.set_default("train.beta1", "0.9");
  s.set_default("train.beta2", "0.999");
  s.set_default("train.adam_eps", "1e-8");
  s.set_default("train.batch_size", "32");
  s.set_default("train.micro_batch", "8");
  s.set_default("train.max_epochs", "30");
  s.set_default("train.patience", "5");
  s.set_default("train.plateau_threshold", "0.001");
  s.set_default("train.lr_drop_factor", "10");
}

ModelConfig model_from_settings(const RunSettings& s) {
  const std::string kind = s.get("model.kind");
  if (kind == "tiny") return tiny_config();
  ModelConfig cfg = s.get("model.preset") == "reduced"
                        ? reduced_ladeda_config(static_cast<int>(s.get_i("model.q")))
                        : ModelConfig{};
  cfg.patch_size = static_cast<int>(s.get_i("model.q"));
  cfg.pooling = pooling_from_string(s.get("model.pooling"));
  if (s.has("model.stem_width")) {
    cfg.stem_width = static_cast<int>(s.get_i("model.stem_width"));
  }
  if (s.has("model.channels")) {
    cfg.channels = parse_int_list(s.get("model.channels"), "model.channels");
  }
  if (s.has("model.mids")) {
    cfg.mid_channels = parse_int_list(s.get("model.mids"), "model.mids");
  }
  if (s.has("model.blocks")) {
    cfg.blocks = parse_int_list(s.get("model.blocks"), "model.blocks");
  }
  if (s.has("model.strides")) {
    cfg.strides = parse_int_list(s.get("model.strides"), "model.strides");
  }
  cfg.validate();
  return cfg;
}

PreprocessConfig pre_from_settings(const RunSettings& s) {
  PreprocessConfig pre;
  pre.resize_to = static_cast<int>(s.get_i("pre.resize_to"));
  pre.crop = static_cast<int>(s.get_i("pre.crop"));
  pre.representation = representation_from_string(s.get("pre.representation"));
  pre.seed = static_cast<std::uint64_t>(s.get_i("run.seed"));
  pre.validate();
  return pre;
}

TrainConfig train_from_settings(const RunSettings& s) {
  TrainConfig cfg;
  cfg.lr = s.get_f("train.lr");
  cfg.beta1 = s.get_f("train.beta1");
  cfg.beta2 = s.get_f("train.beta2");
  cfg.adam_eps = s.get_f("train.adam_eps");
  cfg.batch_size = static_cast<int>(s.get_i("train.batch_size"));
  cfg.micro_batch = static_cast<int>(s.get_i("train.micro_batch"));
  cfg.max_epochs = static_cast<int>(s.get_i("train.max_epochs"));
  cfg.plateau_patience = static_cast<int>(s.get_i("train.patience"));
  cfg.plateau_threshold = s.get_f("train.plateau_threshold");
  cfg.lr_drop_factor = s.get_f("train.lr_drop_factor");
  cfg.seed = static_cast<std::uint64_t>(s.get_i("run.seed"));
  cfg.validate();
  return cfg;
}

void write_resolved(const RunSettings& s, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  write_text_file((out_dir / "resolved.cfg").string(), s.resolved_text());
}

bool f64_run(const RunSettings& s) {
  const std::string p = s.get("run.precision");
  if (p == "f64") return true;
  if (p == "f32") return false;
  throw ConfigError("run.precision must be f32 or f64, got " + p);
}

template <typename T>
Image crop_to_image(const Tensor<T>& chw) {
  const std::int64_t H = chw.dim(1), W = chw.dim(2);
  Image img = make_image(static_cast<int>(W), static_cast<int>(H));
  for (std::int64_t y = 0; y < H; ++y) {
    for (std::int64_t x = 0; x < W; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = static_cast<double>(chw.data()[(c * H + y) * W + x]);
        img.samples[img.index(static_cast<int>(y), static_cast<int>(x), c)] =
            static_cast<std::uint8_t>(
                std::clamp<long>(std::lround(v * 255.0), 0, 255));
      }
    }
  }
  return img;
}

// ------------------------------------------------------------- commands

int run_synth(RunSettings& s) {
  fill_run_defaults(s);
  s.set_default("synth.val", "0");
  s.set_default("synth.test", "0");
  s.set_default("synth.size", "224");
  s.set_default("synth.mode", "standard");
  s.set_default("synth.confound_quality", "75");
  s.set_default("synth.sigma", "2");
  apply_threads(s);
  SynthConfig cfg;
  cfg.train_per_class = static_cast<int>(s.get_i("synth.train"));
  cfg.val_per_class = static_cast<int>(s.get_i("synth.val"));
  cfg.test_per_class = static_cast<int>(s.get_i("synth.test"));
  cfg.image_size = static_cast<int>(s.get_i("synth.size"));
  cfg.seed = static_cast<std::uint64_t>(s.get_i("run.seed"));
  const std::string mode = s.get("synth.mode");
  if (mode == "standard") {
    cfg.mode = SynthMode::standard;
  } else if (mode == "jpeg_confound") {
    cfg.mode = SynthMode::jpeg_confound;
  } else {
    throw ConfigError("synth.mode must be standard or jpeg_confound");
  }
  cfg.confound_quality = static_cast<int>(s.get_i("synth.confound_quality"));
  cfg.sensor_sigma = s.get_f("synth.sigma");
  const fs::path out = s.get("path.out");
  std::string warning;
  const DatasetManifest m = synth_generate(cfg, out.string(), &warning);
  if (!warning.empty()) std::cerr << warning;
  write_resolved(s, out);
  std::cout << "wrote " << m.records.size() << " images and "
            << (out / "manifest.tsv").string() << '\n';
  return 0;
}

int run_manifest(RunSettings& s) {
  fill_run_defaults(s);
  std::optional<Split> single;
  if (s.has("manifest.split")) {
    single = split_from_string(s.get("manifest.split"));
  }
  double train_frac = 0.0, val_frac = 0.0;
  if (s.has("manifest.fractions")) {
    std::stringstream ss(s.get("manifest.fractions"));
    std::string a, b;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',')) {
      throw ConfigError("manifest.fractions must be train,val");
    }
    train_frac = std::stod(a);
    val_frac = std::stod(b);
  } else if (!single) {
    single = Split::test;
  }
  const DatasetManifest m = manifest_from_tree(
      s.get("path.dir"), single, train_frac, val_frac,
      static_cast<std::uint64_t>(s.get_i("run.seed")));
  const fs::path out = s.get("path.out");
  save_manifest(out.string(), m);
  write_text_file(out.string() + ".resolved.cfg", s.resolved_text());
  std::cout << "wrote " << m.records.size() << " records to " << out.string()
            << '\n';
  return 0;
}

template <typename T>
int run_train_t(RunSettings& s) {
  const DatasetManifest manifest = load_manifest(s.get("path.data"));
  const ModelConfig mcfg = model_from_settings(s);
  const PreprocessConfig pre = pre_from_settings(s);
  const TrainConfig tcfg = train_from_settings(s);
  auto weights =
      init_weights<T>(mcfg, static_cast<std::uint64_t>(s.get_i("run.seed")));
  const fs::path out = s.get("path.out");
  fs::create_directories(out);
  auto result = fit(mcfg, std::move(weights), manifest, pre, tcfg, &std::cerr);
  save_model((out / "model.pscp").string(), mcfg, result.best_weights);
  write_text_file((out / "train_log.txt").string(), result.log.to_text());
  write_resolved(s, out);
  std::cout << "best val_acc " << result.best_val_acc << " at epoch "
            << result.best_epoch << "; model at "
            << (out / "model.pscp").string() << '\n';
  return 0;
}

int run_train(RunSettings& s) {
  fill_run_defaults(s);
  fill_model_defaults(s);
  fill_pre_defaults(s);
  fill_train_defaults(s);
  apply_threads(s);
  return f64_run(s) ? run_train_t<double>(s) : run_train_t<float>(s);
}

template <typename T>
int run_distill_t(RunSettings& s) {
  const fs::path out = s.get("path.out");
  fs::create_directories(out);
  const DistillMode mode = distill_mode_from_string(s.get("distill.mode"));
  TrainConfig tcfg = train_from_settings(s);
  tcfg.batch_size = static_cast<int>(s.get_i("distill.batch_size"));
  DistillResult<T> result;
  if (s.has("path.from_set")) {
    const auto samples = load_distill_set<T>(s.get("path.from_set"));
    result = train_student_from_set(samples, mode, tcfg, &std::cerr);
  } else {
    auto [tcfg_model, teacher] = load_model<T>(s.get("path.teacher"));
    const DatasetManifest manifest = load_manifest(s.get("path.data"));
    const PreprocessConfig pre = pre_from_settings(s);
    if (s.has("path.materialize")) {
      const auto samples = build_distill_set(tcfg_model, teacher, manifest, pre);
      save_distill_set(s.get("path.materialize"), samples);
      std::cout << "materialized " << samples.size() << " samples to "
                << s.get("path.materialize") << '\n';
    }
    result = train_student(tcfg_model, teacher, manifest, pre, mode, tcfg,
                           &std::cerr);
  }
  save_model((out / "student.pscp").string(), result.student_cfg,
             result.weights);
  write_text_file((out / "train_log.txt").string(), result.log.to_text());
  write_resolved(s, out);
  std::cout << "student (" << to_string(mode) << ") at "
            << (out / "student.pscp").string() << '\n';
  return 0;
}

int run_distill(RunSettings& s) {
  fill_run_defaults(s);
  fill_pre_defaults(s);
  fill_train_defaults(s);
  s.set_default("distill.mode", "logit_mse");
  s.set_default("distill.batch_size", "729");
  apply_threads(s);
  return f64_run(s) ? run_distill_t<double>(s) : run_distill_t<float>(s);
}

template <typename T>
int run_score_t(RunSettings& s) {
  auto [mcfg, weights] = load_model<T>(s.get("path.model"));
  const DatasetManifest manifest = load_manifest(s.get("path.data"));
  const PreprocessConfig pre = pre_from_settings(s);
  const Split split = split_from_string(s.get("eval.split"));
  int skipped = 0;
  const auto rows = score_split(mcfg, weights, manifest, split, pre, 0,
                                &skipped);
  const std::string out = s.get("path.out");
  write_score_csv(out, rows);
  write_text_file(out + ".resolved.cfg", s.resolved_text());
  std::cout << "scored " << rows.size() << " images (skipped " << skipped
            << ") to " << out << '\n';
  return 0;
}

int run_score(RunSettings& s) {
  fill_run_defaults(s);
  fill_pre_defaults(s);
  s.set_default("eval.split", "test");
  apply_threads(s);
  return f64_run(s) ? run_score_t<double>(s) : run_score_t<float>(s);
}

template <typename T>
int run_heatmap_t(RunSettings& s) {
  auto [mcfg, weights] = load_model<T>(s.get("path.model"));
  const PreprocessConfig pre = pre_from_settings(s);
  const fs::path out = s.get("path.out");
  fs::create_directories(out);
  const Image img = read_image(s.get("path.image"));
  Rng rng(pre.seed);
  const Tensor<T> x = preprocess_image<T>(img, pre, /*random_crop=*/false, rng);
  const PatchScoreMap map = score_map(mcfg, weights, x, s.get("path.image"));
  const bool degenerate =
      export_heatmap(map, (out / "heatmap.pgm").string());
  if (degenerate) {
    std::cerr << "warning: constant score map; heatmap is uniform mid-gray\n";
  }
  const auto k = s.get_i("heatmap.top_k");
  if (k > 0) {
    const auto top = top_k_patches(map, x, k);
    std::string csv = "rank,row,col,logit,file\n";
    char line[160];
    for (std::size_t i = 0; i < top.size(); ++i) {
      char name[48];
      std::snprintf(name, sizeof(name), "patch_%02zu.ppm", i);
      write_ppm((out / name).string(), crop_to_image(top[i].crop));
      std::snprintf(line, sizeof(line), "%zu,%lld,%lld,%.12g,%s\n", i,
                    static_cast<long long>(top[i].row),
                    static_cast<long long>(top[i].col), top[i].logit, name);
      csv += line;
    }
    write_text_file((out / "patches.csv").string(), csv);
  }
  write_resolved(s, out);
  std::cout << "heatmap (" << map.h << "x" << map.w << ") at "
            << (out / "heatmap.pgm").string() << '\n';
  return 0;
}

int run_heatmap(RunSettings& s) {
  fill_run_defaults(s);
  fill_pre_defaults(s);
  s.set_default("heatmap.top_k", "0");
  apply_threads(s);
  return f64_run(s) ? run_heatmap_t<double>(s) : run_heatmap_t<float>(s);
}

template <typename T>
int run_eval_t(RunSettings& s) {
  auto [mcfg, weights] = load_model<T>(s.get("path.model"));
  const PreprocessConfig pre = pre_from_settings(s);
  const Split split = split_from_string(s.get("eval.split"));
  // eval.sets: semicolon-separated name=manifest entries
  std::vector<std::pair<std::string, DatasetManifest>> manifests;
  std::stringstream ss(s.get("eval.sets"));
  std::string entry;
  while (std::getline(ss, entry, ';')) {
    if (entry.empty()) continue;
    const auto eq = entry.find('=');
    std::string name, path;
    if (eq == std::string::npos) {
      path = entry;
      name = fs::path(entry).stem().string();
    } else {
      name = entry.substr(0, eq);
      path = entry.substr(eq + 1);
    }
    manifests.emplace_back(name, load_manifest(path));
  }
  std::vector<NamedSplit> sets;
  for (auto& [name, manifest] : manifests) {
    sets.push_back({name, &manifest, split});
  }
  std::vector<std::vector<ScoreRow>> rows;
  const EvalReport report = evaluate(mcfg, weights, sets, pre, &rows);
  const fs::path out = s.get("path.out");
  fs::create_directories(out);
  write_text_file((out / "report.txt").string(), report.to_text());
  write_text_file((out / "report.csv").string(), report.to_csv());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    write_score_csv((out / (sets[i].name + "_scores.csv")).string(), rows[i]);
  }
  write_resolved(s, out);
  std::cout << report.to_text();
  return 0;
}

int run_eval(RunSettings& s) {
  fill_run_defaults(s);
  fill_pre_defaults(s);
  s.set_default("eval.split", "test");
  apply_threads(s);
  return f64_run(s) ? run_eval_t<double>(s) : run_eval_t<float>(s);
}

template <typename T>
int run_sweep_t(RunSettings& s) {
  auto [mcfg, weights] = load_model<T>(s.get("path.model"));
  const DatasetManifest manifest = load_manifest(s.get("path.data"));
  const PreprocessConfig pre = pre_from_settings(s);
  const Split split = split_from_string(s.get("eval.split"));
  const auto qualities = parse_int_list(s.get("sweep.qualities"), "qualities");
  const auto reports =
      jpeg_bias_sweep(mcfg, weights, manifest, split, qualities, pre);
  const fs::path out = s.get("path.out");
  fs::create_directories(out);
  std::string combined;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const std::string name =
        "report_q" + std::to_string(qualities[i]);
    write_text_file((out / (name + ".txt")).string(), reports[i].to_text());
    write_text_file((out / (name + ".csv")).string(), reports[i].to_csv());
    combined += reports[i].to_text();
  }
  write_resolved(s, out);
  std::cout << combined;
  return 0;
}

int run_sweep(RunSettings& s) {
  fill_run_defaults(s);
  fill_pre_defaults(s);
  s.set_default("eval.split", "test");
  s.set_default("sweep.qualities", "100,90,80,70");
  apply_threads(s);
  return f64_run(s) ? run_sweep_t<double>(s) : run_sweep_t<float>(s);
}

int run_ensemble(RunSettings& s) {
  fill_run_defaults(s);
  const auto a = read_score_csv(s.get("path.a"));
  const auto b = read_score_csv(s.get("path.b"));
  double alpha = 0.0;
  if (s.has("ensemble.grid")) {
    // lo:hi:step over validation score files
    const std::string grid = s.get("ensemble.grid");
    double lo = 0, hi = 0, step = 0;
    std::stringstream ss(grid);
    std::string f1, f2, f3;
    if (!std::getline(ss, f1, ':') || !std::getline(ss, f2, ':') ||
        !std::getline(ss, f3, ':')) {
      throw ConfigError("ensemble.grid must be lo:hi:step");
    }
    lo = std::stod(f1);
    hi = std::stod(f2);
    step = std::stod(f3);
    if (step <= 0 || hi < lo) throw ConfigError("bad ensemble.grid range");
    std::vector<double> alphas;
    for (double v = lo; v <= hi + 1e-12; v += step) alphas.push_back(v);
    const auto va = read_score_csv(s.get("path.val_a"));
    const auto vb = read_score_csv(s.get("path.val_b"));
    alpha = grid_search_alpha(va, vb, alphas);
    std::cout << "selected alpha " << alpha << " by validation AP\n";
  } else {
    alpha = s.get_f("ensemble.alpha");
  }
  const auto combined = ensemble_scores(a, b, alpha);
  const std::string out = s.get("path.out");
  write_score_csv(out, combined);
  write_text_file(out + ".resolved.cfg",
                  s.resolved_text() + "ensemble.selected_alpha=" +
                      std::to_string(alpha) + "\n");
  bool labeled = true;
  for (const auto& r : combined) labeled = labeled && r.label >= 0;
  if (labeled) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& r : combined) {
      scores.push_back(r.logit);
      labels.push_back(r.label);
    }
    std::cout << "combined AP " << average_precision(scores, labels) << '\n';
  }
  std::cout << "wrote " << combined.size() << " combined scores to " << out
            << '\n';
  return 0;
}

template <typename T>
int run_bench_t(RunSettings& s) {
  ModelConfig mcfg;
  ModelWeights<T> weights;
  if (s.has("path.model")) {
    std::tie(mcfg, weights) = load_model<T>(s.get("path.model"));
  } else {
    fill_model_defaults(s);
    mcfg = model_from_settings(s);
    weights = init_weights<T>(mcfg, static_cast<std::uint64_t>(s.get_i("run.seed")));
  }
  const auto input = s.get_i("bench.input");
  const auto repeats = static_cast<int>(s.get_i("bench.repeats"));
  const BenchReport report = bench(mcfg, weights, input, input, repeats);
  std::cout << "model: " << to_string(mcfg.kind) << " q=" << mcfg.patch_size
            << '\n'
            << report.to_text();
  if (s.has("path.out")) {
    write_text_file(s.get("path.out"), report.to_text());
    write_text_file(s.get("path.out") + ".resolved.cfg", s.resolved_text());
  }
  return 0;
}

int run_bench(RunSettings& s) {
  fill_run_defaults(s);
  s.set_default("bench.input", "224");
  s.set_default("bench.repeats", "5");
  apply_threads(s);
  return f64_run(s) ? run_bench_t<double>(s) : run_bench_t<float>(s);
}

// ------------------------------------------------------------- wiring

struct FlagSpec {
  std::string flag;
  std::string key;
  std::string help;
};

void wire(CLI::App* cmd, RunSettings& s,
          std::shared_ptr<std::map<std::string, std::string>> pending,
          const std::vector<FlagSpec>& flags) {
  auto config_path = std::make_shared<std::string>();
  cmd->add_option("--config", *config_path,
                  "key=value config file (flags override file values)");
  for (const auto& f : flags) {
    cmd->add_option_function<std::string>(
        f.flag,
        [pending, key = f.key](const std::string& v) { (*pending)[key] = v; },
        f.help);
  }
  cmd->add_option_function<std::string>(
      "--threads",
      [pending](const std::string& v) { (*pending)["run.threads"] = v; },
      "worker lanes (default: PATCHSCOPE_THREADS or hardware)");
  cmd->add_option_function<std::string>(
      "--seed",
      [pending](const std::string& v) { (*pending)["run.seed"] = v; },
      "run seed");
  cmd->add_option_function<std::string>(
      "--precision",
      [pending](const std::string& v) { (*pending)["run.precision"] = v; },
      "f32 or f64");
  cmd->parse_complete_callback([config_path, pending, &s]() {
    if (!config_path->empty()) s.load_file(*config_path);
    for (const auto& [k, v] : *pending) s.set(k, v);
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "patchscope: train, distill, score, and benchmark patch-based deepfake "
      "detectors"};
  app.require_subcommand(1);

  RunSettings settings;
  std::function<int(RunSettings&)> runner;

  auto add_cmd = [&](const std::string& name, const std::string& help,
                     int (*fn)(RunSettings&),
                     const std::vector<FlagSpec>& flags) {
    auto* cmd = app.add_subcommand(name, help);
    auto pending = std::make_shared<std::map<std::string, std::string>>();
    wire(cmd, settings, pending, flags);
    cmd->callback([&runner, fn]() { runner = fn; });
    return cmd;
  };

  add_cmd("synth", "generate the synthetic real/fake verification dataset",
          run_synth,
          {{"--out", "path.out", "output directory"},
           {"--train", "synth.train", "train images per class"},
           {"--val", "synth.val", "val images per class"},
           {"--test", "synth.test", "test images per class"},
           {"--size", "synth.size", "image size (default 224)"},
           {"--mode", "synth.mode", "standard | jpeg_confound"},
           {"--confound-quality", "synth.confound_quality",
            "JPEG quality for the confounded real class"},
           {"--sigma", "synth.sigma", "sensor noise sigma (standard mode)"}});

  add_cmd("manifest", "scan a real/+fake/ tree into a manifest", run_manifest,
          {{"--dir", "path.dir", "dataset root with real/ and fake/"},
           {"--out", "path.out", "manifest output path"},
           {"--split", "manifest.split", "assign all records to one split"},
           {"--fractions", "manifest.fractions",
            "train,val fractions (rest is test; seeded shuffle)"}});

  add_cmd("train", "train a detector on a manifest", run_train,
          {{"--data", "path.data", "manifest file"},
           {"--out", "path.out", "output directory"},
           {"--kind", "model.kind", "ladeda | tiny"},
           {"--preset", "model.preset", "full | reduced (ladeda widths)"},
           {"--q", "model.q", "patch size (5 or 9)"},
           {"--pooling", "model.pooling", "average | max"},
           {"--stem-width", "model.stem_width", "stem channels"},
           {"--channels", "model.channels", "per-layer output channels"},
           {"--mids", "model.mids", "bottleneck widths"},
           {"--blocks", "model.blocks", "blocks per layer"},
           {"--strides", "model.strides", "per-layer strides"},
           {"--representation", "pre.representation", "raw | gradient"},
           {"--resize-to", "pre.resize_to", "resize target"},
           {"--crop", "pre.crop", "crop size"},
           {"--lr", "train.lr", "initial learning rate"},
           {"--batch-size", "train.batch_size", "optimizer batch size"},
           {"--micro-batch", "train.micro_batch",
            "forward micro-batch (BN statistics granularity)"},
           {"--epochs", "train.max_epochs", "max epochs"},
           {"--patience", "train.patience", "plateau patience"}});

  add_cmd("distill", "distill a trained teacher into the tiny student",
          run_distill,
          {{"--teacher", "path.teacher", "teacher model file"},
           {"--data", "path.data", "manifest file"},
           {"--out", "path.out", "output directory"},
           {"--mode", "distill.mode", "logit_mse | hard_label"},
           {"--batch-size", "distill.batch_size",
            "patches per step (default 729)"},
           {"--epochs", "train.max_epochs", "max epochs"},
           {"--lr", "train.lr", "initial learning rate"},
           {"--materialize", "path.materialize",
            "also write the distillation set to this container"},
           {"--from-set", "path.from_set",
            "train from a materialized set instead of streaming"},
           {"--representation", "pre.representation", "raw | gradient"},
           {"--resize-to", "pre.resize_to", "resize target"},
           {"--crop", "pre.crop", "crop size"}});

  add_cmd("score", "write per-image scores for a split", run_score,
          {{"--model", "path.model", "model file"},
           {"--data", "path.data", "manifest file"},
           {"--split", "eval.split", "train | val | test"},
           {"--out", "path.out", "score CSV path"},
           {"--representation", "pre.representation", "raw | gradient"},
           {"--resize-to", "pre.resize_to", "resize target"},
           {"--crop", "pre.crop", "crop size"}});

  add_cmd("heatmap", "export the patch-score heatmap and top-k patches",
          run_heatmap,
          {{"--model", "path.model", "model file"},
           {"--image", "path.image", "input image"},
           {"--out", "path.out", "output directory"},
           {"--top-k", "heatmap.top_k", "also export the k most fake patches"},
           {"--representation", "pre.representation", "raw | gradient"},
           {"--resize-to", "pre.resize_to", "resize target"},
           {"--crop", "pre.crop", "crop size"}});

  add_cmd("eval", "evaluate a model over named test sets", run_eval,
          {{"--model", "path.model", "model file"},
           {"--data", "eval.sets",
            "semicolon-separated name=manifest entries"},
           {"--split", "eval.split", "split to evaluate"},
           {"--out", "path.out", "output directory"},
           {"--representation", "pre.representation", "raw | gradient"},
           {"--resize-to", "pre.resize_to", "resize target"},
           {"--crop", "pre.crop", "crop size"}});

  add_cmd("jpeg-sweep", "recompress fake test images per quality and re-score",
          run_sweep,
          {{"--model", "path.model", "model file"},
           {"--data", "path.data", "manifest file"},
           {"--split", "eval.split", "split to evaluate"},
           {"--qualities", "sweep.qualities", "for example 100,90,80,70"},
           {"--out", "path.out", "output directory"},
           {"--representation", "pre.representation", "raw | gradient"},
           {"--resize-to", "pre.resize_to", "resize target"},
           {"--crop", "pre.crop", "crop size"}});

  add_cmd("ensemble", "linearly combine two score files", run_ensemble,
          {{"--a", "path.a", "first score CSV (base)"},
           {"--b", "path.b", "second score CSV (scaled by alpha)"},
           {"--alpha", "ensemble.alpha", "fixed alpha"},
           {"--grid", "ensemble.grid", "lo:hi:step alpha grid search"},
           {"--val-a", "path.val_a", "validation scores for the grid search"},
           {"--val-b", "path.val_b", "validation scores for the grid search"},
           {"--out", "path.out", "combined score CSV path"}});

  add_cmd("bench", "cost model and single-image latency", run_bench,
          {{"--model", "path.model", "model file (else --kind/--preset)"},
           {"--kind", "model.kind", "ladeda | tiny"},
           {"--preset", "model.preset", "full | reduced"},
           {"--q", "model.q", "patch size"},
           {"--pooling", "model.pooling", "average | max"},
           {"--input", "bench.input", "square input size (default 224)"},
           {"--repeats", "bench.repeats", "latency repeats (0 = skip)"},
           {"--out", "path.out", "also write the report here"}});

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: usage: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: io: " << e.what() << '\n';
    return 3;
  }

  try {
    return runner(settings);
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: io: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::string msg = e.what();
    for (auto& c : msg) {
      if (c == '\n') c = ' ';
    }
    std::cerr << "error: data: " << msg << '\n';
    return 4;
  } catch (const NumericError& e) {
    std::cerr << "error: numeric: " << e.what() << '\n';
    return 5;
  }
}
