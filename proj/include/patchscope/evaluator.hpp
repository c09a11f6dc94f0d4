#pragma once

// Metrics (ACC, AP, mAP), evaluation reports, the JPEG-compression bias
// sweep, the linear score ensemble, and the FLOPs/latency bench.
// Positive class is fake everywhere; every report says so in its header.

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "patchscope/datasets.hpp"
#include "patchscope/jpeg.hpp"
#include "patchscope/netbuilder.hpp"
#include "patchscope/scorer.hpp"
#include "patchscope/trainer.hpp"

namespace patchscope {

// Step-interpolated AP over the descending-score ranking; ties keep input
// order (stable sort). Throws DataError when only one class is present.
double average_precision(const std::vector<double>& scores,
                         const std::vector<int>& labels);

// Fraction correct with probability >= threshold classified fake; the
// boundary counts as fake.
double accuracy(const std::vector<double>& probs,
                const std::vector<int>& labels, double threshold = 0.5);

struct SetMetrics {
  std::string name;
  int n_real = 0, n_fake = 0;
  double acc = 0.0, ap = 0.0;
  int skipped = 0;  // per-file codec/load failures
};

struct EvalReport {
  std::vector<SetMetrics> sets;
  double mean_acc = 0.0;
  double map = 0.0;  // unweighted mean of per-set AP
  std::vector<std::pair<std::string, std::string>> metadata;

  void finalize();  // fills mean_acc / map from sets
  std::string to_text() const;
  std::string to_csv() const;
};

struct NamedSplit {
  std::string name;
  const DatasetManifest* manifest = nullptr;
  Split split = Split::test;
};

// ------------------------------------------------------------ scoring

// Scores one split (eval preprocessing). jpeg_fake_quality > 0 recompresses
// fake images through the codec at that quality before preprocessing; reals
// are untouched. Codec/load failures skip the record and are counted.
template <typename T>
std::vector<ScoreRow> score_split(const ModelConfig& cfg,
                                  ModelWeights<T>& weights,
                                  const DatasetManifest& manifest, Split split,
                                  const PreprocessConfig& pre,
                                  int jpeg_fake_quality = 0,
                                  int* skipped = nullptr) {
  const auto idx = manifest.view(split);
  Rng rng(derive_seed(pre.seed, 0x45564c53));
  std::vector<ScoreRow> rows;
  int skip_count = 0;
  NoGradGuard ng;
  for (const std::int64_t i : idx) {
    const auto& rec = manifest.records[static_cast<std::size_t>(i)];
    try {
      Image img = read_image(manifest.resolve(rec));
      if (jpeg_fake_quality > 0 && rec.label == Label::fake) {
        img = jpeg_decode(jpeg_encode(img, jpeg_fake_quality));
      }
      Tensor<T> x = preprocess_image<T>(img, pre, /*random_crop=*/false, rng);
      Tensor<T> in = reshape(x, {1, 3, x.dim(1), x.dim(2)});
      Tensor<T> z = image_logits(cfg, weights, in, /*train=*/false);
      ScoreRow row;
      row.path = rec.path;
      row.logit = static_cast<double>(z.item());
      row.prob = fake_probability(row.logit);
      row.label = rec.label == Label::fake ? 1 : 0;
      rows.push_back(std::move(row));
    } catch (const std::exception&) {
      ++skip_count;
    }
  }
  if (skipped) *skipped = skip_count;
  if (rows.empty()) {
    throw DataError("no records in split '" + to_string(split) +
                    "' could be scored");
  }
  return rows;
}

SetMetrics metrics_from_rows(const std::string& name,
                             const std::vector<ScoreRow>& rows, int skipped);

// Per-set metrics plus aggregates over several named test sets.
template <typename T>
EvalReport evaluate(const ModelConfig& cfg, ModelWeights<T>& weights,
                    const std::vector<NamedSplit>& sets,
                    const PreprocessConfig& pre,
                    std::vector<std::vector<ScoreRow>>* score_rows = nullptr) {
  if (sets.empty()) throw ConfigError("evaluate: no test sets given");
  EvalReport report;
  report.metadata = {
      {"model", model_id(weights)},
      {"model_kind", to_string(cfg.kind)},
      {"pooling", to_string(cfg.pooling)},
      {"preprocessing", pre.describe()},
      {"positive_class", "fake"},
      {"threshold", "probability 0.5 (boundary counts as fake)"},
  };
  for (const auto& s : sets) {
    int skipped = 0;
    auto rows = score_split(cfg, weights, *s.manifest, s.split, pre, 0,
                            &skipped);
    report.sets.push_back(metrics_from_rows(s.name, rows, skipped));
    if (score_rows) score_rows->push_back(std::move(rows));
  }
  report.finalize();
  return report;
}

// Table-4-style protocol: fake test images recompressed at each quality
// (100 = passthrough, no codec involvement), reals untouched.
template <typename T>
std::vector<EvalReport> jpeg_bias_sweep(const ModelConfig& cfg,
                                        ModelWeights<T>& weights,
                                        const DatasetManifest& manifest,
                                        Split split,
                                        const std::vector<int>& qualities,
                                        const PreprocessConfig& pre) {
  if (qualities.empty()) throw ConfigError("jpeg sweep: no qualities given");
  std::vector<EvalReport> reports;
  for (const int q : qualities) {
    if (q < 1 || q > 100) {
      throw ConfigError("jpeg sweep quality out of [1,100]: " +
                        std::to_string(q));
    }
    int skipped = 0;
    const int effective = q == 100 ? 0 : q;  // 100 = no compression
    auto rows =
        score_split(cfg, weights, manifest, split, pre, effective, &skipped);
    EvalReport r;
    r.metadata = {
        {"model", model_id(weights)},
        {"preprocessing", pre.describe()},
        {"positive_class", "fake"},
        {"jpeg_quality", std::to_string(q)},
        {"jpeg_applied_to", "fake images only"},
        {"chroma_subsampling", "4:2:0"},
    };
    r.sets.push_back(metrics_from_rows("quality_" + std::to_string(q), rows,
                                       skipped));
    r.finalize();
    reports.push_back(std::move(r));
  }
  return reports;
}

// ------------------------------------------------------------ ensemble

// Per-image linear combination a + alpha*b of logits. Throws DataError
// listing the symmetric difference when the image sets disagree.
std::vector<ScoreRow> ensemble_scores(const std::vector<ScoreRow>& a,
                                      const std::vector<ScoreRow>& b,
                                      double alpha);

// Best alpha by AP on labeled validation score files (ties pick the
// smallest alpha).
double grid_search_alpha(const std::vector<ScoreRow>& val_a,
                         const std::vector<ScoreRow>& val_b,
                         const std::vector<double>& alphas);

// ------------------------------------------------------------ bench

struct BenchReport {
  std::int64_t flops = 0;     // MACs (1 MAC = 1 FLOP)
  std::int64_t flops_2x = 0;  // 2 FLOPs per MAC convention
  std::int64_t params = 0;
  double median_ms = 0.0;
  double p95_ms = 0.0;
  int repeats = 0;
  std::int64_t input_h = 0, input_w = 0;
  std::string hardware;

  std::string to_text() const;
};

std::string hardware_descriptor();

// Cost model plus wall-clock latency of single-image forwards on one
// worker lane.
template <typename T>
BenchReport bench(const ModelConfig& cfg, ModelWeights<T>& weights,
                  std::int64_t H, std::int64_t W, int repeats) {
  BenchReport r;
  r.flops = count_flops(cfg, H, W, false);
  r.flops_2x = count_flops(cfg, H, W, true);
  r.params = count_params(cfg);
  r.repeats = repeats;
  r.input_h = H;
  r.input_w = W;
  r.hardware = hardware_descriptor();
  if (repeats > 0) {
    Rng rng(7);
    std::vector<T> data(static_cast<std::size_t>(3 * H * W));
    for (auto& v : data) v = static_cast<T>(rng.next_unit());
    Tensor<T> x = Tensor<T>::from_vector({1, 3, H, W}, std::move(data));
    const std::size_t prev_threads = thread_count();
    set_thread_count(1);
    std::vector<double> ms;
    {
      NoGradGuard ng;
      for (int i = 0; i < repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        Tensor<T> z = image_logits(cfg, weights, x, false);
        (void)z.item();
        const auto t1 = std::chrono::steady_clock::now();
        ms.push_back(
            std::chrono::duration<double, std::milli>(t1 - t0).count());
      }
    }
    set_thread_count(prev_threads);
    std::sort(ms.begin(), ms.end());
    r.median_ms = ms[ms.size() / 2];
    r.p95_ms = ms[std::min(ms.size() - 1,
                           static_cast<std::size_t>(
                               std::ceil(0.95 * static_cast<double>(ms.size())) -
                               1))];
  }
  return r;
}

}  // namespace patchscope
