#pragma once

// Teacher-to-student transfer: the distillation set pairs each q x q input
// window on the teacher's score-map grid with that cell's logit; the
// student regresses the logits with MSE (or, for the ablation, classifies
// every patch with its image label).

#include <optional>
#include <vector>

#include "patchscope/datasets.hpp"
#include "patchscope/netbuilder.hpp"
#include "patchscope/scorer.hpp"
#include "patchscope/trainer.hpp"

namespace patchscope {

enum class DistillMode { logit_mse, hard_label };

inline DistillMode distill_mode_from_string(const std::string& s) {
  if (s == "logit_mse") return DistillMode::logit_mse;
  if (s == "hard_label") return DistillMode::hard_label;
  throw ConfigError("unknown distillation mode: " + s);
}

inline std::string to_string(DistillMode m) {
  return m == DistillMode::logit_mse ? "logit_mse" : "hard_label";
}

template <typename T>
struct DistillSample {
  Tensor<T> patch;  // [3,q,q]
  std::optional<double> target_logit;
  int hard_label = 0;
};

// One sample per score-map cell: the window at (stride*i, stride*j) paired
// with the teacher's logit at (i, j). 729 samples per 224x224 image at q=9.
template <typename T>
std::vector<DistillSample<T>> extract_teacher_patches(
    const ModelConfig& teacher_cfg, ModelWeights<T>& teacher,
    const Tensor<T>& image, int image_label) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ConfigError("extract_teacher_patches expects a [3,H,W] image");
  }
  const std::int64_t q = receptive_field(teacher_cfg);
  if (image.dim(1) < q || image.dim(2) < q) {
    throw ConfigError("image " + std::to_string(image.dim(1)) + "x" +
                      std::to_string(image.dim(2)) +
                      " smaller than teacher patch size " + std::to_string(q));
  }
  const PatchScoreMap map = score_map(teacher_cfg, teacher, image, "");
  const std::int64_t H = image.dim(1), W = image.dim(2);
  const T* src = image.data();
  std::vector<DistillSample<T>> out;
  out.reserve(static_cast<std::size_t>(map.cells()));
  for (std::int64_t i = 0; i < map.h; ++i) {
    for (std::int64_t j = 0; j < map.w; ++j) {
      const std::int64_t y0 = i * map.stride, x0 = j * map.stride;
      std::vector<T> patch(static_cast<std::size_t>(3 * q * q));
      for (std::int64_t c = 0; c < 3; ++c) {
        for (std::int64_t y = 0; y < q; ++y) {
          for (std::int64_t x = 0; x < q; ++x) {
            patch[static_cast<std::size_t>((c * q + y) * q + x)] =
                src[(c * H + y0 + y) * W + x0 + x];
          }
        }
      }
      DistillSample<T> s;
      s.patch = Tensor<T>::from_vector({3, q, q}, std::move(patch));
      s.target_logit = map.at(i, j);
      s.hard_label = image_label;
      out.push_back(std::move(s));
    }
  }
  return out;
}

// One fixed, seeded train-style crop per image; streaming training and
// materialized sets share this so a set regenerates identically.
template <typename T>
Tensor<T> load_distill_image(const DatasetManifest& manifest,
                             std::int64_t index, const PreprocessConfig& pre) {
  const auto& rec = manifest.records[static_cast<std::size_t>(index)];
  Rng crop_rng(
      derive_seed(pre.seed, 0x44495354 + static_cast<std::uint64_t>(index)));
  const Image img = read_image(manifest.resolve(rec));
  return preprocess_image<T>(img, pre, /*random_crop=*/true, crop_rng);
}

// Extracts the full train-split distillation set (teacher grid order,
// manifest order over images).
template <typename T>
std::vector<DistillSample<T>> build_distill_set(
    const ModelConfig& teacher_cfg, ModelWeights<T>& teacher,
    const DatasetManifest& manifest, const PreprocessConfig& pre) {
  std::vector<DistillSample<T>> out;
  for (const std::int64_t idx : manifest.view(Split::train)) {
    const auto& rec = manifest.records[static_cast<std::size_t>(idx)];
    const Tensor<T> image = load_distill_image<T>(manifest, idx, pre);
    auto samples = extract_teacher_patches(
        teacher_cfg, teacher, image, rec.label == Label::fake ? 1 : 0);
    for (auto& s : samples) out.push_back(std::move(s));
  }
  return out;
}

// Materialized distillation sets: container with patches/targets/labels.
template <typename T>
void save_distill_set(const std::string& path,
                      const std::vector<DistillSample<T>>& samples) {
  if (samples.empty()) throw DataError("empty distillation set");
  const std::int64_t q = samples.front().patch.dim(1);
  const auto n = static_cast<std::int64_t>(samples.size());
  Container c;
  bool has_targets = true;
  NamedArray patches{"patches", {n, 3, q, q}, {}};
  NamedArray targets{"targets", {n}, {}};
  NamedArray labels{"labels", {n}, {}};
  patches.values.reserve(static_cast<std::size_t>(n * 3 * q * q));
  for (const auto& s : samples) {
    if (s.patch.shape() != Shape{3, q, q}) {
      throw DataError("distillation set mixes patch sizes");
    }
    for (const T v : s.patch.vec()) {
      patches.values.push_back(static_cast<double>(v));
    }
    if (s.target_logit) {
      targets.values.push_back(*s.target_logit);
    } else {
      has_targets = false;
      targets.values.push_back(0.0);
    }
    labels.values.push_back(static_cast<double>(s.hard_label));
  }
  c.header = std::string("distillset\n") +
             "has_targets=" + (has_targets ? "1" : "0") + "\n";
  c.tensors.push_back(std::move(patches));
  if (has_targets) c.tensors.push_back(std::move(targets));
  c.tensors.push_back(std::move(labels));
  write_container(path, c);
}

template <typename T>
std::vector<DistillSample<T>> load_distill_set(const std::string& path) {
  const Container c = read_container(path);
  if (c.header.rfind("distillset", 0) != 0) {
    throw DataError("not a distillation set container: " + path);
  }
  const NamedArray* patches = nullptr;
  const NamedArray* targets = nullptr;
  const NamedArray* labels = nullptr;
  for (const auto& t : c.tensors) {
    if (t.name == "patches") patches = &t;
    if (t.name == "targets") targets = &t;
    if (t.name == "labels") labels = &t;
  }
  if (!patches || !labels || patches->dims.size() != 4) {
    throw DataError("malformed distillation set: " + path);
  }
  const std::int64_t n = patches->dims[0], q = patches->dims[2];
  std::vector<DistillSample<T>> out;
  out.reserve(static_cast<std::size_t>(n));
  const std::size_t stride = static_cast<std::size_t>(3 * q * q);
  for (std::int64_t i = 0; i < n; ++i) {
    DistillSample<T> s;
    std::vector<T> patch(stride);
    for (std::size_t k = 0; k < stride; ++k) {
      patch[k] = static_cast<T>(
          patches->values[static_cast<std::size_t>(i) * stride + k]);
    }
    s.patch = Tensor<T>::from_vector({3, q, q}, std::move(patch));
    if (targets) s.target_logit = targets->values[static_cast<std::size_t>(i)];
    s.hard_label = static_cast<int>(labels->values[static_cast<std::size_t>(i)]);
    out.push_back(std::move(s));
  }
  return out;
}

namespace distdetail {

template <typename T>
Tensor<T> stack_patches(const std::vector<const DistillSample<T>*>& batch) {
  const std::int64_t q = batch.front()->patch.dim(1);
  const auto B = static_cast<std::int64_t>(batch.size());
  std::vector<T> data(static_cast<std::size_t>(B * 3 * q * q));
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& v = batch[static_cast<std::size_t>(b)]->patch.vec();
    std::copy(v.begin(), v.end(), data.begin() + b * 3 * q * q);
  }
  return Tensor<T>::from_vector({B, 3, q, q}, std::move(data));
}

// One optimizer step on a batch of patches; returns the loss value.
template <typename T>
double student_step(const ModelConfig& student_cfg,
                    ModelWeights<T>& student,
                    std::vector<Tensor<T>>& params, AdamState<T>& state,
                    const TrainConfig& step_cfg,
                    const std::vector<const DistillSample<T>*>& batch,
                    DistillMode mode) {
  Tensor<T> x = stack_patches(batch);
  Tensor<T> z = image_logits(student_cfg, student, x, /*train=*/false);
  Tensor<T> loss;
  if (mode == DistillMode::logit_mse) {
    std::vector<T> targets;
    targets.reserve(batch.size());
    for (const auto* s : batch) {
      if (!s->target_logit) {
        throw DataError(
            "logit_mse distillation requires teacher targets, but the sample "
            "set carries hard labels only");
      }
      targets.push_back(static_cast<T>(*s->target_logit));
    }
    loss = mse_loss(z, targets);
  } else {
    std::vector<int> labels;
    labels.reserve(batch.size());
    for (const auto* s : batch) labels.push_back(s->hard_label);
    loss = bce_with_logits(z, labels);
  }
  student.zero_grads();
  loss.backward();
  adam_step(params, state, step_cfg);
  return static_cast<double>(loss.item());
}

}  // namespace distdetail

template <typename T>
struct DistillResult {
  ModelConfig student_cfg;
  ModelWeights<T> weights;  // best-validation snapshot
  TrainLog log;
  double best_val_acc = 0.0;
  int best_epoch = 0;
};

// Streams the distillation set from the manifest's train split: one fixed,
// seeded crop per image, teacher logits cached, one optimizer step per
// image (batch = that image's patch count). Validation accuracy uses the
// student's image-level scores on the val split.
template <typename T>
DistillResult<T> train_student(const ModelConfig& teacher_cfg,
                               ModelWeights<T>& teacher,
                               const DatasetManifest& manifest,
                               const PreprocessConfig& pre, DistillMode mode,
                               const TrainConfig& cfg,
                               std::ostream* progress = nullptr) {
  cfg.validate();
  const auto train_idx = manifest.view(Split::train);
  const auto val_idx = manifest.view(Split::val);

  DistillResult<T> result;
  result.student_cfg = tiny_config();
  auto [scfg, student] = build_tiny<T>(derive_seed(cfg.seed, 0x53545544));
  result.student_cfg = scfg;

  auto params = student.learnable();
  auto state = AdamState<T>::init(params);
  double lr = cfg.lr;
  TrainConfig step_cfg = cfg;
  PlateauSchedule schedule(cfg.plateau_patience, cfg.plateau_threshold,
                           cfg.lr_drop_factor);
  result.best_val_acc = -1.0;

  // Per-image teacher targets are cached; patches are re-sliced from the
  // deterministic per-image crop each epoch.
  std::unordered_map<std::int64_t, std::vector<double>> target_cache;
  auto load_fixed = [&](std::int64_t idx) {
    return load_distill_image<T>(manifest, idx, pre);
  };

  Rng rng(derive_seed(cfg.seed, 0x44495354));
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    auto order = train_idx;
    shuffle_indices(order, rng);
    double loss_sum = 0.0;
    for (const std::int64_t idx : order) {
      const auto& rec = manifest.records[static_cast<std::size_t>(idx)];
      Tensor<T> image = load_fixed(idx);
      const int label = rec.label == Label::fake ? 1 : 0;
      std::vector<DistillSample<T>> samples;
      auto cached = target_cache.find(idx);
      if (cached == target_cache.end()) {
        samples = extract_teacher_patches(teacher_cfg, teacher, image, label);
        std::vector<double> targets;
        targets.reserve(samples.size());
        for (const auto& s : samples) targets.push_back(*s.target_logit);
        target_cache.emplace(idx, std::move(targets));
      } else {
        // Re-slice windows; pair with cached logits.
        const MapGeometry geo =
            score_map_geometry(teacher_cfg, image.dim(1), image.dim(2));
        const std::int64_t q = geo.patch;
        const std::int64_t H = image.dim(1), W = image.dim(2);
        const T* src = image.data();
        samples.reserve(cached->second.size());
        std::size_t cell = 0;
        for (std::int64_t i = 0; i < geo.h; ++i) {
          for (std::int64_t j = 0; j < geo.w; ++j) {
            std::vector<T> patch(static_cast<std::size_t>(3 * q * q));
            for (std::int64_t c = 0; c < 3; ++c) {
              for (std::int64_t y = 0; y < q; ++y) {
                for (std::int64_t x = 0; x < q; ++x) {
                  patch[static_cast<std::size_t>((c * q + y) * q + x)] =
                      src[(c * H + i * geo.stride + y) * W + j * geo.stride + x];
                }
              }
            }
            DistillSample<T> s;
            s.patch = Tensor<T>::from_vector({3, q, q}, std::move(patch));
            s.target_logit = cached->second[cell++];
            s.hard_label = label;
            samples.push_back(std::move(s));
          }
        }
      }
      std::vector<const DistillSample<T>*> batch;
      batch.reserve(samples.size());
      for (const auto& s : samples) batch.push_back(&s);
      step_cfg.lr = lr;
      loss_sum += distdetail::student_step(result.student_cfg, student, params,
                                           state, step_cfg, batch, mode);
    }
    const double train_loss = loss_sum / static_cast<double>(order.size());
    if (!std::isfinite(train_loss)) {
      throw NumericError("non-finite distillation loss at epoch " +
                         std::to_string(epoch));
    }
    Rng eval_rng(derive_seed(cfg.seed, 0x4556414c));
    auto [probs, labels] = traindetail::score_records(
        result.student_cfg, student, manifest, val_idx, pre, 32, eval_rng);
    const double val_acc = traindetail::acc_at_half(probs, labels);
    result.log.entries.push_back({epoch, train_loss, val_acc, lr});
    if (progress) {
      (*progress) << "distill epoch " << epoch << " loss " << train_loss
                  << " val_acc " << val_acc << " lr " << lr << '\n';
    }
    if (val_acc > result.best_val_acc) {
      result.best_val_acc = val_acc;
      result.best_epoch = epoch;
      result.weights = student.clone();
    }
    schedule.observe(val_acc, lr);
  }
  if (result.best_epoch == 0) result.weights = student.clone();
  return result;
}

// Trains the student from a materialized sample set, batching
// cfg.batch_size patches per step (729 = one image's worth by default).
template <typename T>
DistillResult<T> train_student_from_set(
    const std::vector<DistillSample<T>>& samples, DistillMode mode,
    const TrainConfig& cfg, std::ostream* progress = nullptr) {
  cfg.validate();
  if (samples.empty()) throw DataError("empty distillation sample set");
  DistillResult<T> result;
  auto [scfg, student] = build_tiny<T>(derive_seed(cfg.seed, 0x53545544));
  result.student_cfg = scfg;
  auto params = student.learnable();
  auto state = AdamState<T>::init(params);
  TrainConfig step_cfg = cfg;
  Rng rng(derive_seed(cfg.seed, 0x44495354));
  std::vector<std::int64_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    order[i] = static_cast<std::int64_t>(i);
  }
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    shuffle_indices(order, rng);
    double loss_sum = 0.0;
    std::int64_t batches = 0;
    for (std::size_t at = 0; at < order.size();
         at += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const DistillSample<T>*> batch;
      for (std::size_t i = at; i < end; ++i) {
        batch.push_back(&samples[static_cast<std::size_t>(order[i])]);
      }
      loss_sum += distdetail::student_step(result.student_cfg, student, params,
                                           state, step_cfg, batch, mode);
      ++batches;
    }
    const double train_loss = loss_sum / static_cast<double>(batches);
    result.log.entries.push_back({epoch, train_loss, 0.0, cfg.lr});
    if (progress) {
      (*progress) << "distill epoch " << epoch << " loss " << train_loss
                  << '\n';
    }
  }
  result.weights = student.clone();
  return result;
}

}  // namespace patchscope
