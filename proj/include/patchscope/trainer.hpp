#pragma once

// Image-level training: Adam with bias correction, binary cross entropy on
// pooled patch logits, and the plateau learning-rate rule (drop 10x when
// validation accuracy fails to improve by 0.1% over 5 epochs).

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "patchscope/datasets.hpp"
#include "patchscope/netbuilder.hpp"

namespace patchscope {

struct TrainConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 32;
  // BN statistics granularity during gradient accumulation; optimizer
  // semantics stay exact for the full batch. micro_batch >= batch_size
  // disables the split.
  int micro_batch = 8;
  int plateau_patience = 5;
  double plateau_threshold = 0.001;  // 0.1% accuracy, absolute
  double lr_drop_factor = 10.0;
  int max_epochs = 30;
  std::uint64_t seed = 1;

  void validate() const;
};

// Scores are pre-sigmoid image logits S(I); labels 1 = fake, 0 = real.
template <typename T>
Tensor<T> bce_image_loss(const Tensor<T>& scores,
                         const std::vector<int>& labels) {
  return bce_with_logits(scores, labels);
}

template <typename T>
struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<T>> m, v;

  static AdamState init(const std::vector<Tensor<T>>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.vec().size(), T(0));
      s.v.emplace_back(p.vec().size(), T(0));
    }
    return s;
  }
};

// Textbook Adam with bias-corrected moments. Aborts (NumericError) on a
// non-finite gradient; parameters with no gradient buffer count as zero
// gradient.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state,
               const TrainConfig& cfg) {
  if (state.m.size() != params.size()) {
    throw ConfigError("adam state does not match parameter list");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    if (static_cast<std::int64_t>(state.m[pi].size()) != p.size()) {
      throw ConfigError("adam state shape mismatch at parameter " +
                        std::to_string(pi));
    }
    const T* g = p.has_grad() ? p.grad() : nullptr;
    T* w = p.data();
    T* m = state.m[pi].data();
    T* v = state.v[pi].data();
    const std::size_t n = state.m[pi].size();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g ? static_cast<double>(g[i]) : 0.0;
      if (!std::isfinite(gi)) {
        throw NumericError("non-finite gradient in parameter " +
                           std::to_string(pi) + "; aborting optimizer step");
      }
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      w[i] = static_cast<T>(w[i] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
    }
  }
}

// Validation-accuracy plateau rule. observe() returns true when it drops
// the learning rate (in place).
class PlateauSchedule {
 public:
  PlateauSchedule(int patience, double threshold, double factor);
  bool observe(double val_acc, double& lr);

 private:
  int patience_;
  double threshold_;
  double factor_;
  double best_;
  int bad_epochs_ = 0;
};

struct TrainLogEntry {
  int epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
};

struct TrainLog {
  std::vector<TrainLogEntry> entries;
  std::string to_text() const;  // newline-delimited records, byte-stable
};

template <typename T>
struct FitResult {
  ModelWeights<T> best_weights;
  TrainLog log;
  double best_val_acc = 0.0;
  int best_epoch = 0;
};

namespace traindetail {

// Image-level probabilities for a set of records (eval mode, center crop).
template <typename T>
std::pair<std::vector<double>, std::vector<int>> score_records(
    const ModelConfig& cfg, ModelWeights<T>& weights,
    const DatasetManifest& manifest, const std::vector<std::int64_t>& idx,
    const PreprocessConfig& pre, int micro_batch, Rng& rng) {
  NoGradGuard ng;
  std::vector<double> probs;
  std::vector<int> labels;
  for (std::size_t at = 0; at < idx.size();
       at += static_cast<std::size_t>(micro_batch)) {
    const std::size_t end =
        std::min(idx.size(), at + static_cast<std::size_t>(micro_batch));
    std::vector<std::int64_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(at),
                                    idx.begin() + static_cast<std::ptrdiff_t>(end));
    auto batch = load_batch<T>(manifest, chunk, pre, /*random_crop=*/false, rng);
    Tensor<T> z = image_logits(cfg, weights, batch.images, /*train=*/false);
    for (std::int64_t i = 0; i < z.size(); ++i) {
      probs.push_back(stable_sigmoid(static_cast<double>(z.data()[i])));
    }
    labels.insert(labels.end(), batch.labels.begin(), batch.labels.end());
  }
  return {std::move(probs), std::move(labels)};
}

inline double acc_at_half(const std::vector<double>& probs,
                          const std::vector<int>& labels) {
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const int pred = probs[i] >= 0.5 ? 1 : 0;  // boundary counts as fake
    if (pred == labels[i]) ++correct;
  }
  return probs.empty() ? 0.0
                       : static_cast<double>(correct) /
                             static_cast<double>(probs.size());
}

}  // namespace traindetail

// Optimizes the model on the manifest's train split, tracking validation
// accuracy at threshold 0.5 per epoch; keeps the best-validation weights.
// Only the train and val splits are ever read.
template <typename T>
FitResult<T> fit(const ModelConfig& model_cfg, ModelWeights<T> weights,
                 const DatasetManifest& manifest, const PreprocessConfig& pre,
                 const TrainConfig& cfg, std::ostream* progress = nullptr) {
  cfg.validate();
  pre.validate();
  const auto train_idx_all = manifest.view(Split::train);
  const auto val_idx = manifest.view(Split::val);

  auto params = weights.learnable();
  auto state = AdamState<T>::init(params);
  double lr = cfg.lr;
  TrainConfig step_cfg = cfg;
  PlateauSchedule schedule(cfg.plateau_patience, cfg.plateau_threshold,
                           cfg.lr_drop_factor);

  FitResult<T> result;
  result.best_val_acc = -1.0;
  Rng rng(derive_seed(cfg.seed, 0x54524149));

  const int micro = std::min(cfg.micro_batch, cfg.batch_size);
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    auto order = train_idx_all;
    shuffle_indices(order, rng);
    double loss_sum = 0.0;
    std::int64_t loss_batches = 0;
    for (std::size_t at = 0; at < order.size();
         at += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t bend =
          std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
      const auto batch_n = static_cast<double>(bend - at);
      double batch_loss = 0.0;
      weights.zero_grads();
      for (std::size_t mat = at; mat < bend;
           mat += static_cast<std::size_t>(micro)) {
        const std::size_t mend =
            std::min(bend, mat + static_cast<std::size_t>(micro));
        std::vector<std::int64_t> chunk(
            order.begin() + static_cast<std::ptrdiff_t>(mat),
            order.begin() + static_cast<std::ptrdiff_t>(mend));
        auto batch = load_batch<T>(manifest, chunk, pre, /*random_crop=*/true,
                                   rng);
        Tensor<T> z = image_logits(model_cfg, weights, batch.images,
                                   /*train=*/true);
        Tensor<T> loss = bce_image_loss(z, batch.labels);
        // Mean over the full logical batch: weight each micro mean by its
        // share. Gradients then match the unsplit batch exactly.
        const double w = static_cast<double>(batch.labels.size()) / batch_n;
        Tensor<T> scaled = scale(loss, static_cast<T>(w));
        scaled.backward();
        batch_loss += scaled.item();
      }
      if (!std::isfinite(batch_loss)) {
        throw NumericError("non-finite training loss at epoch " +
                           std::to_string(epoch));
      }
      step_cfg.lr = lr;
      adam_step(params, state, step_cfg);
      loss_sum += batch_loss;
      ++loss_batches;
    }
    const double train_loss =
        loss_batches > 0 ? loss_sum / static_cast<double>(loss_batches) : 0.0;
    auto [probs, labels] = traindetail::score_records(
        model_cfg, weights, manifest, val_idx, pre, micro, rng);
    const double val_acc = traindetail::acc_at_half(probs, labels);
    result.log.entries.push_back({epoch, train_loss, val_acc, lr});
    if (progress) {
      (*progress) << "epoch " << epoch << " train_loss " << train_loss
                  << " val_acc " << val_acc << " lr " << lr << '\n';
    }
    if (val_acc > result.best_val_acc) {
      result.best_val_acc = val_acc;
      result.best_epoch = epoch;
      result.best_weights = weights.clone();
    }
    schedule.observe(val_acc, lr);
  }
  if (result.best_epoch == 0) {
    result.best_weights = weights.clone();
  }
  return result;
}

}  // namespace patchscope
